use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// First jitter tried, relative to `trace(Θ)/n`.
const JITTER_START: f64 = 1e-10;
/// Largest jitter allowed, relative to `trace(Θ)/n`.
const JITTER_CEILING: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct PsdSolution {
    pub solution: DVector<f64>,
    /// Absolute multiple of the identity added before factorizing (0 if none).
    pub jitter: f64,
}

/// Cholesky factor of `a`, rejected if a pivot is numerically zero.
///
/// A factorization of an exactly singular matrix can "succeed" with a pivot
/// at rounding level; treating that as failure routes it to the jitter path.
fn factor(a: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let n = a.nrows();
    let max_diag = a.diagonal().iter().cloned().fold(0.0, f64::max);
    let floor = n as f64 * f64::EPSILON * max_diag;
    let chol = Cholesky::new(a.clone())?;
    let l = chol.l_dirty();
    if (0..n).all(|i| l[(i, i)] * l[(i, i)] > floor) {
        Some(chol)
    } else {
        None
    }
}

/// Solve `Θ s = rhs` for symmetric positive (semi)definite `Θ`.
///
/// Tries a plain Cholesky first; on failure adds `ε·I` with
/// `ε = 1e−10·trace/n`, growing ×10 up to `1e−4·trace/n`.
pub fn psd_solve(theta: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<PsdSolution> {
    let n = theta.nrows();
    if theta.ncols() != n || rhs.len() != n {
        return Err(Error::Shape(format!(
            "{}×{} matrix with right-hand side of length {}",
            theta.nrows(),
            theta.ncols(),
            rhs.len()
        )));
    }
    if n == 0 {
        return Err(Error::arg("empty system"));
    }
    let scale = theta.abs().max().max(f64::MIN_POSITIVE);
    if (theta - theta.transpose()).abs().max() > 1e-12 * scale {
        return Err(Error::Precondition("matrix is not symmetric".into()));
    }
    if let Some(chol) = factor(theta) {
        return Ok(PsdSolution {
            solution: chol.solve(rhs),
            jitter: 0.0,
        });
    }
    let base = theta.trace() / n as f64;
    let mut rel = JITTER_START;
    while rel <= JITTER_CEILING * (1.0 + 1e-9) {
        let eps = rel * base;
        let mut shifted = theta.clone();
        for i in 0..n {
            shifted[(i, i)] += eps;
        }
        if let Some(chol) = factor(&shifted) {
            warn!("kernel solve needed jitter {eps:.3e} ({rel:.0e}·trace/n)");
            return Ok(PsdSolution {
                solution: chol.solve(rhs),
                jitter: eps,
            });
        }
        rel *= 10.0;
    }
    let (i, j, correlation) = most_correlated_pair(theta);
    Err(Error::Singular {
        jitter: JITTER_CEILING * base,
        i,
        j,
        correlation,
    })
}

/// Off-diagonal pair with the largest `|Θ_ij| / √(Θ_ii Θ_jj)`.
pub fn most_correlated_pair(theta: &DMatrix<f64>) -> (usize, usize, f64) {
    let n = theta.nrows();
    let mut best = (0, 0, 0.0f64);
    for i in 0..n {
        for j in i + 1..n {
            let d = (theta[(i, i)] * theta[(j, j)]).sqrt();
            let c = if d > 0.0 { theta[(i, j)].abs() / d } else { f64::INFINITY };
            if c > best.2 || best.0 == best.1 {
                best = (i, j, c);
            }
        }
    }
    best
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_solve() {
        let s = psd_solve(&DMatrix::identity(4, 4), &DVector::from_element(4, 1.0)).unwrap();
        assert_eq!(s.solution, DVector::from_element(4, 1.0));
        assert_eq!(s.jitter, 0.0);
    }

    #[test]
    fn scalar_solve() {
        let s = psd_solve(&DMatrix::from_element(1, 1, 1.5), &DVector::from_element(1, 1.0)).unwrap();
        assert!((s.solution[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn duplicated_rows_need_jitter() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 2.0, 0.5, 2.0, 2.0, 0.5, 0.5, 0.5, 2.0]);
        let rhs = DVector::from_vec(vec![1.0, 1.0, -1.0]);
        let s = psd_solve(&a, &rhs).unwrap();
        assert!(s.jitter > 0.0);
        let residual = (&a * &s.solution - &rhs).norm();
        assert!(residual < 1e-6, "{residual}");
    }

    #[test]
    fn singular_beyond_ceiling_names_pair() {
        // Indefinite: no jitter up to the ceiling makes it positive definite.
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 3.0, 0.0, 3.0, 1.0]);
        match psd_solve(&a, &DVector::from_element(3, 1.0)) {
            Err(Error::Singular { i, j, .. }) => assert_eq!((i, j), (1, 2)),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn asymmetric_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            psd_solve(&a, &DVector::from_element(2, 1.0)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn min_eigenvalue_of_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 0.5, 2.0]));
        assert!((min_eigenvalue(&a) - 0.5).abs() < 1e-15);
    }
}
