//! Infinite-width neural tangent kernel of the ReLU network.
//!
//! Starting from `Σ⁽¹⁾ = Θ̃⁽¹⁾ = XXᵀ`, each layer applies
//!
//! ```text
//! Σ⁽ˡ⁺¹⁾_ij = 2·E[σ(u)σ(v)]
//! Θ̃⁽ˡ⁺¹⁾_ij = Θ̃⁽ˡ⁾_ij · 2·E[σ′(u)σ′(v)] + Σ⁽ˡ⁺¹⁾_ij
//! ```
//!
//! with `(u, v) ~ N(0, [[Σ_ii, Σ_ij], [Σ_ij, Σ_jj]])`, and the kernel is
//! `Θ⁽ᴸ⁾ = (Θ̃⁽ᴸ⁾ + Σ⁽ᴸ⁾)/2`. The ReLU expectations have closed arc-cosine
//! forms, see [`relu_pair_expectations`].

mod gram;
mod solve;

pub use gram::{empirical_gram, gram_convergence_report, ConvergenceReport, ConvergenceRow, GramMatrix, WidthSummary};
pub(crate) use gram::median;
pub use solve::{min_eigenvalue, most_correlated_pair, psd_solve, PsdSolution};

use std::f64::consts::PI;

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Largest `n` accepted for dense kernel matrices.
pub const MAX_KERNEL_N: usize = 5000;

/// Allowed slack in `Σ_ij² ≤ Σ_ii Σ_jj`.
const COVARIANCE_SLACK: f64 = 1e-12;

/// Correlations this close to ±1 are snapped to ±1 before `arccos`.
///
/// `arccos` has infinite slope at ±1, so a single ulp of rounding in the
/// correlation of two identical inputs would otherwise move `κ₀` by ~1e−8.
const SNAP_TO_UNIT: f64 = 8.0 * f64::EPSILON;

/// `(κ₁, κ₀) = (2·E[σ(u)σ(v)], 2·E[σ′(u)σ′(v)])` for a centred Gaussian pair.
///
/// With `λ = clamp(s_ij/√(s_ii s_jj), −1, 1)`:
/// `κ₁ = √(s_ii s_jj)/π · (λ(π − arccos λ) + √(1 − λ²))` and
/// `κ₀ = (π − arccos λ)/π`.
pub fn relu_pair_expectations(sii: f64, sjj: f64, sij: f64) -> Result<(f64, f64)> {
    if !(sii > 0.0 && sjj > 0.0) {
        return Err(Error::arg(format!(
            "variances must be positive, got ({sii}, {sjj})"
        )));
    }
    if !sij.is_finite() || sij * sij > sii * sjj + COVARIANCE_SLACK {
        return Err(Error::arg(format!(
            "covariance {sij} invalid for variances ({sii}, {sjj})"
        )));
    }
    Ok(arc_cosine(sii, sjj, sij))
}

#[inline]
fn arc_cosine(sii: f64, sjj: f64, sij: f64) -> (f64, f64) {
    let scale = (sii * sjj).sqrt();
    let lambda = snap_correlation(sij / scale);
    arc_cosine_from_correlation(scale, lambda)
}

#[inline]
fn snap_correlation(lambda: f64) -> f64 {
    let lambda = lambda.clamp(-1.0, 1.0);
    if 1.0 - lambda.abs() <= SNAP_TO_UNIT {
        lambda.signum()
    } else {
        lambda
    }
}

#[inline]
fn arc_cosine_from_correlation(scale: f64, lambda: f64) -> (f64, f64) {
    let angle = PI - lambda.acos();
    let kappa1 = scale / PI * (lambda * angle + (1.0 - lambda * lambda).max(0.0).sqrt());
    let kappa0 = angle / PI;
    (kappa1, kappa0)
}

/// The kernel recursion on `n` inputs.
#[derive(Debug, Clone)]
pub struct KernelStack {
    /// `Σ⁽¹⁾ … Σ⁽ᴸ⁾`.
    pub sigma: Vec<DMatrix<f64>>,
    /// `Θ̃⁽¹⁾ … Θ̃⁽ᴸ⁾`.
    pub theta_tilde: Vec<DMatrix<f64>>,
    /// `Θ⁽ᴸ⁾ = (Θ̃⁽ᴸ⁾ + Σ⁽ᴸ⁾)/2`.
    pub theta: DMatrix<f64>,
    pub depth: usize,
    pub n: usize,
}

impl KernelStack {
    pub fn sigma_last(&self) -> &DMatrix<f64> {
        self.sigma.last().expect("depth ≥ 2")
    }

    pub fn theta_tilde_last(&self) -> &DMatrix<f64> {
        self.theta_tilde.last().expect("depth ≥ 2")
    }

    /// Permute every matrix by `perm` (new index `k` takes old `perm[k]`).
    pub fn permuted(&self, perm: &[usize]) -> KernelStack {
        let p = |m: &DMatrix<f64>| DMatrix::from_fn(self.n, self.n, |i, j| m[(perm[i], perm[j])]);
        KernelStack {
            sigma: self.sigma.iter().map(p).collect(),
            theta_tilde: self.theta_tilde.iter().map(p).collect(),
            theta: p(&self.theta),
            depth: self.depth,
            n: self.n,
        }
    }
}

/// Build an `n × n` symmetric matrix from an upper-triangle rule, in parallel
/// over rows. Each entry is computed once and mirrored.
fn symmetric_from_fn<F>(n: usize, f: F) -> DMatrix<f64>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| f(i, j)).collect())
        .collect();
    let mut out = DMatrix::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        for (k, v) in row.into_iter().enumerate() {
            let j = i + k;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Run the recursion for `depth` layers on the row-major `n × d` inputs.
pub fn kernel_stack(inputs: &[f64], dim: usize, depth: usize) -> Result<KernelStack> {
    if depth < 2 {
        return Err(Error::arg(format!("depth {depth} < 2")));
    }
    if dim == 0 || inputs.is_empty() || inputs.len() % dim != 0 {
        return Err(Error::Shape(format!(
            "{} input values do not form rows of dimension {dim}",
            inputs.len()
        )));
    }
    let n = inputs.len() / dim;
    if n > MAX_KERNEL_N {
        return Err(Error::arg(format!(
            "n = {n} exceeds the dense kernel limit {MAX_KERNEL_N}"
        )));
    }
    let row = |i: usize| &inputs[i * dim..(i + 1) * dim];
    for i in 0..n {
        let norm = row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!(
                "input {i} has norm {norm}, kernel needs unit-norm rows"
            )));
        }
    }

    let base = symmetric_from_fn(n, |i, j| {
        row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum()
    });
    let mut sigma = vec![base.clone()];
    let mut theta_tilde = vec![base];
    for _ in 1..depth {
        let s = sigma.last().expect("non-empty");
        let t = theta_tilde.last().expect("non-empty");
        // Both outputs come from the same (κ₁, κ₀) pair; compute them together.
        let pairs: Vec<Vec<(f64, f64)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (i..n)
                    .map(|j| {
                        let (k1, k0) = if i == j {
                            arc_cosine_from_correlation(s[(i, i)], 1.0)
                        } else {
                            arc_cosine(s[(i, i)], s[(j, j)], s[(i, j)])
                        };
                        (k1, t[(i, j)] * k0 + k1)
                    })
                    .collect()
            })
            .collect();
        let mut s_next = DMatrix::zeros(n, n);
        let mut t_next = DMatrix::zeros(n, n);
        for (i, row) in pairs.into_iter().enumerate() {
            for (k, (sv, tv)) in row.into_iter().enumerate() {
                let j = i + k;
                s_next[(i, j)] = sv;
                s_next[(j, i)] = sv;
                t_next[(i, j)] = tv;
                t_next[(j, i)] = tv;
            }
        }
        sigma.push(s_next);
        theta_tilde.push(t_next);
    }
    let theta = (theta_tilde.last().expect("depth ≥ 2") + sigma.last().expect("depth ≥ 2")) * 0.5;

    let parallel = count_parallel_pairs(sigma.first().expect("depth ≥ 2"));
    if parallel > 0 {
        warn!("{parallel} near-parallel input pairs; the kernel matrix is (near) singular");
    }
    Ok(KernelStack {
        sigma,
        theta_tilde,
        theta,
        depth,
        n,
    })
}

fn count_parallel_pairs(gram: &DMatrix<f64>) -> usize {
    let n = gram.nrows();
    let mut count = 0;
    for i in 0..n {
        for j in i + 1..n {
            if gram[(i, j)].abs() > crate::dataset::PARALLEL_THRESHOLD {
                count += 1;
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::random_unit_vector;
    use crate::seed;
    use rand::Rng;

    #[test]
    fn identical_pair() {
        let (k1, k0) = relu_pair_expectations(1.0, 1.0, 1.0).unwrap();
        assert_eq!((k1, k0), (1.0, 1.0));
    }

    #[test]
    fn antipodal_pair() {
        let (k1, k0) = relu_pair_expectations(1.0, 1.0, -1.0).unwrap();
        assert!(k1.abs() < 1e-15 && k0.abs() < 1e-15, "{k1} {k0}");
    }

    #[test]
    fn orthogonal_pair() {
        let (k1, k0) = relu_pair_expectations(1.0, 1.0, 0.0).unwrap();
        assert!((k1 - 1.0 / PI).abs() < 1e-15);
        assert!((k0 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn invalid_covariances() {
        assert!(relu_pair_expectations(0.0, 1.0, 0.0).is_err());
        assert!(relu_pair_expectations(1.0, -1.0, 0.0).is_err());
        assert!(relu_pair_expectations(1.0, 1.0, 1.0 + 1e-6).is_err());
        // Within rounding slack.
        assert!(relu_pair_expectations(1.0, 1.0, 1.0 + 1e-14).is_ok());
    }

    #[test]
    fn monotone_in_covariance() {
        for &(sii, sjj) in &[(1.0, 1.0), (0.5, 2.0), (3.0, 0.1)] {
            let bound = (sii * sjj as f64).sqrt();
            let mut prev = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for k in 0..=400 {
                let sij = -bound + 2.0 * bound * k as f64 / 400.0;
                let (k1, k0) = relu_pair_expectations(sii, sjj, sij).unwrap();
                assert!(k1 >= prev.0 - 1e-15 && k0 >= prev.1 - 1e-15);
                prev = (k1, k0);
            }
        }
    }

    fn orthogonal_inputs() -> Vec<f64> {
        vec![1.0, 0.0, 0.0, 1.0]
    }

    #[test]
    fn two_orthogonal_inputs_depth_two() {
        let k = kernel_stack(&orthogonal_inputs(), 2, 2).unwrap();
        let inv_pi = 1.0 / PI;
        assert!((k.sigma[1][(0, 1)] - inv_pi).abs() < 1e-15);
        assert!((k.theta_tilde[1][(0, 1)] - inv_pi).abs() < 1e-15);
        assert!((k.theta[(0, 1)] - inv_pi).abs() < 1e-15);
        assert!((k.theta[(0, 0)] - 1.5).abs() < 1e-15);
    }

    fn random_inputs(n: usize, d: usize, s: u64) -> Vec<f64> {
        let mut rng = seed::rng(s);
        (0..n).flat_map(|_| random_unit_vector(d, &mut rng)).collect()
    }

    #[test]
    fn diagonals_and_bounds() {
        for depth in [2, 3, 5, 8] {
            let k = kernel_stack(&random_inputs(12, 4, 1), 4, depth).unwrap();
            for i in 0..12 {
                assert!((k.sigma_last()[(i, i)] - 1.0).abs() <= 1e-12);
                assert!((k.theta_tilde_last()[(i, i)] - depth as f64).abs() <= 1e-12);
                assert!((k.theta[(i, i)] - (depth as f64 + 1.0) / 2.0).abs() <= 1e-12);
            }
            for l in 0..depth {
                assert!(k.sigma[l].iter().all(|v| v.abs() <= 1.0 + 1e-15));
                assert!(k.theta_tilde[l].iter().all(|v| v.abs() <= (l + 1) as f64 + 1e-12));
            }
            assert_eq!(k.theta, k.theta.transpose());
        }
    }

    #[test]
    fn duplicated_input_gives_equal_rows() {
        let mut x = random_inputs(3, 5, 4);
        let first: Vec<f64> = x[..5].to_vec();
        x.extend_from_slice(&first);
        let k = kernel_stack(&x, 5, 4).unwrap();
        assert!((k.theta[(0, 3)] - 2.5).abs() < 1e-12);
        for j in 0..4 {
            assert!((k.theta[(0, j)] - k.theta[(3, j)]).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let x = random_inputs(5, 3, 8);
        let perm = [3usize, 0, 4, 1, 2];
        let px: Vec<f64> = perm.iter().flat_map(|&i| x[i * 3..i * 3 + 3].to_vec()).collect();
        let k = kernel_stack(&x, 3, 3).unwrap();
        let kp = kernel_stack(&px, 3, 3).unwrap();
        let expect = k.permuted(&perm);
        assert!((kp.theta - expect.theta).abs().max() < 1e-14);
    }

    #[test]
    fn rejects_non_unit_rows_and_depth_one() {
        assert!(matches!(
            kernel_stack(&[2.0, 0.0], 2, 2),
            Err(Error::Precondition(_))
        ));
        assert!(kernel_stack(&orthogonal_inputs(), 2, 1).is_err());
    }

    #[test]
    fn closed_form_matches_small_monte_carlo() {
        // Quick smoke check; the acceptance suite runs the full oracle.
        let mut rng = seed::rng(3);
        let (k1, k0) = relu_pair_expectations(1.0, 1.0, 0.3).unwrap();
        let n = 200_000;
        let (mut a, mut b) = (0.0, 0.0);
        let c = (1.0f64 - 0.09).sqrt();
        for _ in 0..n {
            let g1: f64 = rng.sample(rand_distr::StandardNormal);
            let g2: f64 = rng.sample(rand_distr::StandardNormal);
            let u = g1;
            let v = 0.3 * g1 + c * g2;
            a += 2.0 * u.max(0.0) * v.max(0.0);
            b += if u > 0.0 && v > 0.0 { 2.0 } else { 0.0 };
        }
        assert!((a / n as f64 - k1).abs() < 0.01);
        assert!((b / n as f64 - k0).abs() < 0.01);
    }
}
