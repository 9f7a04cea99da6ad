//! Generalization-bound expressions and the experiment sweeps built on them.
//!
//! Deviation terms are reported with constant 1; they show the shape of the
//! bound only.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dataset::{flip_labels, LabeledDataset};
use crate::error::{Error, Result};
use crate::network::init_params;
use crate::ntk::{min_eigenvalue, psd_solve};
use crate::ntrf::{fit_projected_sgd_cached, FeatureCache, FitOptions, FitResult};
use crate::seed::{self, Stream};

pub const DEFAULT_DELTA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    NtrfTheorem,
    KernelCorollary,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundHyper {
    pub n: usize,
    pub width: Option<usize>,
    pub depth: usize,
    pub radius: Option<f64>,
    pub delta: f64,
    pub flip_ratio: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub kind: BoundKind,
    pub first_term: f64,
    /// `L·R/√n`, NTRF bound only.
    pub radius_term: Option<f64>,
    /// `√(log(1/δ)/n)`.
    pub confidence_term: f64,
    /// `yᵀΘ⁻¹y`, kernel bound only.
    pub quadratic_form: Option<f64>,
    /// `√(yᵀΘ⁻¹y/n)`, kernel bound only.
    pub quantity: Option<f64>,
    pub hyper: BoundHyper,
    pub jitter_used: f64,
    pub notes: Vec<String>,
}

pub fn confidence_term(n: usize, delta: f64) -> f64 {
    ((1.0 / delta).ln() / n as f64).sqrt()
}

/// First term `(4/n)Σℓ(y_i f(x_i))` of the NTRF bound at a fitted model.
///
/// The fit only upper-estimates the infimum over the function class.
pub fn ntrf_bound_first_term<'a>(
    cache: &FeatureCache,
    anchor: &'a crate::network::NetParams,
    data: &LabeledDataset,
    opts: &FitOptions,
) -> Result<(BoundReport, FitResult<'a>)> {
    let fit = fit_projected_sgd_cached(anchor, data, cache, opts)?;
    let n = data.len();
    let depth = anchor.depth();
    let report = BoundReport {
        kind: BoundKind::NtrfTheorem,
        first_term: 4.0 * fit.objective,
        radius_term: Some(depth as f64 * opts.radius / (n as f64).sqrt()),
        confidence_term: confidence_term(n, DEFAULT_DELTA),
        quadratic_form: None,
        quantity: None,
        hyper: BoundHyper {
            n,
            width: Some(anchor.width()),
            depth,
            radius: Some(opts.radius),
            delta: DEFAULT_DELTA,
            flip_ratio: data.meta.flip_ratio,
            seeds: 1,
        },
        jitter_used: 0.0,
        notes: vec![
            "first term at the projected-SGD fit; upper estimate of the infimum".into(),
            "deviation terms use constant 1 (shape only)".into(),
        ],
    };
    Ok((report, fit))
}

/// Kernel bound `L·√(yᵀΘ⁻¹y/n)` with the given labels as targets.
pub fn kernel_bound(theta: &DMatrix<f64>, depth: usize, labels: &[f64]) -> Result<BoundReport> {
    let mut report = kernel_bound_unchecked(theta, depth, labels)?;
    let n = labels.len();
    let q = report.quadratic_form.expect("set by kernel bound");
    let lower = 1.0 / depth as f64;
    let lambda = min_eigenvalue(theta) + report.jitter_used;
    let upper = if lambda > 0.0 { n as f64 / lambda } else { f64::INFINITY };
    let slack = 1e-9 * q.abs().max(1.0);
    if q < lower - slack || q > upper * (1.0 + 1e-6) + slack {
        let msg = format!("yᵀΘ⁻¹y = {q} outside the envelope [{lower}, {upper}]");
        warn!("{msg}");
        report.notes.push(msg);
    }
    Ok(report)
}

fn kernel_bound_unchecked(theta: &DMatrix<f64>, depth: usize, labels: &[f64]) -> Result<BoundReport> {
    let n = labels.len();
    if n != theta.nrows() {
        return Err(Error::Shape(format!(
            "{n} labels for a kernel on {} points",
            theta.nrows()
        )));
    }
    let y = DVector::from_column_slice(labels);
    let solved = psd_solve(theta, &y)?;
    let q = y.dot(&solved.solution);
    if !q.is_finite() {
        return Err(Error::Numeric(format!("quadratic form is {q}")));
    }
    let quantity = (q.max(0.0) / n as f64).sqrt();
    Ok(BoundReport {
        kind: BoundKind::KernelCorollary,
        first_term: depth as f64 * quantity,
        radius_term: None,
        confidence_term: confidence_term(n, DEFAULT_DELTA),
        quadratic_form: Some(q),
        quantity: Some(quantity),
        hyper: BoundHyper {
            n,
            width: None,
            depth,
            radius: None,
            delta: DEFAULT_DELTA,
            flip_ratio: 0.0,
            seeds: 1,
        },
        jitter_used: solved.jitter,
        notes: vec!["targets equal the labels".into()],
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FlipRow {
    pub ratio: f64,
    pub seed: u64,
    pub quantity: f64,
    pub jitter: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlipSummary {
    pub ratio: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl FlipSummary {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FlipSweep {
    pub rows: Vec<FlipRow>,
    pub summary: Vec<FlipSummary>,
}

impl FlipSweep {
    pub fn medians_strictly_increasing(&self) -> bool {
        self.summary.windows(2).all(|w| w[1].median > w[0].median)
    }
}

/// Linear-interpolation quantile of a sample.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// `√(yᵀΘ⁻¹y/n)` under label flipping, for each ratio and seed.
///
/// The kernel is given once; each cell only re-solves. Flip seed `s` is
/// `derive_index(sub_seed(base_seed, Flips), s)`, and flip sets are nested
/// across ratios for a given seed.
pub fn flip_sweep(
    data: &LabeledDataset,
    theta: &DMatrix<f64>,
    depth: usize,
    ratios: &[f64],
    seeds: usize,
    base_seed: u64,
) -> Result<FlipSweep> {
    if seeds == 0 || ratios.is_empty() {
        return Err(Error::arg("need at least one ratio and one seed"));
    }
    if let Some(r) = ratios.iter().find(|r| !(0.0..=0.5).contains(*r)) {
        return Err(Error::arg(format!("flip ratio {r} outside [0, 0.5]")));
    }
    if data.len() != theta.nrows() {
        return Err(Error::Shape(format!(
            "{} examples for a kernel on {} points",
            data.len(),
            theta.nrows()
        )));
    }
    let flips = seed::sub_seed(base_seed, Stream::Flips);
    let mut rows = Vec::with_capacity(ratios.len() * seeds);
    let mut summary = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let mut values = Vec::with_capacity(seeds);
        for s in 0..seeds {
            let flip_seed = seed::derive_index(flips, s as u64);
            let flipped = flip_labels(data, ratio, flip_seed)?;
            let report = kernel_bound_unchecked(theta, depth, flipped.labels())?;
            let quantity = report.quantity.expect("set by kernel bound");
            values.push(quantity);
            rows.push(FlipRow {
                ratio,
                seed: flip_seed,
                quantity,
                jitter: report.jitter_used,
            });
        }
        summary.push(FlipSummary {
            ratio,
            median: quantile(&values, 0.5),
            q1: quantile(&values, 0.25),
            q3: quantile(&values, 0.75),
        });
    }
    Ok(FlipSweep { rows, summary })
}

#[derive(Debug, Clone, Serialize)]
pub struct NtrfSweepRow {
    pub m: usize,
    #[serde(rename = "R")]
    pub radius: f64,
    pub seed: u64,
    pub first_term: f64,
    pub lr: f64,
    pub final_lr: f64,
    pub epochs: usize,
    /// Epoch-average minibatch losses of the fit.
    #[serde(skip)]
    pub history: Vec<f64>,
}

/// NTRF first term over a grid of widths, radii and initialization seeds.
///
/// Initialization `s` is `derive_index(sub_seed(base_seed, Init), s)`; the
/// feature cache of each initialization is shared across radii.
pub fn ntrf_sweep(
    data: &LabeledDataset,
    depth: usize,
    widths: &[usize],
    radii: &[f64],
    seeds: usize,
    base_seed: u64,
    template: &FitOptions,
) -> Result<Vec<NtrfSweepRow>> {
    let init = seed::sub_seed(base_seed, Stream::Init);
    let mut rows = Vec::new();
    for &m in widths {
        for s in 0..seeds {
            let init_seed = seed::derive_index(init, s as u64);
            let anchor = init_params(m, data.dim(), depth, init_seed)?;
            let cache = FeatureCache::build(&anchor, data)?;
            for &radius in radii {
                let opts = FitOptions {
                    radius,
                    ..template.clone()
                };
                let (report, fit) = ntrf_bound_first_term(&cache, &anchor, data, &opts)?;
                rows.push(NtrfSweepRow {
                    m,
                    radius,
                    seed: init_seed,
                    first_term: report.first_term,
                    lr: fit.initial_lr,
                    final_lr: fit.final_lr,
                    epochs: opts.epochs,
                    history: fit.history,
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{random_unit_vector, synth_ntk_realizable, DatasetMeta};
    use crate::ntk::kernel_stack;

    fn unit_dataset(n: usize, d: usize, s: u64) -> LabeledDataset {
        let mut rng = seed::rng(s);
        let inputs: Vec<f64> = (0..n).flat_map(|_| random_unit_vector(d, &mut rng)).collect();
        let labels = (0..n).map(|i| if i % 3 == 0 { -1.0 } else { 1.0 }).collect();
        LabeledDataset::new(inputs, labels, d, DatasetMeta::default()).unwrap()
    }

    #[test]
    fn scalar_kernel_bound() {
        let stack = kernel_stack(&[1.0, 0.0, 0.0], 3, 2).unwrap();
        let r = kernel_bound(&stack.theta, 2, &[1.0]).unwrap();
        let q = r.quadratic_form.unwrap();
        assert!((q - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.first_term - 2.0 * (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(r.notes.len() == 1, "{:?}", r.notes);
    }

    #[test]
    fn negation_and_permutation_invariance() {
        let data = unit_dataset(12, 6, 3);
        let stack = kernel_stack(data.inputs(), 6, 3).unwrap();
        let y = data.labels().to_vec();
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        let a = kernel_bound(&stack.theta, 3, &y).unwrap().quadratic_form.unwrap();
        let b = kernel_bound(&stack.theta, 3, &neg).unwrap().quadratic_form.unwrap();
        assert_eq!(a, b);
        let perm: Vec<usize> = (0..12).rev().collect();
        let py: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let c = kernel_bound(&stack.permuted(&perm).theta, 3, &py).unwrap().quadratic_form.unwrap();
        assert!((a - c).abs() <= 1e-10 * a);
        assert!(a >= 1.0 / 3.0);
    }

    #[test]
    fn duplicated_rows_match_deduplicated() {
        let data = unit_dataset(8, 5, 4);
        let idx: Vec<usize> = (0..8).chain([2, 5]).collect();
        let dup = data.select(&idx).unwrap();
        let s1 = kernel_stack(data.inputs(), 5, 3).unwrap();
        let s2 = kernel_stack(dup.inputs(), 5, 3).unwrap();
        let q1 = kernel_bound(&s1.theta, 3, data.labels()).unwrap();
        let q2 = kernel_bound(&s2.theta, 3, dup.labels()).unwrap();
        assert!(q2.jitter_used > 0.0);
        let (a, b) = (q1.quadratic_form.unwrap(), q2.quadratic_form.unwrap());
        assert!((a - b).abs() <= 0.05 * a, "{a} {b}");
    }

    #[test]
    fn label_length_checked() {
        let stack = kernel_stack(&[1.0, 0.0], 2, 2).unwrap();
        assert!(matches!(kernel_bound(&stack.theta, 2, &[1.0, 1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_ratio_is_seed_independent() {
        let data = unit_dataset(20, 5, 7);
        let stack = kernel_stack(data.inputs(), 5, 3).unwrap();
        let sweep = flip_sweep(&data, &stack.theta, 3, &[0.0, 0.5], 4, 1).unwrap();
        let zero: Vec<f64> = sweep.rows.iter().filter(|r| r.ratio == 0.0).map(|r| r.quantity).collect();
        assert!(zero.iter().all(|&v| v == zero[0]));
        assert_eq!(sweep.rows.len(), 8);
        assert!(sweep.summary[0].iqr() == 0.0);
        assert!(flip_sweep(&data, &stack.theta, 3, &[0.6], 1, 1).is_err());
    }

    #[test]
    fn quantiles() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.25), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }

    #[test]
    fn small_ntrf_sweep() {
        let data = synth_ntk_realizable(24, 5, 2, 1).unwrap();
        let mut t = FitOptions::new(1.0, 0);
        t.epochs = 10;
        let rows = ntrf_sweep(&data, 2, &[64], &[1.0, 20.0], 2, 3, &t).unwrap();
        assert_eq!(rows.len(), 4);
        for pair in rows.chunks(2) {
            assert!(pair[1].first_term <= pair[0].first_term + 1e-3);
        }
        assert!(rows.iter().all(|r| r.first_term.is_finite() && r.first_term >= 0.0));
    }
}
