//! Empirical checks of the near-initialization structure of wide networks.
//!
//! Every check is deterministic in its [`CheckConfig`]. Inputs are random
//! unit vectors and labels random signs, both drawn from the verify stream.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::random_unit_vector;
use crate::error::{Error, Result};
use crate::network::{self, init_params, logistic_loss, NetParams};
use crate::ntk::median;
use crate::ntk::gram_convergence_report;
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    #[serde(rename = "PASS")]
    Pass,
    #[serde(rename = "TREND_PASS")]
    TrendPass,
    #[serde(rename = "FAIL")]
    Fail,
}

impl Verdict {
    pub fn is_fail(self) -> bool {
        self == Verdict::Fail
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::TrendPass => "TREND_PASS",
            Verdict::Fail => "FAIL",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckConfig {
    #[serde(rename = "m")]
    pub width: usize,
    #[serde(rename = "L")]
    pub depth: usize,
    pub n: usize,
    pub dim: usize,
    pub seeds: usize,
    pub base_seed: u64,
    /// Perturbation scales `t` or `ω`, decreasing. Empty means the check's default.
    pub grid: Vec<f64>,
    /// Pairs per seed for the convexity check.
    pub pairs: usize,
}

impl CheckConfig {
    pub fn new(width: usize, depth: usize) -> Self {
        CheckConfig {
            width,
            depth,
            n: 10,
            dim: 10,
            seeds: 10,
            base_seed: 0,
            grid: Vec::new(),
            pairs: 50,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth < 2 || self.n == 0 || self.dim == 0 || self.seeds == 0 {
            return Err(Error::arg(
                "verify needs m ≥ 1, L ≥ 2, n ≥ 1, d ≥ 1 and at least one seed",
            ));
        }
        if self.grid.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::arg("perturbation grid must be strictly decreasing"));
        }
        if self.grid.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::arg("perturbation scales must be finite and non-negative"));
        }
        Ok(())
    }

    fn grid_or(&self, default: impl FnOnce() -> Vec<f64>) -> Vec<f64> {
        if self.grid.is_empty() {
            default()
        } else {
            self.grid.clone()
        }
    }

    fn trial_seed(&self, s: usize) -> u64 {
        seed::derive_index(seed::sub_seed(self.base_seed, Stream::Verify), s as u64)
    }

    fn inverse_sqrt_width(&self) -> f64 {
        1.0 / (self.width as f64).sqrt()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeriesPoint {
    /// `t` or `ω`.
    pub scale: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub seed: u64,
    pub values: BTreeMap<String, f64>,
    pub reproduce: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct LemmaCheckResult {
    pub lemma_id: String,
    pub trials: usize,
    pub statistic: BTreeMap<String, f64>,
    pub series: Vec<SeriesPoint>,
    pub verdict: Verdict,
    pub config: CheckConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
}

/// The CLI line that reruns a check.
pub fn reproduce_command(lemma: &str, cfg: &CheckConfig) -> String {
    let mut cmd = format!(
        "ntkw verify --lemma {lemma} --m {} --depth {} --n {} --dim {} --seeds {} --seed {} --pairs {}",
        cfg.width, cfg.depth, cfg.n, cfg.dim, cfg.seeds, cfg.base_seed, cfg.pairs
    );
    if !cfg.grid.is_empty() {
        let g: Vec<String> = cfg.grid.iter().map(|v| format!("{v:e}")).collect();
        cmd.push_str(&format!(" --grid {}", g.join(",")));
    }
    cmd
}

fn failure(lemma: &str, cfg: &CheckConfig, seed: u64, values: &[(&str, f64)]) -> Failure {
    Failure {
        seed,
        values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        reproduce: reproduce_command(lemma, cfg),
    }
}

fn stats(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

fn min_of(v: &[f64]) -> f64 {
    v.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Random unit inputs and sign labels for trial seed `s`.
fn trial_data(cfg: &CheckConfig, s: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = seed::rng(seed::derive(s, "inputs"));
    let inputs: Vec<f64> = (0..cfg.n)
        .flat_map(|_| random_unit_vector(cfg.dim, &mut rng))
        .collect();
    let labels = (0..cfg.n)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    (inputs, labels)
}

fn gaussian_like<R: Rng>(params: &NetParams, rng: &mut R) -> Vec<DMatrix<f64>> {
    params
        .zeros_like()
        .into_iter()
        .map(|z| z.map(|_| rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Direction with total Frobenius norm 1 over all layers.
fn unit_direction<R: Rng>(params: &NetParams, rng: &mut R) -> Vec<DMatrix<f64>> {
    let mut d = gaussian_like(params, rng);
    let norm = d.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt();
    d.iter_mut().for_each(|m| m.scale_mut(1.0 / norm));
    d
}

/// Each layer on the sphere of radius `radius[l]` (Frobenius).
fn layer_sphere_direction<R: Rng>(params: &NetParams, radius: &[f64], rng: &mut R) -> Vec<DMatrix<f64>> {
    let mut d = gaussian_like(params, rng);
    for (m, &r) in d.iter_mut().zip(radius) {
        let n = m.norm();
        m.scale_mut(r / n);
    }
    d
}

/// Hidden layers `h_1 … h_{L−1}` for all inputs as `m × n` matrices.
fn hidden_batch(params: &NetParams, inputs: &[f64], dim: usize) -> Vec<DMatrix<f64>> {
    let n = inputs.len() / dim;
    let mut h = DMatrix::from_column_slice(dim, n, inputs);
    let depth = params.depth();
    let mut out = Vec::with_capacity(depth - 1);
    for w in &params.layers()[..depth - 1] {
        h = w * h;
        h.apply(|v| *v = v.max(0.0));
        out.push(h.clone());
    }
    out
}

/// Linearization error `e(t) = |f_{W+tU}(x) − f_W(x) − t⟨∇f_W(x), U⟩|`.
///
/// TREND_PASS when the median of `e(t)/t` decreases along the (decreasing)
/// `t` grid and `e ≤ 10⁻³·|t⟨∇f, U⟩|` in median at the smallest `t`.
pub fn check_linearization(cfg: &CheckConfig) -> Result<LemmaCheckResult> {
    const ID: &str = "linearization";
    cfg.validate()?;
    let s = cfg.inverse_sqrt_width();
    let grid = cfg.grid_or(|| vec![1e-2 * s, 1e-3 * s, 1e-4 * s]);
    if grid.iter().any(|&t| t > s * (1.0 + 1e-12)) {
        return Err(Error::arg(format!("linearization scales must be at most m^(-1/2) = {s}")));
    }
    struct Trial {
        seed: u64,
        ratios: Vec<f64>,
        first_order: f64,
    }
    let trials: Vec<Trial> = (0..cfg.seeds)
        .map(|k| -> Result<Trial> {
            let ts = cfg.trial_seed(k);
            let params = init_params(cfg.width, cfg.dim, cfg.depth, ts)?;
            let (inputs, _) = trial_data(cfg, ts);
            let x = &inputs[(k % cfg.n) * cfg.dim..(k % cfg.n + 1) * cfg.dim];
            let u = unit_direction(&params, &mut seed::rng(seed::derive(ts, "direction")));
            let trace = network::forward(&params, x)?;
            let f0 = trace.output;
            let slope = trace.into_gradient().dot_direction(&u);
            let mut ratios = Vec::with_capacity(grid.len());
            let mut first_order = 0.0;
            for &t in &grid {
                let moved = params.perturbed(&u, t)?;
                let e = (network::predict(&moved, x)? - f0 - t * slope).abs();
                ratios.push(if t > 0.0 { e / t } else { 0.0 });
                first_order = if slope != 0.0 && t > 0.0 { e / (t * slope).abs() } else { 0.0 };
            }
            Ok(Trial {
                seed: ts,
                ratios,
                first_order,
            })
        })
        .collect::<Result<_>>()?;

    let series: Vec<SeriesPoint> = grid
        .iter()
        .enumerate()
        .map(|(g, &t)| {
            let v: Vec<f64> = trials.iter().map(|tr| tr.ratios[g]).collect();
            SeriesPoint {
                scale: t,
                median: median(&v),
                max: max_of(&v),
            }
        })
        .collect();
    let first: Vec<f64> = trials.iter().map(|t| t.first_order).collect();
    let first_order = median(&first);
    let decreasing = series.windows(2).all(|w| w[1].median < w[0].median);
    let verdict = if decreasing && first_order <= 1e-3 {
        Verdict::TrendPass
    } else {
        Verdict::Fail
    };
    let failure = (verdict == Verdict::Fail).then(|| {
        let worst = trials
            .iter()
            .max_by(|a, b| a.first_order.total_cmp(&b.first_order))
            .expect("at least one trial");
        let mut values: Vec<(&str, f64)> = vec![("first_order_ratio", worst.first_order)];
        let names = ["ratio_t0", "ratio_t1", "ratio_t2", "ratio_t3", "ratio_t4", "ratio_t5"];
        values.extend(names.iter().zip(&worst.ratios).map(|(n, v)| (*n, *v)));
        failure(ID, cfg, worst.seed, &values)
    });
    Ok(LemmaCheckResult {
        lemma_id: ID.into(),
        trials: trials.len(),
        statistic: stats(&[("median_first_order_ratio", first_order)]),
        series,
        verdict,
        config: CheckConfig { grid, ..cfg.clone() },
        failure,
    })
}

/// `ε_emp = 10·ω^{4/3}·L²·√(m log m)`.
pub fn convexity_slack(omega: f64, depth: usize, width: usize) -> f64 {
    let m = width as f64;
    10.0 * omega.powf(4.0 / 3.0) * (depth * depth) as f64 * (m * m.ln().max(1.0)).sqrt()
}

/// Violation `max(0, L_i(W) + ⟨∇L_i(W), W′ − W⟩ − L_i(W′))` for one pair.
pub fn convexity_violation(w: &NetParams, w2: &NetParams, x: &[f64], y: f64) -> Result<f64> {
    let lg = network::loss_and_grad(w, x, y)?;
    let diff: Vec<DMatrix<f64>> = w2.layers().iter().zip(w.layers()).map(|(a, b)| a - b).collect();
    let lin = lg.loss + lg.grad.dot_direction(&diff);
    let other = logistic_loss(y * network::predict(w2, x)?);
    Ok((lin - other).max(0.0))
}

/// Random pairs `W, W′ ∈ B(W⁽¹⁾, ω)` for each `ω` of the grid.
///
/// PASS when every violation is at most [`convexity_slack`]; otherwise
/// TREND_PASS when the median violation decreases with `ω`.
pub fn check_almost_convexity(cfg: &CheckConfig) -> Result<LemmaCheckResult> {
    const ID: &str = "convexity";
    cfg.validate()?;
    if cfg.pairs == 0 {
        return Err(Error::arg("need at least one pair"));
    }
    let s = cfg.inverse_sqrt_width();
    let grid = cfg.grid_or(|| vec![s, 0.5 * s, 0.25 * s]);
    if grid.iter().any(|&w| w > 10.0 * s) {
        return Err(Error::arg(format!("ω must be at most 10·m^(-1/2) = {}", 10.0 * s)));
    }
    let depth = cfg.depth;
    // (grid index, seed, violation)
    let mut all: Vec<(usize, u64, f64)> = Vec::new();
    for k in 0..cfg.seeds {
        let ts = cfg.trial_seed(k);
        let init = init_params(cfg.width, cfg.dim, depth, ts)?;
        let (inputs, labels) = trial_data(cfg, ts);
        let mut rng = seed::rng(seed::derive(ts, "pairs"));
        for (g, &omega) in grid.iter().enumerate() {
            for p in 0..cfg.pairs {
                let point = |rng: &mut rand_chacha::ChaCha8Rng| {
                    let radii: Vec<f64> = (0..depth).map(|_| omega * rng.random::<f64>()).collect();
                    let d = layer_sphere_direction(&init, &radii, rng);
                    init.perturbed(&d, 1.0)
                };
                let w = point(&mut rng)?;
                let w2 = point(&mut rng)?;
                let i = p % cfg.n;
                let x = &inputs[i * cfg.dim..(i + 1) * cfg.dim];
                all.push((g, ts, convexity_violation(&w, &w2, x, labels[i])?));
            }
        }
    }
    let series: Vec<SeriesPoint> = grid
        .iter()
        .enumerate()
        .map(|(g, &omega)| {
            let v: Vec<f64> = all.iter().filter(|r| r.0 == g).map(|r| r.2).collect();
            SeriesPoint {
                scale: omega,
                median: median(&v),
                max: max_of(&v),
            }
        })
        .collect();
    let within = series
        .iter()
        .all(|p| p.max <= convexity_slack(p.scale, depth, cfg.width));
    let shrinking = series.windows(2).all(|w| w[1].median < w[0].median || w[0].median == 0.0);
    let verdict = if within {
        Verdict::Pass
    } else if shrinking {
        Verdict::TrendPass
    } else {
        Verdict::Fail
    };
    let failure = (verdict == Verdict::Fail).then(|| {
        let worst = all.iter().max_by(|a, b| a.2.total_cmp(&b.2)).expect("non-empty");
        failure(
            ID,
            cfg,
            worst.1,
            &[
                ("omega", grid[worst.0]),
                ("violation", worst.2),
                ("slack", convexity_slack(grid[worst.0], depth, cfg.width)),
            ],
        )
    });
    let largest = &series[0];
    Ok(LemmaCheckResult {
        lemma_id: ID.into(),
        trials: all.len(),
        statistic: stats(&[
            ("max_violation", max_of(&all.iter().map(|r| r.2).collect::<Vec<_>>())),
            ("slack_at_largest_omega", convexity_slack(largest.scale, depth, cfg.width)),
        ]),
        series,
        verdict,
        config: CheckConfig { grid, ..cfg.clone() },
        failure,
    })
}

/// Hidden-layer norms `‖h_l‖₂` at initialization and on the sphere of
/// radius `ω` (per layer) around it. PASS when all lie in `[1/2, 3/2]`.
///
/// The grid holds the `ω` values tried; the default is `0` and `0.01·m^{−1/2}`.
pub fn check_hidden_norms(cfg: &CheckConfig) -> Result<LemmaCheckResult> {
    const ID: &str = "norms";
    cfg.validate()?;
    let grid = cfg.grid_or(|| vec![0.01 * cfg.inverse_sqrt_width(), 0.0]);
    let mut lo_all = f64::INFINITY;
    let mut hi_all = f64::NEG_INFINITY;
    let mut worst: Option<(u64, f64, f64)> = None;
    let mut per_omega: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); grid.len()];
    for k in 0..cfg.seeds {
        let ts = cfg.trial_seed(k);
        let init = init_params(cfg.width, cfg.dim, cfg.depth, ts)?;
        let (inputs, _) = trial_data(cfg, ts);
        let mut rng = seed::rng(seed::derive(ts, "perturb"));
        for (g, &omega) in grid.iter().enumerate() {
            let params = if omega > 0.0 {
                let d = layer_sphere_direction(&init, &vec![omega; cfg.depth], &mut rng);
                init.perturbed(&d, 1.0)?
            } else {
                init.clone()
            };
            let norms: Vec<f64> = hidden_batch(&params, &inputs, cfg.dim)
                .iter()
                .flat_map(|h| h.column_iter().map(|c| c.norm()).collect::<Vec<_>>())
                .collect();
            let (lo, hi) = (min_of(&norms), max_of(&norms));
            per_omega[g].0.push(lo);
            per_omega[g].1.push(hi);
            let off = (0.5 - lo).max(hi - 1.5);
            if off > 0.0 && worst.is_none_or(|w| off > (0.5 - w.1).max(w.2 - 1.5)) {
                worst = Some((ts, lo, hi));
            }
            lo_all = lo_all.min(lo);
            hi_all = hi_all.max(hi);
        }
    }
    let verdict = if worst.is_none() { Verdict::Pass } else { Verdict::Fail };
    let series = grid
        .iter()
        .zip(&per_omega)
        .map(|(&omega, (lo, hi))| SeriesPoint {
            scale: omega,
            median: median(lo),
            max: max_of(hi),
        })
        .collect();
    Ok(LemmaCheckResult {
        lemma_id: ID.into(),
        trials: cfg.seeds * grid.len(),
        statistic: stats(&[("min_norm", lo_all), ("max_norm", hi_all)]),
        series,
        verdict,
        config: CheckConfig { grid, ..cfg.clone() },
        failure: worst.map(|(s, lo, hi)| failure(ID, cfg, s, &[("min_norm", lo), ("max_norm", hi)])),
    })
}

/// `max ‖∇_{W_l} f‖_F/√m` and `max ‖∇_{W_l} L_i‖_F/√m` over layers and
/// examples at initialization. PASS when both are at most 4 and every loss
/// gradient is no larger than the corresponding network gradient.
pub fn check_gradient_norms(cfg: &CheckConfig) -> Result<LemmaCheckResult> {
    const ID: &str = "gradients";
    cfg.validate()?;
    let sqrt_m = cfg.inverse_sqrt_width().recip();
    let mut net_max = 0.0f64;
    let mut loss_max = 0.0f64;
    let mut last_min = f64::INFINITY;
    let mut last_max = 0.0f64;
    let mut ordered = true;
    let mut per_seed = Vec::with_capacity(cfg.seeds);
    for k in 0..cfg.seeds {
        let ts = cfg.trial_seed(k);
        let params = init_params(cfg.width, cfg.dim, cfg.depth, ts)?;
        let (inputs, labels) = trial_data(cfg, ts);
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.n)
            .into_par_iter()
            .map(|i| {
                let x = &inputs[i * cfg.dim..(i + 1) * cfg.dim];
                let lg = network::loss_and_grad(&params, x, labels[i])?;
                let loss = lg.grad.layer_norms();
                let net = lg.grad.scaled(1.0 / lg_coef_or_one(labels[i], lg.output)).layer_norms();
                Ok((net, loss))
            })
            .collect::<Result<_>>()?;
        let mut seed_max = 0.0f64;
        for (net, loss) in &rows {
            ordered &= loss.iter().zip(net).all(|(l, f)| *l <= *f * (1.0 + 1e-12));
            let nm = max_of(net) / sqrt_m;
            net_max = net_max.max(nm);
            seed_max = seed_max.max(nm);
            loss_max = loss_max.max(max_of(loss) / sqrt_m);
            let last = net.last().expect("depth ≥ 2") / sqrt_m;
            last_min = last_min.min(last);
            last_max = last_max.max(last);
        }
        per_seed.push((ts, seed_max));
    }
    let pass = net_max <= 4.0 && loss_max <= 4.0 && ordered;
    let verdict = if pass { Verdict::Pass } else { Verdict::Fail };
    let failure = (!pass).then(|| {
        let worst = per_seed.iter().max_by(|a, b| a.1.total_cmp(&b.1)).expect("non-empty");
        failure(
            ID,
            cfg,
            worst.0,
            &[
                ("max_network_ratio", worst.1),
                ("max_loss_ratio", loss_max),
                ("loss_below_network", if ordered { 1.0 } else { 0.0 }),
            ],
        )
    });
    Ok(LemmaCheckResult {
        lemma_id: ID.into(),
        trials: cfg.seeds * cfg.n,
        statistic: stats(&[
            ("max_network_ratio", net_max),
            ("max_loss_ratio", loss_max),
            ("last_layer_min", last_min),
            ("last_layer_max", last_max),
        ]),
        series: Vec::new(),
        verdict,
        config: cfg.clone(),
        failure,
    })
}

// `ℓ′(y f)·y`, the factor between loss and network gradients.
fn lg_coef_or_one(y: f64, output: f64) -> f64 {
    let c = network::logistic_loss_derivative(y * output) * y;
    if c == 0.0 {
        1.0
    } else {
        c
    }
}

/// Flip counts of the patterns `D_1 … D_{L−1}` against initialization.
///
/// For each example and each `ω` the worst-case perturbation is built greedily:
/// in every hidden layer, the units closest to their threshold at `W⁽¹⁾` are
/// pushed just past it, as many as a Frobenius budget `ω` allows. The
/// fraction of flipped units (over `n·m·(L−1)`) is fitted against `ω` on a
/// log-log scale; TREND_PASS when the slope lies in `[0.4, 0.9]` and the
/// fraction decreases with `ω`. The slope under random perturbations of the
/// same size is reported alongside.
pub fn check_pattern_stability(cfg: &CheckConfig) -> Result<LemmaCheckResult> {
    const ID: &str = "patterns";
    cfg.validate()?;
    let s = cfg.inverse_sqrt_width();
    let grid = cfg.grid_or(|| vec![s, 0.3 * s, 0.1 * s, 0.03 * s, 0.01 * s]);
    let total_units = (cfg.n * cfg.width * (cfg.depth - 1)) as f64;
    let mut targeted: Vec<Vec<f64>> = vec![Vec::new(); grid.len()];
    let mut random: Vec<Vec<f64>> = vec![Vec::new(); grid.len()];
    let mut bound_ok = true;
    for k in 0..cfg.seeds {
        let ts = cfg.trial_seed(k);
        let init = init_params(cfg.width, cfg.dim, cfg.depth, ts)?;
        let (inputs, _) = trial_data(cfg, ts);
        let mut rng = seed::rng(seed::derive(ts, "perturb"));
        let base = hidden_batch(&init, &inputs, cfg.dim);
        for (g, &omega) in grid.iter().enumerate() {
            let flips: Vec<usize> = (0..cfg.n)
                .into_par_iter()
                .map(|i| targeted_flips(&init, &inputs[i * cfg.dim..(i + 1) * cfg.dim], omega))
                .collect::<Result<_>>()?;
            bound_ok &= flips.iter().all(|&f| f <= cfg.width * (cfg.depth - 1));
            targeted[g].push(flips.iter().sum::<usize>() as f64 / total_units);

            let d = layer_sphere_direction(&init, &vec![omega; cfg.depth], &mut rng);
            let moved = hidden_batch(&init.perturbed(&d, 1.0)?, &inputs, cfg.dim);
            let count: usize = base
                .iter()
                .zip(&moved)
                .map(|(a, b)| a.iter().zip(b.iter()).filter(|(u, v)| (**u > 0.0) != (**v > 0.0)).count())
                .sum();
            random[g].push(count as f64 / total_units);
        }
    }
    let series: Vec<SeriesPoint> = grid
        .iter()
        .zip(&targeted)
        .map(|(&omega, v)| SeriesPoint {
            scale: omega,
            median: median(v),
            max: max_of(v),
        })
        .collect();
    let slope = log_log_slope(&grid, &series.iter().map(|p| p.median).collect::<Vec<_>>());
    let random_slope = log_log_slope(&grid, &random.iter().map(|v| median(v)).collect::<Vec<_>>());
    let decreasing = series.windows(2).all(|w| w[1].median <= w[0].median);
    let in_band = (0.4..=0.9).contains(&slope);
    let verdict = if in_band && decreasing && bound_ok {
        Verdict::TrendPass
    } else {
        Verdict::Fail
    };
    let failure = (verdict == Verdict::Fail)
        .then(|| failure(ID, cfg, cfg.trial_seed(0), &[("slope", slope), ("random_slope", random_slope)]));
    Ok(LemmaCheckResult {
        lemma_id: ID.into(),
        trials: cfg.seeds * cfg.n * grid.len(),
        statistic: stats(&[("slope", slope), ("random_slope", random_slope)]),
        series,
        verdict,
        config: CheckConfig { grid, ..cfg.clone() },
        failure,
    })
}

/// Least-squares slope of `log y` on `log x` over points with `x, y > 0`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Flipped units on `x` after the greedy budget-`ω` perturbation of every hidden layer.
fn targeted_flips(init: &NetParams, x: &[f64], omega: f64) -> Result<usize> {
    let trace = network::forward(init, x)?;
    let depth = init.depth();
    let mut h = DVector::from_column_slice(x);
    let mut flips = 0;
    for l in 0..depth - 1 {
        let w = &init.layers()[l];
        let h0 = &trace.hidden[l];
        let z0 = w * h0;
        let h0_sq = h0.norm_squared();
        // Rows to push past zero, cheapest first, within budget ω².
        let mut order: Vec<usize> = (0..z0.len()).collect();
        order.sort_by(|&a, &b| z0[a].abs().total_cmp(&z0[b].abs()));
        let mut shift = DVector::zeros(z0.len());
        let mut spent = 0.0;
        if h0_sq > 0.0 {
            for &j in &order {
                let step = z0[j] * (1.0 + 1e-6);
                let cost = step * step / h0_sq;
                if spent + cost > omega * omega {
                    break;
                }
                spent += cost;
                shift[j] = -step;
            }
        }
        // (W + Δ) h = W h + shift·⟨h0, h⟩/‖h0‖² for Δ = shift h0ᵀ/‖h0‖².
        let proj = if h0_sq > 0.0 { h0.dot(&h) / h0_sq } else { 0.0 };
        let mut z = w * &h + shift * proj;
        let pattern = &trace.patterns[l];
        flips += z.iter().zip(pattern).filter(|(v, &on)| (**v > 0.0) != on).count();
        z.apply(|v| *v = v.max(0.0));
        h = z;
    }
    Ok(flips)
}

/// Gram convergence to the limiting kernel over the width grid
/// (`grid` holds widths; default `m, 4m, 16m`). PASS when the median
/// deviation is non-increasing in width.
pub fn check_gram(cfg: &CheckConfig) -> Result<LemmaCheckResult> {
    const ID: &str = "gram";
    cfg.validate_widths()?;
    let widths: Vec<usize> = if cfg.grid.is_empty() {
        vec![cfg.width, 4 * cfg.width, 16 * cfg.width]
    } else {
        cfg.grid.iter().map(|&w| w as usize).collect()
    };
    let mut rng = seed::rng(seed::derive(seed::sub_seed(cfg.base_seed, Stream::Verify), "gram-inputs"));
    let inputs: Vec<f64> = (0..cfg.n)
        .flat_map(|_| random_unit_vector(cfg.dim, &mut rng))
        .collect();
    let report = gram_convergence_report(&inputs, cfg.dim, cfg.depth, &widths, cfg.seeds, cfg.base_seed)?;
    let verdict = if report.pass { Verdict::Pass } else { Verdict::Fail };
    let series = report
        .per_width
        .iter()
        .map(|w| SeriesPoint {
            scale: w.width as f64,
            median: w.median,
            max: w.max,
        })
        .collect();
    let failure = (!report.pass).then(|| {
        let v: Vec<(&str, f64)> = report
            .per_width
            .iter()
            .map(|w| ("median", w.median))
            .take(1)
            .chain(report.per_width.last().map(|w| ("last_median", w.median)))
            .collect();
        failure(ID, cfg, cfg.base_seed, &v)
    });
    Ok(LemmaCheckResult {
        lemma_id: ID.into(),
        trials: report.rows.len(),
        statistic: stats(&[("singular_warning", if report.singular_warning { 1.0 } else { 0.0 })]),
        series,
        verdict,
        config: CheckConfig {
            grid: widths.iter().map(|&w| w as f64).collect(),
            ..cfg.clone()
        },
        failure,
    })
}

impl CheckConfig {
    fn validate_widths(&self) -> Result<()> {
        if self.depth < 2 || self.n == 0 || self.dim == 0 || self.seeds == 0 {
            return Err(Error::arg("verify needs L ≥ 2, n ≥ 1, d ≥ 1 and at least one seed"));
        }
        if self.grid.iter().any(|w| w.fract() != 0.0 || *w < 1.0) {
            return Err(Error::arg("gram widths must be positive integers"));
        }
        Ok(())
    }
}

pub const LEMMAS: [&str; 6] = ["linearization", "convexity", "norms", "gradients", "patterns", "gram"];

/// Dispatch a check by its identifier.
pub fn run_check(lemma: &str, cfg: &CheckConfig) -> Result<LemmaCheckResult> {
    match lemma {
        "linearization" => check_linearization(cfg),
        "convexity" => check_almost_convexity(cfg),
        "norms" => check_hidden_norms(cfg),
        "gradients" => check_gradient_norms(cfg),
        "patterns" => check_pattern_stability(cfg),
        "gram" => check_gram(cfg),
        other => Err(Error::arg(format!(
            "unknown lemma '{other}' (expected one of {})",
            LEMMAS.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ntrf::{ntrf_eval, NtrfModel};

    #[test]
    fn identical_points_have_no_violation() {
        let p = init_params(32, 4, 3, 1).unwrap();
        let x = random_unit_vector(4, &mut seed::rng(2));
        assert_eq!(convexity_violation(&p, &p, &x, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn linearized_loss_is_convex() {
        // ℓ ∘ (affine NTRF model) is convex in Δ.
        let anchor = init_params(32, 4, 3, 3).unwrap();
        let x = random_unit_vector(4, &mut seed::rng(4));
        let mut rng = seed::rng(5);
        for _ in 0..20 {
            let d1: Vec<DMatrix<f64>> = gaussian_like(&anchor, &mut rng).into_iter().map(|m| m * 0.05).collect();
            let d2: Vec<DMatrix<f64>> = gaussian_like(&anchor, &mut rng).into_iter().map(|m| m * 0.05).collect();
            let f = |d: &Vec<DMatrix<f64>>| ntrf_eval(&NtrfModel::new(&anchor, d.clone(), 1e9).unwrap(), &x).unwrap();
            let grad_f = network::gradient(&anchor, &x).unwrap();
            let (f1, f2) = (f(&d1), f(&d2));
            let y = -1.0;
            let dl = network::logistic_loss_derivative(y * f1) * y;
            let diff: Vec<DMatrix<f64>> = d2.iter().zip(&d1).map(|(a, b)| a - b).collect();
            let lin = logistic_loss(y * f1) + dl * grad_f.dot_direction(&diff);
            let v = (lin - logistic_loss(y * f2)).max(0.0);
            assert!(v <= 1e-12, "{v}");
        }
    }

    #[test]
    fn zero_scale_gives_zero_error_and_flips() {
        let mut cfg = CheckConfig::new(64, 3);
        cfg.seeds = 2;
        cfg.n = 3;
        cfg.grid = vec![1e-3, 0.0];
        let r = check_linearization(&cfg).unwrap();
        assert_eq!(r.series[1].median, 0.0);
        let p = init_params(64, 10, 3, 0).unwrap();
        let x = random_unit_vector(10, &mut seed::rng(1));
        assert_eq!(targeted_flips(&p, &x, 0.0).unwrap(), 0);
    }

    #[test]
    fn targeted_flips_bounded_and_monotone() {
        let p = init_params(128, 6, 4, 2).unwrap();
        let x = random_unit_vector(6, &mut seed::rng(3));
        let mut prev = 0;
        for omega in [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 100.0] {
            let f = targeted_flips(&p, &x, omega).unwrap();
            assert!(f <= 128 * 3);
            assert!(f >= prev, "{omega}: {f} < {prev}");
            prev = f;
        }
        assert!(prev > 0);
    }

    #[test]
    fn narrow_network_fails_norm_check() {
        let mut cfg = CheckConfig::new(8, 5);
        cfg.n = 100;
        cfg.seeds = 3;
        let r = check_hidden_norms(&cfg).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        let f = r.failure.unwrap();
        assert!(f.reproduce.starts_with("ntkw verify --lemma norms --m 8 --depth 5"));
    }

    #[test]
    fn gradient_check_passes_at_moderate_width() {
        let mut cfg = CheckConfig::new(256, 3);
        cfg.seeds = 2;
        let r = check_gradient_norms(&cfg).unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{:?}", r.statistic);
        assert!(r.statistic["last_layer_min"] > 0.5);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 0.1, 0.01];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(2.0 / 3.0)).collect();
        assert!((log_log_slope(&x, &y) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_lemma_and_bad_grid() {
        let cfg = CheckConfig::new(16, 2);
        assert!(matches!(run_check("nope", &cfg), Err(Error::Argument(_))));
        let mut cfg = CheckConfig::new(16, 2);
        cfg.grid = vec![0.1, 0.2];
        assert!(check_hidden_norms(&cfg).is_err());
    }

    #[test]
    fn results_serialize_with_verdict_names() {
        let mut cfg = CheckConfig::new(32, 2);
        cfg.seeds = 1;
        cfg.n = 2;
        let r = check_gradient_norms(&cfg).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"verdict\":\"PASS\""), "{s}");
        assert!(s.contains("\"lemma_id\":\"gradients\""));
    }
}
