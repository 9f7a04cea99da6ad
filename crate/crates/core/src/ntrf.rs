//! Random-feature linearization of the network around its initialization.
//!
//! An [`NtrfModel`] is `f(x) = f_{W⁽¹⁾}(x) + ⟨∇_W f_{W⁽¹⁾}(x), Δ⟩` with the
//! anchor `W⁽¹⁾` frozen and each layer of `Δ` inside the Frobenius ball of
//! radius `R·m^{−1/2}`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::network::{self, check_shapes, logistic_loss, logistic_loss_derivative, FactoredGradient, NetParams};
use crate::ntk::{psd_solve, KernelStack};
use crate::seed;

/// Default width limit for dense `Δ` fitting.
pub const DEFAULT_MAX_FIT_WIDTH: usize = 2048;

#[derive(Debug, Clone)]
pub struct NtrfModel<'a> {
    anchor: &'a NetParams,
    delta: Vec<DMatrix<f64>>,
    radius: f64,
}

impl<'a> NtrfModel<'a> {
    /// Model with `Δ = 0`.
    pub fn at_anchor(anchor: &'a NetParams, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::arg(format!("radius {radius} must be positive")));
        }
        Ok(NtrfModel {
            anchor,
            delta: anchor.zeros_like(),
            radius,
        })
    }

    /// Wrap an explicit perturbation; it is projected onto the ball.
    pub fn new(anchor: &'a NetParams, mut delta: Vec<DMatrix<f64>>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::arg(format!("radius {radius} must be positive")));
        }
        check_shapes(&delta, anchor.width(), anchor.input_dim())?;
        project_ball(&mut delta, radius, anchor.width())?;
        Ok(NtrfModel {
            anchor,
            delta,
            radius,
        })
    }

    pub fn anchor(&self) -> &NetParams {
        self.anchor
    }

    pub fn delta(&self) -> &[DMatrix<f64>] {
        &self.delta
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn delta_norms(&self) -> Vec<f64> {
        self.delta.iter().map(|d| d.norm()).collect()
    }

    /// The full network at `W⁽¹⁾ + Δ`.
    pub fn to_network(&self) -> Result<NetParams> {
        self.anchor.perturbed(&self.delta, 1.0)
    }
}

/// `f_{W⁽¹⁾}(x) + ⟨∇f_{W⁽¹⁾}(x), Δ⟩`.
pub fn ntrf_eval(model: &NtrfModel<'_>, x: &[f64]) -> Result<f64> {
    let trace = network::forward(model.anchor, x)?;
    let f0 = trace.output;
    Ok(f0 + trace.into_gradient().dot_direction(&model.delta))
}

/// Rescale every layer with `‖Δ_l‖_F > R·m^{−1/2}` onto the sphere of that radius.
///
/// Returns the factor applied to each layer (1 where the layer was inside).
pub fn project_ball(delta: &mut [DMatrix<f64>], radius: f64, width: usize) -> Result<Vec<f64>> {
    if !(radius > 0.0) {
        return Err(Error::arg(format!("radius {radius} must be positive")));
    }
    let limit = radius / (width as f64).sqrt();
    Ok(delta
        .iter_mut()
        .map(|d| {
            let norm = d.norm();
            if norm > limit {
                let s = limit / norm;
                d.scale_mut(s);
                s
            } else {
                1.0
            }
        })
        .collect())
}

/// Network outputs and gradients at the anchor, one entry per example.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub outputs: Vec<f64>,
    pub grads: Vec<FactoredGradient>,
}

impl FeatureCache {
    pub fn build(anchor: &NetParams, data: &LabeledDataset) -> Result<Self> {
        let traces: Vec<(f64, FactoredGradient)> = (0..data.len())
            .into_par_iter()
            .map(|i| {
                let t = network::forward(anchor, data.x(i))?;
                Ok((t.output, t.into_gradient()))
            })
            .collect::<Result<_>>()?;
        let (outputs, grads) = traces.into_iter().unzip();
        Ok(FeatureCache { outputs, grads })
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    /// `f(x_i) + ⟨∇f(x_i), Δ⟩` for the listed examples, batched per layer.
    fn eval_batch(&self, delta: &[DMatrix<f64>], batch: &[usize]) -> Vec<f64> {
        let depth = delta.len();
        let sqrt_m = self.grads[0].sqrt_m();
        let mut acc = vec![0.0; batch.len()];
        for k in 0..depth {
            let layer = k + 1;
            let h = columns(batch.iter().map(|&i| self.grads[i].layer_input(layer)));
            if k + 1 == depth {
                let row = delta[k].row(0) * &h;
                acc.iter_mut().zip(row.iter()).for_each(|(a, v)| *a += v);
            } else {
                let dh = &delta[k] * &h;
                for (c, &i) in batch.iter().enumerate() {
                    acc[c] += self.grads[i].layer_back(layer).dot(&dh.column(c));
                }
            }
        }
        batch
            .iter()
            .zip(acc)
            .map(|(&i, a)| self.outputs[i] + sqrt_m * a)
            .collect()
    }

    /// `Δ += Σ_c weights[c] · ∇f(x_{batch[c]})`, one rank-`|batch|` update per layer.
    fn add_gradients(&self, delta: &mut [DMatrix<f64>], batch: &[usize], weights: &[f64]) {
        let depth = delta.len();
        let sqrt_m = self.grads[0].sqrt_m();
        for k in 0..depth {
            let layer = k + 1;
            let h = columns(batch.iter().map(|&i| self.grads[i].layer_input(layer)));
            if k + 1 == depth {
                let w = DVector::from_iterator(weights.len(), weights.iter().map(|w| w * sqrt_m));
                let update = (&h * w).transpose();
                delta[k] += update;
            } else {
                let mut b = columns(batch.iter().map(|&i| self.grads[i].layer_back(layer)));
                for (c, w) in weights.iter().enumerate() {
                    b.column_mut(c).scale_mut(w * sqrt_m);
                }
                delta[k].gemm(1.0, &b, &h.transpose(), 1.0);
            }
        }
    }

    /// `(1/n) Σ ℓ(y_i (f(x_i) + ⟨∇f(x_i), Δ⟩))`.
    pub fn objective(&self, data: &LabeledDataset, delta: &[DMatrix<f64>]) -> Result<f64> {
        let all: Vec<usize> = (0..self.len()).collect();
        let mut total = 0.0;
        for chunk in all.chunks(64) {
            for (&i, f) in chunk.iter().zip(self.eval_batch(delta, chunk)) {
                let loss = logistic_loss(data.y(i) * f);
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("loss is {loss} on example {i}")));
                }
                total += loss;
            }
        }
        Ok(total / self.len() as f64)
    }

    /// `m⁻¹⟨∇f(x_i), ∇f(x_j)⟩` for all pairs.
    pub fn gram(&self) -> DMatrix<f64> {
        let n = self.len();
        let m = self.grads[0].sqrt_m().powi(2);
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| (i..n).map(|j| self.grads[i].dot(&self.grads[j]) / m).collect())
            .collect();
        let mut g = DMatrix::zeros(n, n);
        for (i, row) in rows.into_iter().enumerate() {
            for (k, v) in row.into_iter().enumerate() {
                g[(i, i + k)] = v;
                g[(i + k, i)] = v;
            }
        }
        g
    }
}

fn columns<'v>(cols: impl Iterator<Item = &'v DVector<f64>>) -> DMatrix<f64> {
    let cols: Vec<&DVector<f64>> = cols.collect();
    let rows = cols.first().map_or(0, |c| c.len());
    DMatrix::from_fn(rows, cols.len(), |r, c| cols[c][r])
}

#[derive(Debug, Clone, Serialize)]
pub struct FitOptions {
    pub radius: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Initial step size; `None` means [`FitOptions::default_lr`].
    pub lr: Option<f64>,
    pub seed: u64,
    pub max_width: usize,
}

impl FitOptions {
    pub fn new(radius: f64, seed: u64) -> Self {
        FitOptions {
            radius,
            epochs: 50,
            batch: 32,
            lr: None,
            seed,
            max_width: DEFAULT_MAX_FIT_WIDTH,
        }
    }

    /// `16·R/(m√n)`; halved whenever an epoch's average loss rises.
    pub fn default_lr(radius: f64, width: usize, n: usize) -> f64 {
        16.0 * radius / (width as f64 * (n as f64).sqrt())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult<'a> {
    pub model: NtrfModel<'a>,
    /// Average minibatch loss of each epoch.
    pub history: Vec<f64>,
    /// `(1/n) Σ ℓ` of the returned model.
    pub objective: f64,
    pub initial_lr: f64,
    pub final_lr: f64,
}

/// Minimize `(1/n) Σ ℓ(y_i f(x_i))` over the NTRF class by projected minibatch SGD.
///
/// Features at the anchor are computed once. After every step each layer of
/// `Δ` is projected back onto its ball. When an epoch's average loss exceeds
/// the previous one the step size is halved.
pub fn fit_projected_sgd<'a>(
    anchor: &'a NetParams,
    data: &LabeledDataset,
    opts: &FitOptions,
) -> Result<FitResult<'a>> {
    let cache = FeatureCache::build(anchor, data)?;
    fit_projected_sgd_cached(anchor, data, &cache, opts)
}

/// [`fit_projected_sgd`] with a caller-provided feature cache for `anchor`.
pub fn fit_projected_sgd_cached<'a>(
    anchor: &'a NetParams,
    data: &LabeledDataset,
    cache: &FeatureCache,
    opts: &FitOptions,
) -> Result<FitResult<'a>> {
    if opts.epochs == 0 || opts.batch == 0 {
        return Err(Error::arg("epochs and batch must be at least 1"));
    }
    if anchor.width() > opts.max_width {
        return Err(Error::arg(format!(
            "width {} exceeds the dense fitting limit {}",
            anchor.width(),
            opts.max_width
        )));
    }
    if cache.len() != data.len() {
        return Err(Error::Consistency(format!(
            "feature cache has {} entries for {} examples",
            cache.len(),
            data.len()
        )));
    }
    let n = data.len();
    let initial_lr = opts
        .lr
        .unwrap_or_else(|| FitOptions::default_lr(opts.radius, anchor.width(), n));
    if !(initial_lr > 0.0) {
        return Err(Error::arg(format!("step size {initial_lr} must be positive")));
    }
    let mut model = NtrfModel::at_anchor(anchor, opts.radius)?;
    let mut lr = initial_lr;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(seed::derive(opts.seed, "ntrf-sgd"));
    let mut history = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opts.batch) {
            let outputs = cache.eval_batch(&model.delta, batch);
            let mut weights = Vec::with_capacity(batch.len());
            for (&i, f) in batch.iter().zip(outputs) {
                let y = data.y(i);
                let loss = logistic_loss(y * f);
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss is {loss} on example {i} in epoch {epoch}"
                    )));
                }
                epoch_loss += loss;
                weights.push(-lr * logistic_loss_derivative(y * f) * y / batch.len() as f64);
            }
            cache.add_gradients(&mut model.delta, batch, &weights);
            project_ball(&mut model.delta, opts.radius, anchor.width())?;
        }
        let avg = epoch_loss / n as f64;
        if let Some(&prev) = history.last() {
            if avg > prev {
                if avg > 1.05 * prev {
                    warn!("epoch {epoch}: average loss rose from {prev:.6} to {avg:.6}");
                }
                lr *= 0.5;
            }
        }
        history.push(avg);
    }
    let objective = cache.objective(data, &model.delta)?;
    Ok(FitResult {
        model,
        history,
        objective,
        initial_lr,
        final_lr: lr,
    })
}

/// The least-norm NTRF perturbation that fits scaled labels exactly.
#[derive(Debug, Clone)]
pub struct Interpolant<'a> {
    pub model: NtrfModel<'a>,
    /// `B̄ = B + B′` with `B = log(1/(e^{n^{−1/2}} − 1))`, `B′ = max_i |f(x_i)|`.
    pub target_scale: f64,
    /// `√(ŷᵀ G⁻¹ ŷ)` with the empirical Gram `G`; equals `√m·‖Δ‖`.
    pub gram_norm: f64,
    /// `√(ŷᵀ Θ⁻¹ ŷ)` when a kernel was supplied.
    pub kernel_norm: Option<f64>,
    /// `‖Δ‖` over all layers.
    pub delta_norm: f64,
    pub jitter: f64,
}

/// Margin offset with `ℓ(z) ≤ n^{−1/2}` for all `z ≥ B`.
pub fn loss_margin(n: usize) -> f64 {
    let t = 1.0 / (n as f64).sqrt();
    (1.0 / t.exp_m1()).ln()
}

/// Minimum-distance solution of `⟨∇f(x_i), Δ⟩ = ŷ_i = B̄·y_i`.
///
/// With `F = m^{−1/2}[∇f(x_1) … ∇f(x_n)]` and `G = FᵀF`, the solution is
/// `Δ = m^{−1/2}·F G⁻¹ ŷ = m⁻¹ Σ_i c_i ∇f(x_i)` with `c = G⁻¹ŷ`, so
/// `‖Δ‖² = ŷᵀG⁻¹ŷ / m`. The model radius is set to `√(ŷᵀG⁻¹ŷ)`, the
/// smallest `R` whose ball holds the whole perturbation.
pub fn min_distance_interpolant<'a>(
    anchor: &'a NetParams,
    data: &LabeledDataset,
    theta: Option<&KernelStack>,
) -> Result<Interpolant<'a>> {
    let cache = FeatureCache::build(anchor, data)?;
    min_distance_interpolant_cached(anchor, data, &cache, theta)
}

pub fn min_distance_interpolant_cached<'a>(
    anchor: &'a NetParams,
    data: &LabeledDataset,
    cache: &FeatureCache,
    theta: Option<&KernelStack>,
) -> Result<Interpolant<'a>> {
    let n = data.len();
    if cache.len() != n {
        return Err(Error::Consistency("feature cache does not match data".into()));
    }
    let b_prime = cache.outputs.iter().fold(0.0f64, |a, f| a.max(f.abs()));
    let target_scale = loss_margin(n) + b_prime;
    let targets = DVector::from_iterator(n, data.labels().iter().map(|y| target_scale * y));

    let gram = cache.gram();
    let solved = psd_solve(&gram, &targets)?;
    let coef = &solved.solution;
    let m = anchor.width() as f64;
    let mut delta = anchor.zeros_like();
    let all: Vec<usize> = (0..n).collect();
    let weights: Vec<f64> = coef.iter().map(|c| c / m).collect();
    for (chunk, w) in all.chunks(64).zip(weights.chunks(64)) {
        cache.add_gradients(&mut delta, chunk, w);
    }
    let gram_norm = targets.dot(coef).max(0.0).sqrt();
    let delta_norm = delta.iter().map(|d| d.norm_squared()).sum::<f64>().sqrt();
    let kernel_norm = match theta {
        Some(stack) => {
            if stack.n != n {
                return Err(Error::Shape(format!(
                    "kernel on {} points for {n} examples",
                    stack.n
                )));
            }
            let s = psd_solve(&stack.theta, &targets)?;
            Some(targets.dot(&s.solution).max(0.0).sqrt())
        }
        None => None,
    };
    let radius = gram_norm.max(delta_norm * m.sqrt()) * (1.0 + 1e-12);
    Ok(Interpolant {
        model: NtrfModel {
            anchor,
            delta,
            radius,
        },
        target_scale,
        gram_norm,
        kernel_norm,
        delta_norm,
        jitter: solved.jitter,
    })
}
