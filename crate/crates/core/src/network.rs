//! Fully connected ReLU network `f_W(x) = √m · W_L σ(W_{L−1} … σ(W_1 x))`.
//!
//! Layer `l` is stored at index `l − 1`. Hidden layers `W_1 … W_{L−1}` are
//! `m × d` then `m × m`; the output layer `W_L` is `1 × m`. There are no
//! biases. Gradients are kept in rank-one factored form: for `l < L`,
//! `∇_{W_l} f = √m · b_l h_{l−1}ᵀ`, and `∇_{W_L} f = √m · h_{L−1}ᵀ`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed;

/// Largest width for which full gradient matrices may be materialized.
pub const MATERIALIZE_MAX_WIDTH: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    layers: Vec<DMatrix<f64>>,
    width: usize,
    input_dim: usize,
    seed: u64,
}

impl NetParams {
    /// Wrap explicit layer matrices, checking their shapes.
    pub fn from_layers(layers: Vec<DMatrix<f64>>, seed: u64) -> Result<Self> {
        let depth = layers.len();
        if depth < 2 {
            return Err(Error::arg(format!("depth {depth} < 2")));
        }
        let width = layers[0].nrows();
        let input_dim = layers[0].ncols();
        check_shapes(&layers, width, input_dim)?;
        Ok(NetParams {
            layers,
            width,
            input_dim,
            seed,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[DMatrix<f64>] {
        &self.layers
    }

    /// Mutable access to the layers. Shapes must not change.
    pub fn layers_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.layers
    }

    pub fn sqrt_width(&self) -> f64 {
        (self.width as f64).sqrt()
    }

    /// All-zero direction with this network's layer shapes.
    pub fn zeros_like(&self) -> Vec<DMatrix<f64>> {
        self.layers
            .iter()
            .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
            .collect()
    }

    /// `self + alpha · direction`, layer by layer.
    pub fn perturbed(&self, direction: &[DMatrix<f64>], alpha: f64) -> Result<Self> {
        check_shapes(direction, self.width, self.input_dim)?;
        let mut out = self.clone();
        for (w, d) in out.layers.iter_mut().zip(direction) {
            w.zip_apply(d, |a, b| *a += alpha * b);
        }
        Ok(out)
    }

    /// Per-layer Frobenius distances `‖W_l − W′_l‖_F`.
    pub fn layer_distances(&self, other: &NetParams) -> Vec<f64> {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

/// Check that `layers` has the `[m×d, m×m, …, 1×m]` layout.
pub fn check_shapes(layers: &[DMatrix<f64>], width: usize, input_dim: usize) -> Result<()> {
    let depth = layers.len();
    if depth < 2 {
        return Err(Error::Shape(format!("{depth} layers, need at least 2")));
    }
    for (k, w) in layers.iter().enumerate() {
        let want = if k == 0 {
            (width, input_dim)
        } else if k + 1 == depth {
            (1, width)
        } else {
            (width, width)
        };
        if w.shape() != want {
            return Err(Error::Shape(format!(
                "layer {} is {}×{}, expected {}×{}",
                k + 1,
                w.nrows(),
                w.ncols(),
                want.0,
                want.1
            )));
        }
    }
    Ok(())
}

/// Gaussian initialization: hidden entries `N(0, 2/m)`, output entries `N(0, 1/m)`.
///
/// Layer `l` is drawn from its own generator stream, so its entries do not
/// depend on how the other layers were generated.
pub fn init_params(width: usize, input_dim: usize, depth: usize, seed: u64) -> Result<NetParams> {
    if width < 1 || input_dim < 1 {
        return Err(Error::arg(format!(
            "width {width} and input dimension {input_dim} must be positive"
        )));
    }
    if depth < 2 {
        return Err(Error::arg(format!("depth {depth} < 2")));
    }
    let base = seed::derive(seed, "init");
    let m = width as f64;
    let layers = (0..depth)
        .map(|k| {
            let (rows, cols, var) = if k == 0 {
                (width, input_dim, 2.0 / m)
            } else if k + 1 == depth {
                (1, width, 1.0 / m)
            } else {
                (width, width, 2.0 / m)
            };
            let sd = var.sqrt();
            let mut rng = seed::rng_stream(base, k as u64);
            DMatrix::from_fn(rows, cols, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
        })
        .collect();
    Ok(NetParams {
        layers,
        width,
        input_dim,
        seed,
    })
}

/// Everything computed by one forward/backward pass on a single input.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    /// `h_0 = x, h_1, …, h_{L−1}`.
    pub hidden: Vec<DVector<f64>>,
    /// `D_1 … D_{L−1}`: unit `j` of layer `l` is active iff `(W_l h_{l−1})_j > 0`.
    pub patterns: Vec<Vec<bool>>,
    /// `b_1 … b_{L−1}`.
    pub back: Vec<DVector<f64>>,
    pub output: f64,
    sqrt_m: f64,
}

impl ActivationTrace {
    pub fn into_gradient(self) -> FactoredGradient {
        FactoredGradient {
            coef: 1.0,
            sqrt_m: self.sqrt_m,
            inputs: self.hidden,
            back: self.back,
        }
    }

    pub fn gradient(&self) -> FactoredGradient {
        self.clone().into_gradient()
    }
}

/// Forward pass plus backpropagation of `f` to every layer.
pub fn forward(params: &NetParams, x: &[f64]) -> Result<ActivationTrace> {
    if x.len() != params.input_dim {
        return Err(Error::Shape(format!(
            "input has dimension {}, network expects {}",
            x.len(),
            params.input_dim
        )));
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        warn!("forward on input with norm {norm}; the network is analysed on the unit sphere");
    }
    let depth = params.depth();
    let mut hidden = Vec::with_capacity(depth);
    let mut patterns = Vec::with_capacity(depth - 1);
    hidden.push(DVector::from_column_slice(x));
    for w in &params.layers[..depth - 1] {
        let mut z = w * hidden.last().expect("h_0 present");
        let mask: Vec<bool> = z.iter().map(|&v| v > 0.0).collect();
        z.iter_mut().zip(&mask).for_each(|(v, &on)| {
            if !on {
                *v = 0.0;
            }
        });
        patterns.push(mask);
        hidden.push(z);
    }
    let sqrt_m = params.sqrt_width();
    let last = &params.layers[depth - 1];
    let h_last = &hidden[depth - 1];
    let output = sqrt_m * last.row(0).iter().zip(h_last.iter()).map(|(a, b)| a * b).sum::<f64>();
    if !output.is_finite() {
        return Err(Error::Numeric(format!("network output is {output}")));
    }

    // b_{L−1} = D_{L−1} W_Lᵀ, b_{l−1} = D_{l−1} W_lᵀ b_l.
    let mut back = vec![DVector::zeros(0); depth - 1];
    let mut b: DVector<f64> = last.row(0).transpose();
    mask_in_place(&mut b, &patterns[depth - 2]);
    for l in (1..depth - 1).rev() {
        let mut next = params.layers[l].tr_mul(&b);
        mask_in_place(&mut next, &patterns[l - 1]);
        back[l] = std::mem::replace(&mut b, next);
    }
    back[0] = b;

    Ok(ActivationTrace {
        hidden,
        patterns,
        back,
        output,
        sqrt_m,
    })
}

fn mask_in_place(v: &mut DVector<f64>, mask: &[bool]) {
    v.iter_mut().zip(mask).for_each(|(x, &on)| {
        if !on {
            *x = 0.0;
        }
    });
}

pub fn gradient(params: &NetParams, x: &[f64]) -> Result<FactoredGradient> {
    Ok(forward(params, x)?.into_gradient())
}

/// A (scaled) network gradient in rank-one form.
///
/// Represents `coef · ∇_W f(x)` where `∇_{W_l} f = √m b_l h_{l−1}ᵀ` for
/// hidden layers and `∇_{W_L} f = √m h_{L−1}ᵀ`.
#[derive(Debug, Clone)]
pub struct FactoredGradient {
    pub coef: f64,
    sqrt_m: f64,
    inputs: Vec<DVector<f64>>,
    back: Vec<DVector<f64>>,
}

impl FactoredGradient {
    pub fn depth(&self) -> usize {
        self.inputs.len()
    }

    pub fn sqrt_m(&self) -> f64 {
        self.sqrt_m
    }

    /// `h_{l−1}` for 1-based layer `l`.
    pub fn layer_input(&self, l: usize) -> &DVector<f64> {
        &self.inputs[l - 1]
    }

    /// `b_l` for 1-based hidden layer `l < L`.
    pub fn layer_back(&self, l: usize) -> &DVector<f64> {
        &self.back[l - 1]
    }

    pub fn scaled(mut self, coef: f64) -> Self {
        self.coef *= coef;
        self
    }

    /// `‖∇_{W_l}‖_F` for each layer.
    pub fn layer_norms(&self) -> Vec<f64> {
        let s = (self.coef * self.sqrt_m).abs();
        let depth = self.depth();
        (0..depth)
            .map(|k| {
                if k + 1 == depth {
                    s * self.inputs[k].norm()
                } else {
                    s * self.back[k].norm() * self.inputs[k].norm()
                }
            })
            .collect()
    }

    /// Per-layer `⟨∇_{W_l}, ∇′_{W_l}⟩`.
    ///
    /// Each hidden layer is `m·⟨b_l, b′_l⟩·⟨h_{l−1}, h′_{l−1}⟩`; no matrix is formed.
    pub fn layer_dots(&self, other: &FactoredGradient) -> Vec<f64> {
        let s = self.coef * other.coef * self.sqrt_m * other.sqrt_m;
        let depth = self.depth();
        (0..depth)
            .map(|k| {
                let hh = self.inputs[k].dot(&other.inputs[k]);
                if k + 1 == depth {
                    s * hh
                } else {
                    s * self.back[k].dot(&other.back[k]) * hh
                }
            })
            .collect()
    }

    pub fn dot(&self, other: &FactoredGradient) -> f64 {
        self.layer_dots(other).iter().sum()
    }

    /// `⟨∇, Δ⟩` for a parameter-shaped direction `Δ`.
    pub fn dot_direction(&self, direction: &[DMatrix<f64>]) -> f64 {
        let depth = self.depth();
        let mut acc = 0.0;
        for k in 0..depth {
            if k + 1 == depth {
                acc += direction[k]
                    .row(0)
                    .iter()
                    .zip(self.inputs[k].iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            } else {
                // bᵀ Δ h
                let dh = &direction[k] * &self.inputs[k];
                acc += self.back[k].dot(&dh);
            }
        }
        self.coef * self.sqrt_m * acc
    }

    /// `target += alpha · gradient`, as rank-one updates.
    pub fn add_to(&self, target: &mut [DMatrix<f64>], alpha: f64) {
        let s = alpha * self.coef * self.sqrt_m;
        let depth = self.depth();
        for k in 0..depth {
            if k + 1 == depth {
                let mut row = target[k].row_mut(0);
                row.iter_mut()
                    .zip(self.inputs[k].iter())
                    .for_each(|(t, h)| *t += s * h);
            } else {
                target[k].ger(s, &self.back[k], &self.inputs[k], 1.0);
            }
        }
    }

    /// Full gradient matrices. Only allowed for `m ≤ MATERIALIZE_MAX_WIDTH`.
    pub fn materialize(&self) -> Result<Vec<DMatrix<f64>>> {
        let m = self.inputs.last().map_or(0, |h| h.len());
        if m > MATERIALIZE_MAX_WIDTH {
            return Err(Error::arg(format!(
                "refusing to materialize gradients at width {m} > {MATERIALIZE_MAX_WIDTH}"
            )));
        }
        let depth = self.depth();
        let mut out: Vec<DMatrix<f64>> = (0..depth)
            .map(|k| {
                if k + 1 == depth {
                    DMatrix::zeros(1, m)
                } else {
                    DMatrix::zeros(self.back[k].len(), self.inputs[k].len())
                }
            })
            .collect();
        self.add_to(&mut out, 1.0);
        Ok(out)
    }
}

/// Cross-entropy `ℓ(z) = log(1 + e^{−z})`, stable for all finite `z`.
pub fn logistic_loss(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// `ℓ′(z) = −1 / (1 + e^{z})`.
pub fn logistic_loss_derivative(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        -e / (1.0 + e)
    } else {
        -1.0 / (1.0 + z.exp())
    }
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub output: f64,
    /// `∇_W ℓ(y·f(x)) = ℓ′(y·f)·y·∇_W f`.
    pub grad: FactoredGradient,
}

pub fn loss_and_grad(params: &NetParams, x: &[f64], y: f64) -> Result<LossGrad> {
    let trace = forward(params, x)?;
    let output = trace.output;
    let z = y * output;
    let loss = logistic_loss(z);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss} at margin {z}")));
    }
    let coef = logistic_loss_derivative(z) * y;
    Ok(LossGrad {
        loss,
        output,
        grad: trace.into_gradient().scaled(coef),
    })
}

/// Outputs on many row-major inputs at once, one matrix product per layer.
pub fn predict_batch(params: &NetParams, inputs: &[f64], dim: usize) -> Result<Vec<f64>> {
    if dim != params.input_dim || inputs.len() % dim != 0 {
        return Err(Error::Shape(format!(
            "inputs of dimension {dim} for a network on dimension {}",
            params.input_dim
        )));
    }
    let n = inputs.len() / dim;
    let mut h = DMatrix::from_column_slice(dim, n, inputs);
    let depth = params.depth();
    for w in &params.layers[..depth - 1] {
        h = w * h;
        h.apply(|v| *v = v.max(0.0));
    }
    let out = (&params.layers[depth - 1] * h) * params.sqrt_width();
    if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("network output is {bad}")));
    }
    Ok(out.iter().copied().collect())
}

/// Output only, without keeping the trace.
pub fn predict(params: &NetParams, x: &[f64]) -> Result<f64> {
    Ok(forward(params, x)?.output)
}
