//! Finite-width Gram matrix `G_ij = m⁻¹⟨∇_W f(x_i), ∇_W f(x_j)⟩` at initialization.

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use super::{kernel_stack, KernelStack};
use crate::error::{Error, Result};
use crate::network::{self, FactoredGradient, NetParams};
use crate::seed;

#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub values: DMatrix<f64>,
    pub width: usize,
    pub seed: u64,
}

fn block_features(
    params: &NetParams,
    inputs: &[f64],
    dim: usize,
    range: std::ops::Range<usize>,
) -> Result<Vec<FactoredGradient>> {
    range
        .into_par_iter()
        .map(|i| network::gradient(params, &inputs[i * dim..(i + 1) * dim]))
        .collect()
}

/// Gram matrix of the network gradients at `params`.
///
/// Examples are processed in blocks of `block`; at most two blocks of
/// factored gradients are alive at a time, so memory stays at
/// `O(block · L · m)` on top of the parameters. Entries use the per-layer
/// identity `⟨√m b hᵀ, √m b′ h′ᵀ⟩ = m⟨b, b′⟩⟨h, h′⟩`.
pub fn empirical_gram(
    params: &NetParams,
    inputs: &[f64],
    dim: usize,
    block: usize,
) -> Result<GramMatrix> {
    if block == 0 {
        return Err(Error::arg("block size must be at least 1"));
    }
    if dim != params.input_dim() || inputs.len() % dim != 0 {
        return Err(Error::Shape(format!(
            "inputs of dimension {dim} for a network on dimension {}",
            params.input_dim()
        )));
    }
    let n = inputs.len() / dim;
    let m = params.width() as f64;
    let mut values = DMatrix::zeros(n, n);
    let starts: Vec<usize> = (0..n).step_by(block).collect();
    for &bi in &starts {
        let ei = (bi + block).min(n);
        let fi = block_features(params, inputs, dim, bi..ei)?;
        for &bj in starts.iter().filter(|&&s| s >= bi) {
            let ej = (bj + block).min(n);
            let owned;
            let fj = if bj == bi {
                &fi
            } else {
                owned = block_features(params, inputs, dim, bj..ej)?;
                &owned
            };
            let tile: Vec<(usize, usize, f64)> = (bi..ei)
                .into_par_iter()
                .flat_map_iter(|i| {
                    let lo = if bj == bi { i } else { bj };
                    let fi = &fi;
                    (lo..ej).map(move |j| (i, j, fi[i - bi].dot(&fj[j - bj]) / m))
                })
                .collect();
            for (i, j, v) in tile {
                values[(i, j)] = v;
                values[(j, i)] = v;
            }
        }
    }
    Ok(GramMatrix {
        values,
        width: params.width(),
        seed: params.seed(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub width: usize,
    pub seed: u64,
    pub max_abs_deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WidthSummary {
    pub width: usize,
    pub median: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub depth: usize,
    pub n: usize,
    pub rows: Vec<ConvergenceRow>,
    pub per_width: Vec<WidthSummary>,
    /// Medians non-increasing from each width to the next.
    pub pass: bool,
    /// Some input pair is (near) parallel, so `Θ` is (near) singular.
    pub singular_warning: bool,
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let k = v.len();
    if k == 0 {
        f64::NAN
    } else if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// `max_ij |G − Θ⁽ᴸ⁾|` over `seeds` fresh initializations at each width.
///
/// Initialization seed `s` of every width is `derive_index(base_seed, s)`.
pub fn gram_convergence_report(
    inputs: &[f64],
    dim: usize,
    depth: usize,
    widths: &[usize],
    seeds: usize,
    base_seed: u64,
) -> Result<ConvergenceReport> {
    if widths.is_empty() || seeds == 0 {
        return Err(Error::arg("need at least one width and one seed"));
    }
    if widths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::arg("widths must be strictly increasing"));
    }
    if let Some(&w) = widths.iter().find(|&&w| w < 64) {
        return Err(Error::arg(format!("width {w} < 64")));
    }
    let stack: KernelStack = kernel_stack(inputs, dim, depth)?;
    let n = stack.n;
    let singular_warning = (0..n).any(|i| {
        (i + 1..n).any(|j| stack.sigma[0][(i, j)].abs() > crate::dataset::PARALLEL_THRESHOLD)
    });
    if singular_warning {
        warn!("parallel inputs: the limiting kernel is rank-deficient");
    }

    let mut rows = Vec::new();
    let mut per_width = Vec::new();
    for &width in widths {
        let mut devs = Vec::with_capacity(seeds);
        for s in 0..seeds {
            let init_seed = seed::derive_index(base_seed, s as u64);
            let params = network::init_params(width, dim, depth, init_seed)?;
            let gram = empirical_gram(&params, inputs, dim, 64)?;
            drop(params);
            let dev = (&gram.values - &stack.theta).abs().max();
            rows.push(ConvergenceRow {
                width,
                seed: init_seed,
                max_abs_deviation: dev,
            });
            devs.push(dev);
        }
        per_width.push(WidthSummary {
            width,
            median: median(&devs),
            max: devs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    let pass = per_width.windows(2).all(|w| w[1].median <= w[0].median);
    Ok(ConvergenceReport {
        depth,
        n,
        rows,
        per_width,
        pass,
        singular_warning,
    })
}
