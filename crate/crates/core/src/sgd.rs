//! One-pass online SGD from Gaussian initialization with a uniformly drawn
//! output iterate, plus online-to-batch evaluation.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::network::{self, NetParams};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    /// `ℓ(y_i f_{W⁽ⁱ⁾}(x_i))`, before the update.
    pub loss: f64,
    /// `1{y_i f ≤ 0}`; ties count as errors.
    pub zero_one: f64,
    /// `‖W_l⁽ⁱ⁾ − W_l⁽¹⁾‖_F` for each layer.
    pub distances: Vec<f64>,
    /// `‖∇_{W_l} L_i(W⁽ⁱ⁾)‖_F` for each layer.
    pub grad_norms: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SgdRunRecord {
    pub per_step: Vec<StepRecord>,
    pub eta: f64,
    pub n: usize,
    /// 1-based index of the output iterate `W⁽ⁱ⁾`.
    pub selected_index: usize,
    pub seed: u64,
}

impl SgdRunRecord {
    pub fn mean_loss(&self) -> f64 {
        self.per_step.iter().map(|s| s.loss).sum::<f64>() / self.n as f64
    }

    pub fn mean_zero_one(&self) -> f64 {
        self.per_step.iter().map(|s| s.zero_one).sum::<f64>() / self.n as f64
    }

    pub fn losses(&self) -> Vec<f64> {
        self.per_step.iter().map(|s| s.loss).collect()
    }

    /// CSV with columns `step, loss, zero_one, dist_l1 … dist_lL`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let depth = self.per_step.first().map_or(0, |s| s.distances.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string(), "loss".into(), "zero_one".into()];
        header.extend((1..=depth).map(|l| format!("dist_l{l}")));
        w.write_record(&header).map_err(csv_error)?;
        for (i, s) in self.per_step.iter().enumerate() {
            let mut row = vec![(i + 1).to_string(), s.loss.to_string(), s.zero_one.to_string()];
            row.extend(s.distances.iter().map(|d| d.to_string()));
            w.write_record(&row).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    /// The snapshot holds `W⁽ˢᵗᵉᵖ⁾` (1-based; step 1 is the initialization).
    pub step: usize,
    pub params: NetParams,
}

#[derive(Debug, Clone)]
pub struct SgdRun {
    pub record: SgdRunRecord,
    /// Sorted by step, no duplicates; always contains the selected iterate.
    pub snapshots: Vec<Snapshot>,
    /// `W⁽ⁿ⁺¹⁾`.
    pub final_params: NetParams,
}

impl SgdRun {
    pub fn selected(&self) -> &NetParams {
        &self
            .snapshots
            .iter()
            .find(|s| s.step == self.record.selected_index)
            .expect("selected iterate is always snapshotted")
            .params
    }
}

/// Default snapshot spacing `⌈n/20⌉`.
pub fn default_snapshot_every(n: usize) -> usize {
    n.div_ceil(20).max(1)
}

/// `η = κ·R/(m√n)`.
pub fn theory_step_size(kappa: f64, radius: f64, width: usize, n: usize) -> f64 {
    kappa * radius / (width as f64 * (n as f64).sqrt())
}

/// Run one pass of SGD over `stream` in order.
///
/// Step `i` evaluates and records the loss at `W⁽ⁱ⁾`, then applies
/// `W⁽ⁱ⁺¹⁾ = W⁽ⁱ⁾ − η∇L_i(W⁽ⁱ⁾)`. Iterate `W⁽ⁱ⁾` is snapshotted when
/// `snapshot_every > 0` and `(i − 1) % snapshot_every == 0`, and when
/// `i` is the selected index. The selected index is drawn uniformly from
/// `1..=n` on the SGD stream of `seed`.
pub fn run_sgd(
    init: &NetParams,
    stream: &LabeledDataset,
    eta: f64,
    seed: u64,
    snapshot_every: usize,
) -> Result<SgdRun> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::arg(format!("step size {eta} must be non-negative")));
    }
    if stream.dim() != init.input_dim() {
        return Err(Error::Shape(format!(
            "stream dimension {} for a network on dimension {}",
            stream.dim(),
            init.input_dim()
        )));
    }
    let n = stream.len();
    let mut rng = seed::rng(seed::sub_seed(seed, Stream::Sgd));
    let selected_index = rng.random_range(1..=n);

    let mut params = init.clone();
    let mut per_step = Vec::with_capacity(n);
    let mut snapshots = Vec::new();
    for i in 1..=n {
        if i == selected_index || (snapshot_every > 0 && (i - 1) % snapshot_every == 0) {
            snapshots.push(Snapshot {
                step: i,
                params: params.clone(),
            });
        }
        let x = stream.x(i - 1);
        let y = stream.y(i - 1);
        let lg = network::loss_and_grad(&params, x, y)
            .map_err(|e| Error::Numeric(format!("step {i}: {e}")))?;
        per_step.push(StepRecord {
            loss: lg.loss,
            zero_one: if y * lg.output > 0.0 { 0.0 } else { 1.0 },
            distances: params.layer_distances(init),
            grad_norms: lg.grad.layer_norms(),
        });
        if eta > 0.0 {
            lg.grad.add_to(params.layers_mut(), -eta);
        }
    }
    Ok(SgdRun {
        record: SgdRunRecord {
            per_step,
            eta,
            n,
            selected_index,
            seed,
        },
        snapshots,
        final_params: params,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CumulativeLossReport {
    pub sgd_total: f64,
    pub reference_total: f64,
    pub gap: f64,
    pub gap_per_step: f64,
    pub slack: f64,
    pub pass: bool,
}

/// `3·L·R/√(2n) + 0.1`.
pub fn default_cumulative_slack(depth: usize, radius: f64, n: usize) -> f64 {
    3.0 * depth as f64 * radius / (2.0 * n as f64).sqrt() + 0.1
}

/// Compare `Σ L_i(W⁽ⁱ⁾)` with a fixed competitor's `Σ L_i(W*)`.
///
/// `reference_losses[i]` must be the competitor's loss on the same example
/// that SGD saw at step `i + 1`; only the lengths are checked.
pub fn cumulative_loss_check(
    record: &SgdRunRecord,
    reference_losses: &[f64],
    slack: f64,
) -> Result<CumulativeLossReport> {
    if reference_losses.len() != record.per_step.len() {
        return Err(Error::Consistency(format!(
            "{} reference losses for {} SGD steps",
            reference_losses.len(),
            record.per_step.len()
        )));
    }
    let sgd_total: f64 = record.per_step.iter().map(|s| s.loss).sum();
    let reference_total: f64 = reference_losses.iter().sum();
    let gap = sgd_total - reference_total;
    let gap_per_step = gap / record.n as f64;
    Ok(CumulativeLossReport {
        sgd_total,
        reference_total,
        gap,
        gap_per_step,
        slack,
        pass: gap_per_step <= slack,
    })
}

/// Per-example losses `ℓ(y_i f_W(x_i))` of a fixed network.
pub fn losses_of(params: &NetParams, data: &LabeledDataset) -> Result<Vec<f64>> {
    let out = network::predict_batch(params, data.inputs(), data.dim())?;
    Ok(out
        .iter()
        .zip(data.labels())
        .map(|(f, y)| network::logistic_loss(y * f))
        .collect())
}

/// Fraction of `data` with `y·f ≤ 0`.
pub fn zero_one_error(params: &NetParams, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::arg("empty evaluation set"));
    }
    let out = network::predict_batch(params, data.inputs(), data.dim())?;
    let wrong = out.iter().zip(data.labels()).filter(|(f, y)| *y * *f <= 0.0).count();
    Ok(wrong as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Error of the iterate at this 1-based step.
    Selected(usize),
    /// Mean error over all snapshots.
    Average,
}

/// Test 0-1 error of the output iterate, or its average over snapshots.
pub fn online_to_batch_eval(snapshots: &[Snapshot], test: &LabeledDataset, mode: EvalMode) -> Result<f64> {
    if snapshots.is_empty() {
        return Err(Error::arg("no snapshots to evaluate"));
    }
    if test.is_empty() {
        return Err(Error::arg("empty test set"));
    }
    match mode {
        EvalMode::Selected(step) => {
            let snap = snapshots
                .iter()
                .find(|s| s.step == step)
                .ok_or_else(|| Error::arg(format!("no snapshot at step {step}")))?;
            zero_one_error(&snap.params, test)
        }
        EvalMode::Average => {
            let errs: Vec<f64> = snapshots
                .iter()
                .map(|s| zero_one_error(&s.params, test))
                .collect::<Result<_>>()?;
            Ok(errs.iter().sum::<f64>() / errs.len() as f64)
        }
    }
}
