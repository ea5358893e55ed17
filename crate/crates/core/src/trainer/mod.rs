//! Training recipe: noam learning-rate schedule, label-smoothed
//! cross-entropy, bias-corrected Adam, dropout and teacher forcing.

mod loop_;
mod optim;

pub use loop_::{
    batch_loss, prepare_examples, train, Example, MetricRecord, TrainConfig, TrainOutcome, CHECKPOINT_FILE,
    METRICS_FILE, TIMING_FILE,
};
pub use optim::{adam_step, global_grad_norm, AdamConfig, OptimizerState};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Noam schedule parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub d_model: usize,
    pub warmup_n: usize,
    pub k: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            d_model: 512,
            warmup_n: 8000,
            k: 1.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.warmup_n == 0 || !(self.k > 0.0) {
            return Err(Error::Config(format!("invalid schedule {self:?}")));
        }
        Ok(())
    }
}

/// `k · d^-0.5 · min(step^-0.5, step · warmup^-1.5)`; steps start at 1.
pub fn noam_lr(step: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if step == 0 {
        return Err(Error::Config("noam_lr: step counts from 1".into()));
    }
    cfg.validate()?;
    let s = step as f64;
    let w = cfg.warmup_n as f64;
    Ok(cfg.k * (cfg.d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Loss of one row of logits against `gold` with uniform smoothing mass
/// `smoothing / (vocab − 1)` on every other class. Returns the loss and the
/// row's log-sum-exp.
pub(crate) fn smoothed_row_loss(logits: &[f64], gold: usize, smoothing: f64) -> (f64, f64) {
    let vocab = logits.len();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let gold_lp = logits[gold] - lse;
    if vocab == 1 || smoothing == 0.0 {
        return (-gold_lp, lse);
    }
    let off = smoothing / (vocab - 1) as f64;
    let others: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != gold)
        .map(|(_, v)| v - lse)
        .sum();
    (-(1.0 - smoothing) * gold_lp - off * others, lse)
}

/// Mean label-smoothed cross-entropy over the non-pad positions of
/// `targets`, with the number of positions counted.
pub fn label_smoothed_ce(
    logits: &Tensor,
    targets: &[usize],
    smoothing: f64,
    pad_id: usize,
) -> Result<(f64, usize)> {
    let (rows, vocab) = logits.dims2("label_smoothed_ce")?;
    if rows != targets.len() {
        return Err(Error::shape("label_smoothed_ce", logits.shape(), &[targets.len()]));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    let mut total = 0.0;
    let mut count = 0;
    for (r, &gold) in targets.iter().enumerate() {
        if gold >= vocab {
            return Err(Error::OutOfRange { index: gold, len: vocab });
        }
        if gold == pad_id {
            continue;
        }
        total += smoothed_row_loss(logits.row(r), gold, smoothing).0;
        count += 1;
    }
    if count == 0 {
        return Err(Error::DegenerateBatch("every target position is padding".into()));
    }
    Ok((total / count as f64, count))
}
