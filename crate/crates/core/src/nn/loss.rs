use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;

use super::forward::{backward, forward_trace};
use super::{NetworkParams, NetworkSpec, NnError};

/// Temperature-scaled softmax of one logit vector, max-subtracted so huge
/// logits stay finite.
pub fn softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    assert!(tau > 0.0, "temperature must be positive");
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v / tau));
    let mut out: Vec<f64> = logits.iter().map(|&v| (v / tau - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for v in &mut out {
        *v /= s;
    }
    out
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Matrix, tau: f64) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let p = softmax(row, tau);
        row.copy_from_slice(&p);
    }
    out
}

fn log_softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v / tau));
    let lse = logits
        .iter()
        .map(|&v| (v / tau - m).exp())
        .sum::<f64>()
        .ln()
        + m;
    logits.iter().map(|&v| v / tau - lse).collect()
}

/// Training objective. `Mixed.weight` is the weight on the distillation
/// term; the one-hot term gets the complement. `Switched` ramps linearly
/// from `from` to `to` over `window` steps starting at `at_step`; a window
/// of zero is a hard cut at `at_step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    OneHot,
    Distill,
    Mixed { weight: f64 },
    Switched { from: Box<LossMode>, to: Box<LossMode>, at_step: u64, window: u64 },
}

/// Effective weights on the two base losses at some step. Every mode,
/// including nested switches, reduces to one of these because both losses
/// enter linearly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendWeights {
    pub one_hot: f64,
    pub distill: f64,
}

/// Collapses `mode` at `step` into blend weights.
pub fn resolve_loss_mode(mode: &LossMode, step: u64) -> BlendWeights {
    match mode {
        LossMode::OneHot => BlendWeights { one_hot: 1.0, distill: 0.0 },
        LossMode::Distill => BlendWeights { one_hot: 0.0, distill: 1.0 },
        LossMode::Mixed { weight } => BlendWeights { one_hot: 1.0 - weight, distill: *weight },
        LossMode::Switched { from, to, at_step, window } => {
            let alpha = if *window == 0 {
                if step >= *at_step {
                    1.0
                } else {
                    0.0
                }
            } else {
                ((step as f64 - *at_step as f64) / *window as f64).clamp(0.0, 1.0)
            };
            let f = resolve_loss_mode(from, step);
            let t = resolve_loss_mode(to, step);
            BlendWeights {
                one_hot: (1.0 - alpha) * f.one_hot + alpha * t.one_hot,
                distill: (1.0 - alpha) * f.distill + alpha * t.distill,
            }
        }
    }
}

pub(super) fn validate_mode(mode: &LossMode) -> Result<(), NnError> {
    match mode {
        LossMode::OneHot | LossMode::Distill => Ok(()),
        LossMode::Mixed { weight } => {
            if (0.0..=1.0).contains(weight) {
                Ok(())
            } else {
                Err(NnError::BadPlan(format!(
                    "mixed loss weight {weight} is outside [0, 1]"
                )))
            }
        }
        LossMode::Switched { from, to, .. } => {
            validate_mode(from)?;
            validate_mode(to)
        }
    }
}

pub fn mode_uses_teacher(mode: &LossMode) -> bool {
    match mode {
        LossMode::OneHot => false,
        LossMode::Distill => true,
        LossMode::Mixed { weight } => *weight > 0.0,
        LossMode::Switched { from, to, .. } => mode_uses_teacher(from) || mode_uses_teacher(to),
    }
}

/// Where a probability table came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbSource {
    pub model: String,
    pub step: u64,
}

/// Per-example class probabilities from a fixed model, materialized at
/// temperature 1. Softened consumers recover colder or warmer versions via
/// the logarithm, so one table serves every temperature.
#[derive(Debug, Clone)]
pub struct ProbTable {
    probs: Matrix,
    pub source: ProbSource,
}

impl ProbTable {
    /// Wraps a probability matrix, insisting every row is a distribution
    /// (entries in [0, 1], sums within 1e-6 of 1).
    pub fn new(probs: Matrix, source: ProbSource) -> Result<ProbTable, NnError> {
        for r in 0..probs.rows() {
            let row = probs.row(r);
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(NnError::ShapeMismatch(format!(
                    "probability row {r} sums to {s}, not 1"
                )));
            }
            if row.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) {
                return Err(NnError::ShapeMismatch(format!(
                    "probability row {r} has entries outside [0, 1]"
                )));
            }
        }
        Ok(ProbTable { probs, source })
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.probs.cols()
    }

    pub fn row(&self, example: usize) -> &[f64] {
        self.probs.row(example)
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    /// Re-softens a stored row to temperature `tau` via the power
    /// transform p^(1/tau) (renormalized), the probability-space image of
    /// dividing the original logits by tau.
    pub fn softened_row(&self, example: usize, tau: f64) -> Vec<f64> {
        let logp: Vec<f64> = self.probs.row(example).iter().map(|&p| p.ln()).collect();
        softmax(&logp, tau)
    }
}

/// Targets for one batch: observed labels plus, when distilling, a
/// batch-aligned matrix of teacher probabilities.
pub struct BatchTargets<'a> {
    pub labels: &'a [usize],
    pub teacher: Option<&'a Matrix>,
}

/// Mean loss over a batch and its parameter gradients.
///
/// The one-hot term is cross-entropy at temperature 1 against the observed
/// label. The distillation term is cross-entropy between teacher and
/// student distributions both softened at `tau`, scaled by tau^2 so its
/// gradient magnitude stays comparable across temperatures. With
/// `raw_teacher_probs` the teacher rows are consumed exactly as stored and
/// the tau^2 factor is dropped; that path is meant for temperature-1
/// tables driven straight into the loss.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grad(
    spec: &NetworkSpec,
    params: &NetworkParams,
    batch: &Matrix,
    targets: &BatchTargets,
    tau: f64,
    mode: &LossMode,
    step: u64,
    raw_teacher_probs: bool,
) -> Result<(f64, NetworkParams), NnError> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(NnError::BadPlan(format!("temperature {tau} must be positive")));
    }
    validate_mode(mode)?;
    let b = batch.rows();
    if targets.labels.len() != b {
        return Err(NnError::ShapeMismatch(format!(
            "{} labels for a batch of {b}",
            targets.labels.len()
        )));
    }
    let k = spec.num_classes;
    if let Some(bad) = targets.labels.iter().find(|&&y| y >= k) {
        return Err(NnError::ShapeMismatch(format!("label {bad} out of range for {k} classes")));
    }
    let weights = resolve_loss_mode(mode, step);
    let teacher = if weights.distill > 0.0 {
        let t = targets
            .teacher
            .ok_or(NnError::MissingTeacherRow { index: 0 })?;
        if t.rows() != b || t.cols() != k {
            return Err(NnError::ShapeMismatch(format!(
                "teacher rows are {}x{}, batch needs {b}x{k}",
                t.rows(),
                t.cols()
            )));
        }
        Some(t)
    } else {
        None
    };

    let trace = forward_trace(spec, params, batch)?;
    let logits = trace.logits();
    let mut dlogits = Matrix::zeros(b, k);
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;

    if weights.one_hot > 0.0 {
        for r in 0..b {
            let ls = log_softmax(logits.row(r), 1.0);
            let y = targets.labels[r];
            loss += weights.one_hot * (-ls[y]) * inv_b;
            let drow = dlogits.row_mut(r);
            for (j, &l) in ls.iter().enumerate() {
                let p = l.exp();
                let target = if j == y { 1.0 } else { 0.0 };
                drow[j] += weights.one_hot * (p - target) * inv_b;
            }
        }
    }
    if weights.distill > 0.0 {
        let t = teacher.expect("checked above");
        let loss_scale = if raw_teacher_probs { 1.0 } else { tau * tau };
        let grad_scale = loss_scale / tau;
        for r in 0..b {
            let q: Vec<f64> = if raw_teacher_probs {
                t.row(r).to_vec()
            } else {
                let logq: Vec<f64> = t.row(r).iter().map(|&p| p.ln()).collect();
                softmax(&logq, tau)
            };
            let ls = log_softmax(logits.row(r), tau);
            let row_loss: f64 = q.iter().zip(&ls).map(|(&qk, &lk)| -qk * lk).sum();
            loss += weights.distill * loss_scale * row_loss * inv_b;
            let drow = dlogits.row_mut(r);
            for (j, (&lk, &qk)) in ls.iter().zip(&q).enumerate() {
                let p = lk.exp();
                drow[j] += weights.distill * grad_scale * (p - qk) * inv_b;
            }
        }
    }

    let grads = backward(spec, params, &trace, &dlogits)?;
    Ok((loss, grads))
}
