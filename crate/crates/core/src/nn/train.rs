use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;

use super::loss::{loss_and_grad, mode_uses_teacher, validate_mode, BatchTargets};
use super::params::check_params;
use super::{
    init_params, softmax_rows, LossMode, NetworkParams, NetworkSpec, NnError, ProbSource,
    ProbTable,
};

/// Loss threshold beyond which training is declared divergent.
pub const DIVERGENCE_LOSS_CAP: f64 = 1e6;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// How long to train: a raw step budget or whole passes over the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainDuration {
    Steps(u64),
    Epochs(u64),
}

/// First-order update rule. Adam uses the usual 0.9 / 0.999 moment decays
/// and 1e-8 denominator guard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd { lr: f64, momentum: f64, nesterov: bool },
    Adam { lr: f64 },
}

impl Optimizer {
    fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr, .. } | Optimizer::Adam { lr } => *lr,
        }
    }
}

/// Full recipe for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub seed: u64,
    pub batch_size: usize,
    pub duration: TrainDuration,
    pub optimizer: Optimizer,
    pub mode: LossMode,
    pub tau: f64,
    /// Consume teacher rows exactly as stored (no re-softening, no tau^2
    /// scaling). See the loss docs.
    #[serde(default)]
    pub raw_teacher_probs: bool,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.batch_size == 0 {
            return Err(NnError::BadPlan("batch size must be at least 1".to_string()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(NnError::BadPlan(format!("temperature {} must be positive", self.tau)));
        }
        let lr = self.optimizer.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(NnError::BadPlan(format!("learning rate {lr} must be positive")));
        }
        if let Optimizer::Sgd { momentum, .. } = self.optimizer {
            if !(0.0..1.0).contains(&momentum) {
                return Err(NnError::BadPlan(format!(
                    "momentum {momentum} is outside [0, 1)"
                )));
            }
        }
        validate_mode(&self.mode)
    }

    /// Steps per pass over `n` examples: full batches plus a final partial.
    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        (n as u64).div_ceil(self.batch_size as u64)
    }

    /// Total optimizer updates this plan performs on `n` examples.
    pub fn total_steps(&self, n: usize) -> u64 {
        match self.duration {
            TrainDuration::Steps(s) => s,
            TrainDuration::Epochs(e) => e * self.steps_per_epoch(n),
        }
    }
}

/// When to snapshot parameters. Whatever the variant, step 0 and the final
/// step are always captured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CheckpointCadence {
    /// Only step 0 and the final step.
    EndsOnly,
    /// Every k-th step.
    EveryK(u64),
    /// Explicit step list (steps beyond the run are dropped).
    Explicit(Vec<u64>),
    /// About this many snapshots, log-spaced over the run.
    LogSpaced(usize),
}

impl CheckpointCadence {
    pub fn steps_for(&self, total: u64) -> BTreeSet<u64> {
        let mut set = BTreeSet::new();
        set.insert(0);
        set.insert(total);
        match self {
            CheckpointCadence::EndsOnly => {}
            CheckpointCadence::EveryK(k) => {
                if *k > 0 {
                    let mut s = *k;
                    while s < total {
                        set.insert(s);
                        s += k;
                    }
                }
            }
            CheckpointCadence::Explicit(steps) => {
                set.extend(steps.iter().copied().filter(|&s| s <= total));
            }
            CheckpointCadence::LogSpaced(n) => {
                if *n > 2 && total >= 1 {
                    let lt = (total as f64).ln();
                    let m = (n - 2) as f64;
                    for j in 0..=(n - 2) {
                        let s = (lt * j as f64 / m).exp().round() as u64;
                        set.insert(s.min(total));
                    }
                }
            }
        }
        set
    }
}

/// Parameters as they stood after `step` optimizer updates.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub params: NetworkParams,
}

struct OptState {
    velocity: Option<NetworkParams>,
    m: Option<NetworkParams>,
    v: Option<NetworkParams>,
    t: u64,
}

impl OptState {
    fn new(opt: &Optimizer, shape: &NetworkParams) -> OptState {
        match opt {
            Optimizer::Sgd { momentum, .. } => OptState {
                velocity: if *momentum > 0.0 { Some(shape.zeros_like()) } else { None },
                m: None,
                v: None,
                t: 0,
            },
            Optimizer::Adam { .. } => OptState {
                velocity: None,
                m: Some(shape.zeros_like()),
                v: Some(shape.zeros_like()),
                t: 0,
            },
        }
    }

    fn apply(&mut self, opt: &Optimizer, params: &mut NetworkParams, grads: &NetworkParams) {
        match *opt {
            Optimizer::Sgd { lr, momentum, nesterov } => {
                for (li, lp) in params.layers.iter_mut().enumerate() {
                    if lp.frozen {
                        continue;
                    }
                    let g = &grads.layers[li];
                    match &mut self.velocity {
                        Some(vel) => {
                            let vl = &mut vel.layers[li];
                            for ((p, v), &gv) in lp
                                .weights
                                .data_mut()
                                .iter_mut()
                                .zip(vl.weights.data_mut())
                                .zip(g.weights.data())
                            {
                                *v = momentum * *v + gv;
                                let upd = if nesterov { gv + momentum * *v } else { *v };
                                *p -= lr * upd;
                            }
                            for ((p, v), &gv) in
                                lp.bias.iter_mut().zip(vl.bias.iter_mut()).zip(&g.bias)
                            {
                                *v = momentum * *v + gv;
                                let upd = if nesterov { gv + momentum * *v } else { *v };
                                *p -= lr * upd;
                            }
                        }
                        None => {
                            for (p, &gv) in lp.weights.data_mut().iter_mut().zip(g.weights.data())
                            {
                                *p -= lr * gv;
                            }
                            for (p, &gv) in lp.bias.iter_mut().zip(&g.bias) {
                                *p -= lr * gv;
                            }
                        }
                    }
                }
            }
            Optimizer::Adam { lr } => {
                self.t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                let m = self.m.as_mut().expect("adam state");
                let v = self.v.as_mut().expect("adam state");
                for (li, lp) in params.layers.iter_mut().enumerate() {
                    if lp.frozen {
                        continue;
                    }
                    let g = &grads.layers[li];
                    let ml = &mut m.layers[li];
                    let vl = &mut v.layers[li];
                    let step_one = |p: &mut f64, mv: &mut f64, vv: &mut f64, gv: f64| {
                        *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    };
                    for ((p, mv), (vv, &gv)) in lp
                        .weights
                        .data_mut()
                        .iter_mut()
                        .zip(ml.weights.data_mut())
                        .zip(vl.weights.data_mut().iter_mut().zip(g.weights.data()))
                    {
                        step_one(p, mv, vv, gv);
                    }
                    for ((p, mv), (vv, &gv)) in lp
                        .bias
                        .iter_mut()
                        .zip(ml.bias.iter_mut())
                        .zip(vl.bias.iter_mut().zip(&g.bias))
                    {
                        step_one(p, mv, vv, gv);
                    }
                }
            }
        }
    }
}

/// Trains a network from `init` according to `plan`.
///
/// One example per `inputs` row; `labels` are observed (possibly noisy)
/// classes. Distilling modes need `teacher` to cover every training
/// example by index. Batches are drawn by reshuffling example indices each
/// epoch with a Xoshiro256** stream seeded from the plan seed, so a fixed
/// plan replays bit for bit. Returns the final parameters plus snapshots
/// at the cadence steps (step 0 and the final step always included).
/// Fails with `DivergedLoss` the moment a batch loss goes non-finite or
/// past `DIVERGENCE_LOSS_CAP`.
pub fn train(
    spec: &NetworkSpec,
    init: &NetworkParams,
    plan: &TrainPlan,
    inputs: &Matrix,
    labels: &[usize],
    teacher: Option<&ProbTable>,
    cadence: &CheckpointCadence,
) -> Result<(NetworkParams, Vec<Checkpoint>), NnError> {
    spec.validate()?;
    check_params(spec, init)?;
    plan.validate()?;
    let n = inputs.rows();
    if n == 0 {
        return Err(NnError::BadPlan("empty training set".to_string()));
    }
    if labels.len() != n {
        return Err(NnError::ShapeMismatch(format!(
            "{} labels for {n} training examples",
            labels.len()
        )));
    }
    let needs_teacher = mode_uses_teacher(&plan.mode);
    if needs_teacher {
        let table = teacher.ok_or(NnError::MissingTeacherRow { index: 0 })?;
        if table.len() < n {
            return Err(NnError::MissingTeacherRow { index: table.len() });
        }
        if table.num_classes() != spec.num_classes {
            return Err(NnError::ShapeMismatch(format!(
                "teacher table has {} classes, network has {}",
                table.num_classes(),
                spec.num_classes
            )));
        }
    }

    let total = plan.total_steps(n);
    let ckpt_steps = cadence.steps_for(total);
    let mut params = init.clone();
    let mut checkpoints = Vec::with_capacity(ckpt_steps.len());
    if ckpt_steps.contains(&0) {
        checkpoints.push(Checkpoint { step: 0, params: params.clone() });
    }
    if total == 0 {
        return Ok((params, checkpoints));
    }

    let mut rng = Xoshiro256StarStar::seed_from_u64(plan.seed);
    let mut state = OptState::new(&plan.optimizer, &params);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut step: u64 = 0;
    'epochs: loop {
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(plan.batch_size) {
            if step == total {
                break 'epochs;
            }
            let mut batch = Matrix::zeros(chunk.len(), inputs.cols());
            let mut batch_labels = Vec::with_capacity(chunk.len());
            for (r, &idx) in chunk.iter().enumerate() {
                batch.row_mut(r).copy_from_slice(inputs.row(idx));
                batch_labels.push(labels[idx]);
            }
            let teacher_rows = if needs_teacher {
                let table = teacher.expect("checked above");
                let mut t = Matrix::zeros(chunk.len(), spec.num_classes);
                for (r, &idx) in chunk.iter().enumerate() {
                    t.row_mut(r).copy_from_slice(table.row(idx));
                }
                Some(t)
            } else {
                None
            };
            let targets = BatchTargets {
                labels: &batch_labels,
                teacher: teacher_rows.as_ref(),
            };
            let (loss, grads) = loss_and_grad(
                spec,
                &params,
                &batch,
                &targets,
                plan.tau,
                &plan.mode,
                step,
                plan.raw_teacher_probs,
            )?;
            if !loss.is_finite() || loss > DIVERGENCE_LOSS_CAP {
                return Err(NnError::DivergedLoss { step, loss });
            }
            state.apply(&plan.optimizer, &mut params, &grads);
            step += 1;
            if ckpt_steps.contains(&step) {
                checkpoints.push(Checkpoint { step, params: params.clone() });
            }
        }
    }
    Ok((params, checkpoints))
}

/// Top-1 accuracy against `labels`; argmax ties go to the lowest class
/// index.
pub fn accuracy(
    spec: &NetworkSpec,
    params: &NetworkParams,
    inputs: &Matrix,
    labels: &[usize],
) -> Result<f64, NnError> {
    if labels.len() != inputs.rows() {
        return Err(NnError::ShapeMismatch(format!(
            "{} labels for {} examples",
            labels.len(),
            inputs.rows()
        )));
    }
    if inputs.rows() == 0 {
        return Err(NnError::ShapeMismatch("empty evaluation set".to_string()));
    }
    let logits = super::forward(spec, params, inputs)?;
    let mut correct = 0usize;
    for r in 0..logits.rows() {
        if argmax(logits.row(r)) == labels[r] {
            correct += 1;
        }
    }
    Ok(correct as f64 / inputs.rows() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut bi = 0usize;
    let mut bv = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > bv {
            bv = v;
            bi = i;
        }
    }
    bi
}

/// Runs the model over a dataset and freezes its temperature-1 class
/// probabilities into a table.
pub fn probtable_from_model(
    spec: &NetworkSpec,
    params: &NetworkParams,
    inputs: &Matrix,
    source: ProbSource,
) -> Result<ProbTable, NnError> {
    let logits = super::forward(spec, params, inputs)?;
    ProbTable::new(softmax_rows(&logits, 1.0), source)
}

/// Everything a teacher-student run produces.
#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub teacher_init: NetworkParams,
    pub teacher_final: NetworkParams,
    pub teacher_checkpoints: Vec<Checkpoint>,
    pub prob_table: ProbTable,
    pub student_init: NetworkParams,
    pub student_final: NetworkParams,
    pub student_checkpoints: Vec<Checkpoint>,
    /// True when the student reused the teacher's initialization because
    /// the architectures match.
    pub shared_init: bool,
}

/// Trains a teacher on observed labels, freezes its temperature-1
/// probability table, then trains a student against it.
///
/// When the two specs are structurally identical the student starts from
/// the teacher's exact initialization; otherwise it draws a fresh one from
/// the student plan's seed.
pub fn distill_pipeline(
    teacher_spec: &NetworkSpec,
    student_spec: &NetworkSpec,
    inputs: &Matrix,
    labels: &[usize],
    teacher_plan: &TrainPlan,
    student_plan: &TrainPlan,
    cadence: &CheckpointCadence,
) -> Result<DistillOutcome, NnError> {
    if mode_uses_teacher(&teacher_plan.mode) {
        return Err(NnError::BadPlan(
            "teacher plan cannot itself distill".to_string(),
        ));
    }
    let teacher_init = init_params(teacher_spec, teacher_plan.seed)?;
    let (teacher_final, teacher_checkpoints) = train(
        teacher_spec,
        &teacher_init,
        teacher_plan,
        inputs,
        labels,
        None,
        cadence,
    )?;
    let prob_table = probtable_from_model(
        teacher_spec,
        &teacher_final,
        inputs,
        ProbSource {
            model: "teacher".to_string(),
            step: teacher_plan.total_steps(inputs.rows()),
        },
    )?;
    let shared_init = teacher_spec == student_spec;
    let student_init = if shared_init {
        teacher_init.clone()
    } else {
        init_params(student_spec, student_plan.seed)?
    };
    let (student_final, student_checkpoints) = train(
        student_spec,
        &student_init,
        student_plan,
        inputs,
        labels,
        Some(&prob_table),
        cadence,
    )?;
    Ok(DistillOutcome {
        teacher_init,
        teacher_final,
        teacher_checkpoints,
        prob_table,
        student_init,
        student_final,
        student_checkpoints,
        shared_init,
    })
}
