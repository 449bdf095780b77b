//! Experiment orchestration: a declarative config runs as a fixed sequence
//! of stages (data, training, diagnostics) with per-stage seeds split off a
//! master seed, and every emitted file is content-hashed into a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{
    inject_label_noise, load_idx, make_gaussian_clusters, sample_patches, LabeledSet, Split,
};
use crate::diagnostics::{
    build_scatter, deviation_metrics, eigentrace, exaggeration_score, pairs_from_tables,
    slope_by_percentile, truncation_accuracy, Band, BasisProvenance, DeviationRecord, DiagError,
    EigenBasis, EigenTrace, ScatterMode, ScatterRecord, SlopeFit,
};
use crate::gradflow::{
    closed_form_traces, theorem_sweep, verify_theorem, GradFlowProblem, LinearTraces,
    TheoremSample,
};
use crate::nn::{
    accuracy, distill_pipeline, forward_trace, init_params, mode_uses_teacher,
    probtable_from_model, save_checkpoint, train, Checkpoint, CheckpointCadence, InputShape,
    Layer, LossMode, NetworkSpec, ProbSource, ProbTable, TrainDuration, TrainPlan,
};
use crate::numerics::Matrix;

pub const SCHEMA_VERSION: u32 = 1;

/// Bins per axis in the emitted scatter density grid.
pub const DENSITY_BINS: usize = 80;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config error: {0}")]
    Config(String),
    #[error("requested {requested} direction pairs but only {available} exist")]
    TooManyPairs { requested: usize, available: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Diagnostics(#[from] DiagError),
    #[error(transparent)]
    GradFlow(#[from] crate::gradflow::GradFlowError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToySetting {
    RandomFeaturesNoisy,
    MlpIdx,
    CnnPatches,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    TheoremSweep {
        tuples: usize,
    },
    LinearTrace {
        lambdas: Vec<f64>,
        t_stop: f64,
        alpha_target: f64,
        steps: usize,
    },
    ToyDistill {
        setting: ToySetting,
    },
    InterpolationStudy {
        /// Epoch budget for the early-stopped (non-interpolating) teacher.
        early_epochs: u64,
        /// Step at which the switched students move to one-hot loss;
        /// 0 means halfway through the student run.
        switch_at: u64,
        switch_window: u64,
    },
    LossSwitchStudy {
        switch_at: u64,
        switch_window: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub classes: usize,
    pub dim: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub spread: f64,
    pub noise_fraction: f64,
    pub idx_train_images: Option<PathBuf>,
    pub idx_train_labels: Option<PathBuf>,
    pub idx_test_images: Option<PathBuf>,
    pub idx_test_labels: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: 10,
            dim: 32,
            train_count: 128,
            test_count: 256,
            spread: 0.1,
            noise_fraction: 0.25,
            idx_train_images: None,
            idx_train_labels: None,
            idx_test_images: None,
            idx_test_labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Random-features width.
    pub features: usize,
    /// MLP hidden width.
    pub hidden: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub pool: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { features: 5000, hidden: 64, conv_channels: 6, kernel: 3, pool: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticsConfig {
    pub scatter: bool,
    pub slopes: bool,
    pub metrics: bool,
    /// Percentile band width used for slope fits.
    pub slope_fraction: f64,
    /// Eigendirection pairs to trace and score; 0 disables the trace.
    pub eigentrace_pairs: usize,
    /// Top-K grid for truncated-weight accuracy; empty disables it.
    pub truncation_k: Vec<usize>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            scatter: true,
            slopes: true,
            metrics: true,
            slope_fraction: 0.25,
            eigentrace_pairs: 0,
            truncation_k: Vec::new(),
        }
    }
}

fn default_teacher_plan() -> TrainPlan {
    TrainPlan {
        seed: 0,
        batch_size: 32,
        duration: TrainDuration::Epochs(40),
        optimizer: crate::nn::Optimizer::Adam { lr: 1e-3 },
        mode: LossMode::OneHot,
        tau: 1.0,
        raw_teacher_probs: false,
    }
}

fn default_student_plan() -> TrainPlan {
    TrainPlan { mode: LossMode::Distill, tau: 4.0, ..default_teacher_plan() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub kind: ExperimentKind,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_teacher_plan")]
    pub teacher: TrainPlan,
    #[serde(default = "default_student_plan")]
    pub student: TrainPlan,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    /// Checkpoint every this many steps; absent means about 20 snapshots
    /// log-spaced over the run.
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    pub output_dir: PathBuf,
    pub master_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub library_version: String,
    pub config_digest: String,
    pub per_stage_seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<ArtifactRecord>,
    pub wall_clock_seconds: f64,
    pub failing_stage: Option<String>,
    pub error: Option<String>,
}

/// SplitMix64 finalizer used to split the master seed.
fn splitmix64(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Stage seed: `splitmix64(master ^ fnv1a64(stage))`. Stages are keyed by
/// name, so enabling or disabling one never shifts another's stream.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    splitmix64(master ^ fnv1a64(stage))
}

/// Draws `n_pairs` distinct index pairs (i, j) with i < j, uniformly
/// without replacement over all C(n_directions, 2) pairs.
pub fn eigenpair_sampler(
    seed: u64,
    n_directions: usize,
    n_pairs: usize,
) -> Result<Vec<(usize, usize)>, RunnerError> {
    if n_directions < 2 {
        return Err(RunnerError::Config(format!(
            "pair sampling needs at least 2 directions, got {n_directions}"
        )));
    }
    let available = n_directions * (n_directions - 1) / 2;
    if n_pairs > available {
        return Err(RunnerError::TooManyPairs { requested: n_pairs, available });
    }
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, available, n_pairs);
    Ok(picks.iter().map(|flat| unflatten_pair(flat, n_directions)).collect())
}

/// Maps a flat index into the lexicographic pair order (0,1), (0,2), ...
fn unflatten_pair(mut flat: usize, n: usize) -> (usize, usize) {
    for i in 0..n - 1 {
        let row = n - 1 - i;
        if flat < row {
            return (i, i + 1 + flat);
        }
        flat -= row;
    }
    unreachable!("flat pair index out of range")
}

struct Emitter {
    dir: PathBuf,
    records: Vec<ArtifactRecord>,
}

impl Emitter {
    fn new(dir: &Path) -> Result<Emitter, RunnerError> {
        fs::create_dir_all(dir)?;
        Ok(Emitter { dir: dir.to_path_buf(), records: Vec::new() })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), RunnerError> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.records.push(ArtifactRecord {
            path: rel.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    /// Hashes and records a file already written under the output dir.
    fn record_file(&mut self, rel: &str) -> Result<(), RunnerError> {
        let bytes = fs::read(self.dir.join(rel))?;
        self.records.push(ArtifactRecord {
            path: rel.to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }
}

// ---------------------------------------------------------------------------
// CSV emission. All floats go through the default `Display`, which prints
// the shortest digits that parse back to the same bits, so identical runs
// emit identical bytes.

pub fn sweep_csv(samples: &[TheoremSample]) -> String {
    let mut out = String::from("lambda1,lambda2,T,alpha_target,t,t_tilde,ratio\n");
    for s in samples {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.lambda1, s.lambda2, s.t_stop, s.alpha_target, s.t, s.t_tilde, s.ratio
        ));
    }
    out
}

/// Closed-form component traces on a shared time grid; the step column
/// carries the time value.
pub fn linear_trace_csv(traces: &LinearTraces) -> String {
    let mut out = String::from("step,direction,value,model_tag\n");
    for (tag, series) in [("teacher", &traces.teacher), ("student", &traces.student)] {
        for (k, vals) in series.iter().enumerate() {
            for (i, &t) in traces.times.iter().enumerate() {
                out.push_str(&format!("{},{},{},{}\n", t, k, vals[i], tag));
            }
        }
    }
    out
}

pub fn eigentrace_csv(traces: &[(&str, &EigenTrace)]) -> String {
    let mut out = String::from("step,direction,value,model_tag\n");
    for (tag, trace) in traces {
        for (pos, &dir) in trace.directions.iter().enumerate() {
            for (i, &step) in trace.steps.iter().enumerate() {
                out.push_str(&format!("{},{},{},{}\n", step, dir, trace.values[pos][i], tag));
            }
        }
    }
    out
}

pub fn scatter_csv(records: &[ScatterRecord]) -> String {
    let mut out = String::from("index,x,y,group,is_noisy\n");
    for r in records {
        out.push_str(&format!("{},{},{},{},{}\n", r.index, r.x, r.y, r.group, r.is_noisy));
    }
    out
}

pub fn slopes_csv(fits: &[SlopeFit]) -> String {
    let mut out = String::from("band,q,m,c,count\n");
    for f in fits {
        out.push_str(&format!("{},{},{},{},{}\n", f.band, f.q, f.m, f.c, f.count));
    }
    out
}

pub fn metrics_csv(records: &[DeviationRecord]) -> String {
    let mut out = String::from("index,kl,h_teacher,h_student\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.index, r.kl, r.teacher_entropy, r.student_entropy
        ));
    }
    out
}

/// Nonzero cells of a square density grid over the scatter's bounding box.
pub fn density_csv(records: &[ScatterRecord]) -> String {
    let mut out = String::from("x_bin,y_bin,x_center,y_center,count\n");
    if records.is_empty() {
        return out;
    }
    let bound = |f: fn(&ScatterRecord) -> f64| {
        let lo = records.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = records.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if lo == hi {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (xlo, xhi) = bound(|r| r.x);
    let (ylo, yhi) = bound(|r| r.y);
    let bin = |v: f64, lo: f64, hi: f64| -> usize {
        (((v - lo) / (hi - lo) * DENSITY_BINS as f64) as usize).min(DENSITY_BINS - 1)
    };
    let mut counts: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for r in records {
        *counts.entry((bin(r.x, xlo, xhi), bin(r.y, ylo, yhi))).or_insert(0) += 1;
    }
    for ((bx, by), count) in counts {
        let xc = xlo + (bx as f64 + 0.5) * (xhi - xlo) / DENSITY_BINS as f64;
        let yc = ylo + (by as f64 + 0.5) * (yhi - ylo) / DENSITY_BINS as f64;
        out.push_str(&format!("{bx},{by},{xc},{yc},{count}\n"));
    }
    out
}

pub fn prob_table_csv(table: &ProbTable, labels: &[usize], cleans: Option<&[usize]>) -> String {
    let k = table.num_classes();
    let mut out = String::from("index,label,clean_label");
    for c in 0..k {
        out.push_str(&format!(",p{c}"));
    }
    out.push('\n');
    for i in 0..table.len() {
        let clean = cleans.map(|c| c[i].to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}", i, labels[i], clean));
        for &p in table.row(i) {
            out.push_str(&format!(",{p}"));
        }
        out.push('\n');
    }
    out
}

/// Reads a probability CSV back into a table plus its label columns.
pub fn read_prob_csv(path: &Path) -> Result<(ProbTable, Vec<usize>, Option<Vec<usize>>), RunnerError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| RunnerError::Config(format!("{}: empty file", path.display())))?;
    let cols = header.split(',').count();
    if cols < 4 || !header.starts_with("index,label,clean_label,") {
        return Err(RunnerError::Config(format!(
            "{}: not a probability table",
            path.display()
        )));
    }
    let k = cols - 3;
    let mut labels = Vec::new();
    let mut cleans: Vec<Option<usize>> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(RunnerError::Config(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                lineno + 2,
                fields.len(),
                cols
            )));
        }
        let bad = |what: &str| {
            RunnerError::Config(format!("{}: row {}: bad {what}", path.display(), lineno + 2))
        };
        labels.push(fields[1].parse::<usize>().map_err(|_| bad("label"))?);
        cleans.push(if fields[2].is_empty() {
            None
        } else {
            Some(fields[2].parse::<usize>().map_err(|_| bad("clean label"))?)
        });
        let mut row = Vec::with_capacity(k);
        for f in &fields[3..] {
            row.push(f.parse::<f64>().map_err(|_| bad("probability"))?);
        }
        rows.push(row);
    }
    let probs = Matrix::from_rows(&rows).map_err(crate::nn::NnError::from)?;
    let table = ProbTable::new(probs, ProbSource { model: "stored".to_string(), step: 0 })?;
    let cleans = if cleans.iter().all(|c| c.is_none()) {
        None
    } else if cleans.iter().all(|c| c.is_some()) {
        Some(cleans.into_iter().map(|c| c.unwrap()).collect())
    } else {
        return Err(RunnerError::Config(format!(
            "{}: clean_label must be blank everywhere or set everywhere",
            path.display()
        )));
    };
    Ok((table, labels, cleans))
}

/// Reads a dataset CSV (the `write_csv` layout) back into a labeled set.
pub fn read_dataset_csv(path: &Path) -> Result<LabeledSet, RunnerError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| RunnerError::Config(format!("{}: empty file", path.display())))?;
    let cols = header.split(',').count();
    if cols < 4 || !header.starts_with("index,label,clean_label,x0") {
        return Err(RunnerError::Config(format!("{}: not a dataset table", path.display())));
    }
    let dim = cols - 3;
    let mut labels = Vec::new();
    let mut cleans: Vec<Option<usize>> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |what: &str| {
            RunnerError::Config(format!("{}: row {}: bad {what}", path.display(), lineno + 2))
        };
        if fields.len() != cols {
            return Err(bad("field count"));
        }
        labels.push(fields[1].parse::<usize>().map_err(|_| bad("label"))?);
        cleans.push(if fields[2].is_empty() {
            None
        } else {
            Some(fields[2].parse::<usize>().map_err(|_| bad("clean label"))?)
        });
        let mut row = Vec::with_capacity(dim);
        for f in &fields[3..] {
            row.push(f.parse::<f64>().map_err(|_| bad("feature"))?);
        }
        rows.push(row);
    }
    let inputs = Matrix::from_rows(&rows).map_err(|e| RunnerError::Config(e.to_string()))?;
    let clean_labels = if cleans.iter().all(|c| c.is_none()) {
        None
    } else if cleans.iter().all(|c| c.is_some()) {
        Some(cleans.into_iter().map(|c| c.unwrap()).collect())
    } else {
        return Err(RunnerError::Config(format!(
            "{}: clean_label must be blank everywhere or set everywhere",
            path.display()
        )));
    };
    let num_classes = labels.iter().copied().max().unwrap_or(0).max(1) + 1;
    Ok(LabeledSet {
        inputs,
        labels,
        clean_labels,
        split: Split::Train,
        num_classes,
        image_shape: None,
    })
}

// ---------------------------------------------------------------------------
// Config validation and the run loop.

fn plan_err(which: &str, e: impl std::fmt::Display) -> RunnerError {
    RunnerError::Config(format!("{which} plan: {e}"))
}

pub fn validate_config(config: &ExperimentConfig) -> Result<(), RunnerError> {
    if config.schema_version != SCHEMA_VERSION {
        return Err(RunnerError::Config(format!(
            "schema_version {} is not supported (expected {SCHEMA_VERSION})",
            config.schema_version
        )));
    }
    if config.checkpoint_every == Some(0) {
        return Err(RunnerError::Config("checkpoint cadence must be at least 1".to_string()));
    }
    config.teacher.validate().map_err(|e| plan_err("teacher", e))?;
    config.student.validate().map_err(|e| plan_err("student", e))?;
    let d = &config.diagnostics;
    if !(d.slope_fraction > 0.0 && d.slope_fraction <= 1.0) {
        return Err(RunnerError::Config(format!(
            "slope_fraction {} is outside (0, 1]",
            d.slope_fraction
        )));
    }
    let ds = &config.dataset;
    let trains = matches!(
        config.kind,
        ExperimentKind::ToyDistill { .. }
            | ExperimentKind::InterpolationStudy { .. }
            | ExperimentKind::LossSwitchStudy { .. }
    );
    if trains {
        if mode_uses_teacher(&config.teacher.mode) {
            return Err(RunnerError::Config(
                "teacher plan cannot itself consume a teacher table".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&ds.noise_fraction) {
            return Err(RunnerError::Config(format!(
                "noise fraction {} is outside [0, 1]",
                ds.noise_fraction
            )));
        }
        if !d.truncation_k.is_empty() && ds.noise_fraction == 0.0 {
            return Err(RunnerError::Config(
                "truncation diagnostics need injected label noise for the clean/flipped split"
                    .to_string(),
            ));
        }
    }
    match &config.kind {
        ExperimentKind::TheoremSweep { tuples } => {
            if *tuples == 0 {
                return Err(RunnerError::Config("sweep needs at least one tuple".to_string()));
            }
        }
        ExperimentKind::LinearTrace { lambdas, t_stop, alpha_target, steps } => {
            if lambdas.len() < 2 {
                return Err(RunnerError::Config(
                    "linear trace needs at least two rates".to_string(),
                ));
            }
            if *steps < 2 {
                return Err(RunnerError::Config("trace needs at least two steps".to_string()));
            }
            if !(t_stop.is_finite() && *t_stop > 0.0) {
                return Err(RunnerError::Config(format!("bad stop time {t_stop}")));
            }
            if !(alpha_target.is_finite() && *alpha_target > 0.0 && *alpha_target < 1.0) {
                return Err(RunnerError::Config(format!("bad target factor {alpha_target}")));
            }
        }
        ExperimentKind::ToyDistill { setting } => match setting {
            ToySetting::MlpIdx | ToySetting::CnnPatches => {
                if ds.idx_train_images.is_none()
                    || ds.idx_train_labels.is_none()
                    || ds.idx_test_images.is_none()
                    || ds.idx_test_labels.is_none()
                {
                    return Err(RunnerError::Config(
                        "IDX settings need all four idx_* paths".to_string(),
                    ));
                }
            }
            ToySetting::RandomFeaturesNoisy | ToySetting::Synthetic => {
                if ds.classes < 2 || ds.dim == 0 || ds.train_count == 0 {
                    return Err(RunnerError::Config(
                        "synthetic data needs classes >= 2, dim >= 1, train_count >= 1"
                            .to_string(),
                    ));
                }
            }
        },
        ExperimentKind::InterpolationStudy { early_epochs, .. } => {
            let full = match config.teacher.duration {
                TrainDuration::Epochs(e) => e,
                TrainDuration::Steps(_) => {
                    return Err(RunnerError::Config(
                        "interpolation study needs the teacher budget in epochs".to_string(),
                    ));
                }
            };
            if *early_epochs == 0 || *early_epochs > full {
                return Err(RunnerError::Config(format!(
                    "early_epochs must be in 1..={full}, got {early_epochs}"
                )));
            }
        }
        ExperimentKind::LossSwitchStudy { .. } => {}
    }
    Ok(())
}

pub fn config_digest(config: &ExperimentConfig) -> Result<String, RunnerError> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(config)?)))
}

/// Runs the experiment. Pre-run validation fails fast; failures inside a
/// stage still write the manifest, with the stage name and error recorded.
pub fn run(config: &ExperimentConfig) -> Result<RunManifest, RunnerError> {
    validate_config(config)?;
    with_manifest(config, execute)
}

/// Runs only the teacher stage of a training config: dataset, teacher
/// training, checkpoints, probability table, accuracy report.
pub fn run_teacher(config: &ExperimentConfig) -> Result<RunManifest, RunnerError> {
    validate_config(config)?;
    let setting = match &config.kind {
        ExperimentKind::ToyDistill { setting } => setting.clone(),
        _ => {
            return Err(RunnerError::Config(
                "teacher training needs a toy_distill config".to_string(),
            ));
        }
    };
    with_manifest(config, move |config, emitter, seed_map, stage| {
        let mut seeds = StageSeeds { master: config.master_seed, map: seed_map };
        let ctx = toy_context(config, &setting, emitter, &mut seeds, stage)?;
        *stage = "teacher".to_string();
        let init = init_params(&ctx.spec, ctx.teacher_plan.seed)?;
        let (teacher_final, checkpoints) = train(
            &ctx.spec,
            &init,
            &ctx.teacher_plan,
            &ctx.train_set.inputs,
            &ctx.train_set.labels,
            None,
            &ctx.cadence,
        )?;
        *stage = "accuracy".to_string();
        let (tr, te) = accuracy_pair(&ctx.spec, &teacher_final, &ctx.train_set, &ctx.test_set)?;
        let mut acc = String::from("model,train_acc,test_acc\n");
        acc.push_str(&format!("teacher,{tr},{te}\n"));
        emitter.write("accuracy.csv", acc.as_bytes())?;
        *stage = "checkpoints".to_string();
        persist_checkpoints(emitter, &ctx.spec, "teacher", &checkpoints)?;
        *stage = "probs".to_string();
        let table = probtable_from_model(
            &ctx.spec,
            &teacher_final,
            &ctx.train_set.inputs,
            ProbSource {
                model: "teacher".to_string(),
                step: ctx.teacher_plan.total_steps(ctx.train_set.len()),
            },
        )?;
        emitter.write(
            "teacher_probs.csv",
            prob_table_csv(&table, &ctx.train_set.labels, ctx.train_set.clean_labels.as_deref())
                .as_bytes(),
        )
    })
}

fn with_manifest(
    config: &ExperimentConfig,
    body: impl FnOnce(
        &ExperimentConfig,
        &mut Emitter,
        &mut BTreeMap<String, u64>,
        &mut String,
    ) -> Result<(), RunnerError>,
) -> Result<RunManifest, RunnerError> {
    let started = std::time::Instant::now();
    let mut emitter = Emitter::new(&config.output_dir)?;
    let mut seeds = BTreeMap::new();
    let mut stage = String::from("setup");
    let result = body(config, &mut emitter, &mut seeds, &mut stage);
    let manifest = RunManifest {
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        config_digest: config_digest(config)?,
        per_stage_seeds: seeds,
        artifacts: emitter.records.clone(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        failing_stage: result.as_ref().err().map(|_| stage.clone()),
        error: result.as_ref().err().map(|e| e.to_string()),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(config.output_dir.join("manifest.json"), bytes)?;
    result.map(|_| manifest)
}

struct StageSeeds<'a> {
    master: u64,
    map: &'a mut BTreeMap<String, u64>,
}

impl StageSeeds<'_> {
    fn get(&mut self, stage: &str) -> u64 {
        let seed = stage_seed(self.master, stage);
        self.map.insert(stage.to_string(), seed);
        seed
    }
}

fn execute(
    config: &ExperimentConfig,
    emitter: &mut Emitter,
    seed_map: &mut BTreeMap<String, u64>,
    stage: &mut String,
) -> Result<(), RunnerError> {
    let mut seeds = StageSeeds { master: config.master_seed, map: seed_map };
    match &config.kind {
        ExperimentKind::TheoremSweep { tuples } => {
            *stage = "sweep".to_string();
            let samples = theorem_sweep(*tuples, seeds.get("sweep"))?;
            emitter.write("sweep.csv", sweep_csv(&samples).as_bytes())
        }
        ExperimentKind::LinearTrace { lambdas, t_stop, alpha_target, steps } => {
            *stage = "trace".to_string();
            let problem = GradFlowProblem::from_spectrum(lambdas, *t_stop)?;
            let times: Vec<f64> = (0..*steps)
                .map(|i| t_stop * i as f64 / (*steps - 1) as f64)
                .collect();
            let traces = closed_form_traces(&problem, &times)?;
            emitter.write("trace.csv", linear_trace_csv(&traces).as_bytes())?;
            let ratio = verify_theorem(&problem, 0, 1, *alpha_target)?;
            let mut report = String::from("lambda1,lambda2,T,alpha_target,ratio\n");
            report.push_str(&format!(
                "{},{},{},{},{}\n",
                lambdas[0], lambdas[1], t_stop, alpha_target, ratio
            ));
            emitter.write("ratio.csv", report.as_bytes())
        }
        ExperimentKind::ToyDistill { setting } => {
            run_toy(config, setting, emitter, &mut seeds, stage)
        }
        ExperimentKind::InterpolationStudy { early_epochs, switch_at, switch_window } => {
            run_interpolation(
                config,
                *early_epochs,
                *switch_at,
                *switch_window,
                emitter,
                &mut seeds,
                stage,
            )
        }
        ExperimentKind::LossSwitchStudy { switch_at, switch_window } => {
            run_loss_switch(config, *switch_at, *switch_window, emitter, &mut seeds, stage)
        }
    }
}

fn cadence_of(config: &ExperimentConfig) -> CheckpointCadence {
    match config.checkpoint_every {
        Some(s) => CheckpointCadence::EveryK(s),
        None => CheckpointCadence::LogSpaced(20),
    }
}

/// Builds train/test sets for a training experiment; synthetic test sets
/// share the cluster geometry (same means seed) but draw fresh samples.
fn load_training_data(
    config: &ExperimentConfig,
    synthetic: bool,
    seeds: &mut StageSeeds<'_>,
) -> Result<(LabeledSet, LabeledSet), RunnerError> {
    let ds = &config.dataset;
    let (mut train, test) = if synthetic {
        let means = seeds.get("dataset_means");
        let train = make_gaussian_clusters(
            ds.classes,
            ds.dim,
            ds.train_count,
            ds.spread,
            means,
            seeds.get("dataset_train"),
            Split::Train,
        )?;
        let test = make_gaussian_clusters(
            ds.classes,
            ds.dim,
            ds.test_count,
            ds.spread,
            means,
            seeds.get("dataset_test"),
            Split::Test,
        )?;
        (train, test)
    } else {
        let train = load_idx(
            ds.idx_train_images.as_ref().expect("validated"),
            ds.idx_train_labels.as_ref().expect("validated"),
            Split::Train,
        )?;
        let test = load_idx(
            ds.idx_test_images.as_ref().expect("validated"),
            ds.idx_test_labels.as_ref().expect("validated"),
            Split::Test,
        )?;
        (train, test)
    };
    if ds.noise_fraction > 0.0 {
        inject_label_noise(&mut train, ds.noise_fraction, seeds.get("noise"))?;
    }
    Ok((train, test))
}

fn toy_spec(
    setting: &ToySetting,
    train: &LabeledSet,
    model: &ModelConfig,
    seeds: &mut StageSeeds<'_>,
) -> Result<NetworkSpec, RunnerError> {
    let dim = train.inputs.cols();
    let classes = train.num_classes;
    let spec = match setting {
        ToySetting::Synthetic | ToySetting::MlpIdx => mlp_spec(dim, model.hidden, classes),
        ToySetting::RandomFeaturesNoisy => NetworkSpec {
            input: InputShape::Flat(dim),
            layers: vec![
                Layer::RandomFeatures { count: model.features, seed: seeds.get("features") },
                Layer::Relu,
                Layer::Dense { input: model.features, output: classes },
            ],
            num_classes: classes,
        },
        ToySetting::CnnPatches => {
            let (h, w, c) = train.image_shape.ok_or_else(|| {
                RunnerError::Config("convolutional setting needs image data".to_string())
            })?;
            let k = model.kernel;
            if k == 0 || k > h || k > w {
                return Err(RunnerError::Config(format!(
                    "kernel {k} does not fit {h}x{w} images"
                )));
            }
            let (ch, cw) = (h - k + 1, w - k + 1);
            let (ph, pw) = (ch / model.pool, cw / model.pool);
            if ph == 0 || pw == 0 {
                return Err(RunnerError::Config(format!(
                    "pool {} does not fit the {ch}x{cw} feature map",
                    model.pool
                )));
            }
            let flat = ph * pw * model.conv_channels;
            NetworkSpec {
                input: InputShape::Image { h, w, c },
                layers: vec![
                    Layer::Conv2d {
                        kernel: (k, k),
                        in_channels: c,
                        out_channels: model.conv_channels,
                    },
                    Layer::Relu,
                    Layer::MaxPool { h: model.pool, w: model.pool },
                    Layer::Flatten,
                    Layer::Dense { input: flat, output: classes },
                ],
                num_classes: classes,
            }
        }
    };
    spec.validate()?;
    Ok(spec)
}

fn mlp_spec(dim: usize, hidden: usize, classes: usize) -> NetworkSpec {
    NetworkSpec {
        input: InputShape::Flat(dim),
        layers: vec![
            Layer::Dense { input: dim, output: hidden },
            Layer::Relu,
            Layer::Dense { input: hidden, output: classes },
        ],
        num_classes: classes,
    }
}

/// The representation whose second-moment eigendirections the trace and
/// truncation diagnostics are read in.
fn diagnostic_basis(
    setting: &ToySetting,
    train: &LabeledSet,
    spec: &NetworkSpec,
    params: &crate::nn::NetworkParams,
    model: &ModelConfig,
    seeds: &mut StageSeeds<'_>,
) -> Result<EigenBasis, RunnerError> {
    match setting {
        ToySetting::Synthetic | ToySetting::MlpIdx => {
            Ok(EigenBasis::from_rows(&train.inputs, false, BasisProvenance::RawInput)?)
        }
        ToySetting::CnnPatches => {
            let count = train.len().max(256);
            let patches =
                sample_patches(train, model.kernel, model.kernel, count, seeds.get("patches"))?;
            Ok(EigenBasis::from_rows(&patches, false, BasisProvenance::Patch)?)
        }
        ToySetting::RandomFeaturesNoisy => {
            // Feature activations after the frozen projection; identical for
            // every model sharing the spec, so the teacher's copy serves all.
            let trace = forward_trace(spec, params, &train.inputs)?;
            let feats = &trace.activations[2];
            Ok(EigenBasis::from_rows(feats, false, BasisProvenance::TeacherHidden)?)
        }
    }
}

fn trained_layer_index(
    params: &crate::nn::NetworkParams,
    basis: &EigenBasis,
) -> Result<usize, RunnerError> {
    params
        .layers
        .iter()
        .position(|lp| lp.weights.rows() == basis.dim())
        .ok_or_else(|| {
            RunnerError::Config(format!(
                "no weight layer matches the {}-dimensional basis",
                basis.dim()
            ))
        })
}

fn persist_checkpoints(
    emitter: &mut Emitter,
    spec: &NetworkSpec,
    tag: &str,
    checkpoints: &[Checkpoint],
) -> Result<(), RunnerError> {
    let dir = format!("checkpoints/{tag}");
    fs::create_dir_all(emitter.path(&dir))?;
    let spec_rel = format!("{dir}/spec.json");
    let mut spec_bytes = serde_json::to_vec_pretty(spec)?;
    spec_bytes.push(b'\n');
    emitter.write(&spec_rel, &spec_bytes)?;
    for ckpt in checkpoints {
        let rel = format!("{dir}/step_{:08}.kddl", ckpt.step);
        save_checkpoint(&emitter.path(&rel), spec, ckpt.step, &ckpt.params)?;
        emitter.record_file(&rel)?;
    }
    Ok(())
}

fn accuracy_pair(
    spec: &NetworkSpec,
    params: &crate::nn::NetworkParams,
    train: &LabeledSet,
    test: &LabeledSet,
) -> Result<(f64, f64), RunnerError> {
    Ok((
        accuracy(spec, params, &train.inputs, &train.labels)?,
        accuracy(spec, params, &test.inputs, &test.labels)?,
    ))
}

struct ToyContext {
    train_set: LabeledSet,
    test_set: LabeledSet,
    spec: NetworkSpec,
    teacher_plan: TrainPlan,
    student_plan: TrainPlan,
    cadence: CheckpointCadence,
}

fn toy_context(
    config: &ExperimentConfig,
    setting: &ToySetting,
    emitter: &mut Emitter,
    seeds: &mut StageSeeds<'_>,
    stage: &mut String,
) -> Result<ToyContext, RunnerError> {
    *stage = "dataset".to_string();
    let synthetic =
        matches!(setting, ToySetting::Synthetic | ToySetting::RandomFeaturesNoisy);
    let (train_set, test_set) = load_training_data(config, synthetic, seeds)?;
    train_set.write_csv(&emitter.path("dataset.csv"))?;
    emitter.record_file("dataset.csv")?;

    *stage = "architecture".to_string();
    let spec = toy_spec(setting, &train_set, &config.model, seeds)?;
    let mut teacher_plan = config.teacher.clone();
    teacher_plan.seed = seeds.get("teacher");
    let mut student_plan = config.student.clone();
    student_plan.seed = seeds.get("student");
    Ok(ToyContext {
        train_set,
        test_set,
        spec,
        teacher_plan,
        student_plan,
        cadence: cadence_of(config),
    })
}

fn run_toy(
    config: &ExperimentConfig,
    setting: &ToySetting,
    emitter: &mut Emitter,
    seeds: &mut StageSeeds<'_>,
    stage: &mut String,
) -> Result<(), RunnerError> {
    let ctx = toy_context(config, setting, emitter, seeds, stage)?;
    let ToyContext { train_set, test_set, spec, teacher_plan, student_plan, cadence } = ctx;

    *stage = "teacher".to_string();
    let outcome = distill_pipeline(
        &spec,
        &spec,
        &train_set.inputs,
        &train_set.labels,
        &teacher_plan,
        &student_plan,
        &cadence,
    )?;

    *stage = "student_onehot".to_string();
    // Same seed and init as the distilled student: the two runs differ only
    // in the loss, which is the comparison the accuracy table makes.
    let mut onehot_plan = student_plan.clone();
    onehot_plan.mode = LossMode::OneHot;
    let (onehot_final, onehot_checkpoints) = train(
        &spec,
        &outcome.student_init,
        &onehot_plan,
        &train_set.inputs,
        &train_set.labels,
        None,
        &cadence,
    )?;

    *stage = "accuracy".to_string();
    let (tt, te) = accuracy_pair(&spec, &outcome.teacher_final, &train_set, &test_set)?;
    let (ot, oe) = accuracy_pair(&spec, &onehot_final, &train_set, &test_set)?;
    let (dt, de) = accuracy_pair(&spec, &outcome.student_final, &train_set, &test_set)?;
    let mut acc = String::from(
        "teacher_train_acc,teacher_test_acc,onehot_train_acc,onehot_test_acc,distilled_train_acc,distilled_test_acc\n",
    );
    acc.push_str(&format!("{tt},{te},{ot},{oe},{dt},{de}\n"));
    emitter.write("accuracy.csv", acc.as_bytes())?;

    *stage = "checkpoints".to_string();
    persist_checkpoints(emitter, &spec, "teacher", &outcome.teacher_checkpoints)?;
    persist_checkpoints(emitter, &spec, "distilled", &outcome.student_checkpoints)?;
    persist_checkpoints(emitter, &spec, "onehot", &onehot_checkpoints)?;

    *stage = "probs".to_string();
    let teacher_table = outcome.prob_table;
    let total = student_plan.total_steps(train_set.len());
    let student_table = probtable_from_model(
        &spec,
        &outcome.student_final,
        &train_set.inputs,
        ProbSource { model: "distilled".to_string(), step: total },
    )?;
    let cleans = train_set.clean_labels.as_deref();
    emitter.write(
        "teacher_probs.csv",
        prob_table_csv(&teacher_table, &train_set.labels, cleans).as_bytes(),
    )?;
    emitter.write(
        "student_probs.csv",
        prob_table_csv(&student_table, &train_set.labels, cleans).as_bytes(),
    )?;

    let d = &config.diagnostics;
    if d.scatter || d.slopes || d.metrics {
        *stage = "scatter".to_string();
        let pairs =
            pairs_from_tables(&teacher_table, &student_table, &train_set.labels, cleans)?;
        let records = build_scatter(&pairs, ScatterMode::TeacherPredicted)?;
        if d.scatter {
            emitter.write("scatter.csv", scatter_csv(&records).as_bytes())?;
            emitter.write("scatter_density.csv", density_csv(&records).as_bytes())?;
        }
        if d.slopes {
            *stage = "slopes".to_string();
            let mut fits = Vec::new();
            for band in [Band::Bottom, Band::Top] {
                match slope_by_percentile(&records, band, d.slope_fraction) {
                    Ok(fit) => fits.push(fit),
                    Err(DiagError::DegenerateFit) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            emitter.write("slopes.csv", slopes_csv(&fits).as_bytes())?;
        }
        if d.metrics {
            *stage = "metrics".to_string();
            let records = deviation_metrics(&pairs)?;
            emitter.write("metrics.csv", metrics_csv(&records).as_bytes())?;
        }
    }

    if d.eigentrace_pairs > 0 || !d.truncation_k.is_empty() {
        *stage = "basis".to_string();
        let basis = diagnostic_basis(
            setting,
            &train_set,
            &spec,
            &outcome.teacher_final,
            &config.model,
            seeds,
        )?;
        let layer = trained_layer_index(&outcome.teacher_final, &basis)?;

        if d.eigentrace_pairs > 0 {
            *stage = "eigentrace".to_string();
            let sampled =
                eigenpair_sampler(seeds.get("eigenpairs"), basis.len(), d.eigentrace_pairs)?;
            let mut wanted: Vec<usize> =
                sampled.iter().flat_map(|&(i, j)| [i, j]).collect();
            wanted.sort_unstable();
            wanted.dedup();
            let teacher_trace =
                eigentrace(&outcome.teacher_checkpoints, &basis, layer, &wanted)?;
            let student_trace =
                eigentrace(&outcome.student_checkpoints, &basis, layer, &wanted)?;
            emitter.write(
                "trace.csv",
                eigentrace_csv(&[("teacher", &teacher_trace), ("distilled", &student_trace)])
                    .as_bytes(),
            )?;
            let pos = |dir: usize| wanted.iter().position(|&d| d == dir).expect("sampled");
            let mut scores = String::from("direction_top,direction_low,score\n");
            for (i, j) in sampled {
                let score = exaggeration_score(
                    teacher_trace.series(pos(i)),
                    teacher_trace.series(pos(j)),
                    student_trace.series(pos(i)),
                    student_trace.series(pos(j)),
                )?;
                scores.push_str(&format!("{i},{j},{score}\n"));
            }
            emitter.write("scores.csv", scores.as_bytes())?;
        }

        if !d.truncation_k.is_empty() {
            *stage = "truncation".to_string();
            let mut out = String::from("model,k_top,clean_acc,flipped_acc\n");
            for (tag, params) in
                [("teacher", &outcome.teacher_final), ("distilled", &outcome.student_final)]
            {
                for &k in &d.truncation_k {
                    let (clean, flipped) =
                        truncation_accuracy(&spec, params, &basis, &train_set, k)?;
                    out.push_str(&format!("{tag},{k},{clean},{flipped}\n"));
                }
            }
            emitter.write("truncation.csv", out.as_bytes())?;
        }
    }
    Ok(())
}

fn resolve_switch_step(switch_at: u64, total: u64) -> u64 {
    if switch_at == 0 {
        total / 2
    } else {
        switch_at
    }
}

fn switched_mode(base: &LossMode, at_step: u64, window: u64) -> LossMode {
    LossMode::Switched {
        from: Box::new(base.clone()),
        to: Box::new(LossMode::OneHot),
        at_step,
        window,
    }
}

fn run_interpolation(
    config: &ExperimentConfig,
    early_epochs: u64,
    switch_at: u64,
    switch_window: u64,
    emitter: &mut Emitter,
    seeds: &mut StageSeeds<'_>,
    stage: &mut String,
) -> Result<(), RunnerError> {
    *stage = "dataset".to_string();
    let (train_set, test_set) = load_training_data(config, true, seeds)?;
    train_set.write_csv(&emitter.path("dataset.csv"))?;
    emitter.record_file("dataset.csv")?;
    let spec = mlp_spec(train_set.inputs.cols(), config.model.hidden, train_set.num_classes);
    spec.validate()?;
    let cadence = CheckpointCadence::EndsOnly;
    let n = train_set.len();

    // Both teachers are the same stage run to different budgets, so they
    // share one seed; likewise each student variant pair shares one seed.
    *stage = "teacher_full".to_string();
    let mut teacher_plan = config.teacher.clone();
    teacher_plan.seed = seeds.get("teacher");
    let teacher_init = init_params(&spec, teacher_plan.seed)?;
    let (teacher_full, _) = train(
        &spec,
        &teacher_init,
        &teacher_plan,
        &train_set.inputs,
        &train_set.labels,
        None,
        &cadence,
    )?;
    *stage = "teacher_early".to_string();
    let mut early_plan = teacher_plan.clone();
    early_plan.duration = TrainDuration::Epochs(early_epochs);
    let (teacher_early, _) = train(
        &spec,
        &teacher_init,
        &early_plan,
        &train_set.inputs,
        &train_set.labels,
        None,
        &cadence,
    )?;

    *stage = "probs".to_string();
    let table_full = probtable_from_model(
        &spec,
        &teacher_full,
        &train_set.inputs,
        ProbSource { model: "teacher_full".to_string(), step: teacher_plan.total_steps(n) },
    )?;
    let table_early = probtable_from_model(
        &spec,
        &teacher_early,
        &train_set.inputs,
        ProbSource { model: "teacher_early".to_string(), step: early_plan.total_steps(n) },
    )?;

    let mut student_plan = config.student.clone();
    student_plan.seed = seeds.get("student");
    let student_init = init_params(&spec, student_plan.seed)?;
    let total = student_plan.total_steps(n);
    let at_step = resolve_switch_step(switch_at, total);
    let mut switched_plan = student_plan.clone();
    switched_plan.mode = switched_mode(&student_plan.mode, at_step, switch_window);

    let mut rows = vec![
        ("teacher_full", accuracy_pair(&spec, &teacher_full, &train_set, &test_set)?),
        ("teacher_early", accuracy_pair(&spec, &teacher_early, &train_set, &test_set)?),
    ];
    for (tag, plan, table) in [
        ("student_full", &student_plan, &table_full),
        ("student_early", &student_plan, &table_early),
        ("student_full_switched", &switched_plan, &table_full),
        ("student_early_switched", &switched_plan, &table_early),
    ] {
        *stage = tag.to_string();
        let (params, _) = train(
            &spec,
            &student_init,
            plan,
            &train_set.inputs,
            &train_set.labels,
            Some(table),
            &cadence,
        )?;
        rows.push((tag, accuracy_pair(&spec, &params, &train_set, &test_set)?));
    }

    *stage = "report".to_string();
    let mut out = String::from("model,train_acc,test_acc\n");
    for (tag, (tr, te)) in rows {
        out.push_str(&format!("{tag},{tr},{te}\n"));
    }
    emitter.write("interpolation.csv", out.as_bytes())
}

fn run_loss_switch(
    config: &ExperimentConfig,
    switch_at: u64,
    switch_window: u64,
    emitter: &mut Emitter,
    seeds: &mut StageSeeds<'_>,
    stage: &mut String,
) -> Result<(), RunnerError> {
    *stage = "dataset".to_string();
    let (train_set, test_set) = load_training_data(config, true, seeds)?;
    train_set.write_csv(&emitter.path("dataset.csv"))?;
    emitter.record_file("dataset.csv")?;
    let spec = mlp_spec(train_set.inputs.cols(), config.model.hidden, train_set.num_classes);
    spec.validate()?;
    let cadence = cadence_of(config);
    let n = train_set.len();

    *stage = "teacher".to_string();
    let mut teacher_plan = config.teacher.clone();
    teacher_plan.seed = seeds.get("teacher");
    let teacher_init = init_params(&spec, teacher_plan.seed)?;
    let (teacher_final, _) = train(
        &spec,
        &teacher_init,
        &teacher_plan,
        &train_set.inputs,
        &train_set.labels,
        None,
        &cadence,
    )?;
    let table = probtable_from_model(
        &spec,
        &teacher_final,
        &train_set.inputs,
        ProbSource { model: "teacher".to_string(), step: teacher_plan.total_steps(n) },
    )?;

    let mut student_plan = config.student.clone();
    student_plan.seed = seeds.get("student");
    let student_init = init_params(&spec, student_plan.seed)?;
    let total = student_plan.total_steps(n);
    let at_step = resolve_switch_step(switch_at, total);
    let mut switched_plan = student_plan.clone();
    switched_plan.mode = switched_mode(&student_plan.mode, at_step, switch_window);

    let mut out = String::from("step,model_tag,train_acc,test_acc\n");
    for (tag, plan) in [("pure", &student_plan), ("switched", &switched_plan)] {
        *stage = format!("student_{tag}");
        let (_, checkpoints) = train(
            &spec,
            &student_init,
            plan,
            &train_set.inputs,
            &train_set.labels,
            Some(&table),
            &cadence,
        )?;
        for ckpt in &checkpoints {
            let (tr, te) = accuracy_pair(&spec, &ckpt.params, &train_set, &test_set)?;
            out.push_str(&format!("{},{tag},{tr},{te}\n", ckpt.step));
        }
    }
    *stage = "report".to_string();
    emitter.write("switch.csv", out.as_bytes())
}

/// Recomputes scatter, slope, and deviation CSVs from stored probability
/// tables in a finished run directory.
pub fn diagnose_dir(run_dir: &Path, slope_fraction: f64) -> Result<Vec<String>, RunnerError> {
    if !(slope_fraction > 0.0 && slope_fraction <= 1.0) {
        return Err(RunnerError::Config(format!(
            "slope_fraction {slope_fraction} is outside (0, 1]"
        )));
    }
    let (teacher, t_labels, t_cleans) = read_prob_csv(&run_dir.join("teacher_probs.csv"))?;
    let (student, s_labels, _) = read_prob_csv(&run_dir.join("student_probs.csv"))?;
    if t_labels != s_labels {
        return Err(RunnerError::Config(
            "teacher and student tables disagree on labels".to_string(),
        ));
    }
    let pairs = pairs_from_tables(&teacher, &student, &t_labels, t_cleans.as_deref())?;
    let records = build_scatter(&pairs, ScatterMode::TeacherPredicted)?;
    let mut fits = Vec::new();
    for band in [Band::Bottom, Band::Top] {
        match slope_by_percentile(&records, band, slope_fraction) {
            Ok(fit) => fits.push(fit),
            Err(DiagError::DegenerateFit) => {}
            Err(e) => return Err(e.into()),
        }
    }
    let metrics = deviation_metrics(&pairs)?;
    let mut written = Vec::new();
    for (name, bytes) in [
        ("scatter.csv", scatter_csv(&records)),
        ("scatter_density.csv", density_csv(&records)),
        ("slopes.csv", slopes_csv(&fits)),
        ("metrics.csv", metrics_csv(&metrics)),
    ] {
        fs::write(run_dir.join(name), bytes.as_bytes())?;
        written.push(name.to_string());
    }
    Ok(written)
}

/// Rebuilds an eigentrace from a run directory: dataset CSV for the basis,
/// checkpoint directory for the trajectory.
pub fn eigentrace_dir(
    run_dir: &Path,
    model_tag: &str,
    n_pairs: usize,
    seed: u64,
) -> Result<(String, Vec<(usize, usize)>), RunnerError> {
    let set = read_dataset_csv(&run_dir.join("dataset.csv"))?;
    let ckpt_dir = run_dir.join("checkpoints").join(model_tag);
    let spec_text = fs::read_to_string(ckpt_dir.join("spec.json"))?;
    let spec: NetworkSpec = serde_json::from_str(&spec_text)?;
    let checkpoints = crate::nn::load_checkpoint_dir(&ckpt_dir, &spec)?;
    if checkpoints.is_empty() {
        return Err(RunnerError::Config(format!(
            "no checkpoints under {}",
            ckpt_dir.display()
        )));
    }
    let basis = EigenBasis::from_rows(&set.inputs, false, BasisProvenance::RawInput)?;
    let layer = trained_layer_index(&checkpoints[0].params, &basis)?;
    let sampled = eigenpair_sampler(seed, basis.len(), n_pairs)?;
    let mut wanted: Vec<usize> = sampled.iter().flat_map(|&(i, j)| [i, j]).collect();
    wanted.sort_unstable();
    wanted.dedup();
    let trace = eigentrace(&checkpoints, &basis, layer, &wanted)?;
    Ok((eigentrace_csv(&[(model_tag, &trace)]), sampled))
}

#[cfg(test)]
mod tests;
