//! Command-line front end: standalone linear-dynamics checks plus the
//! config-driven experiment runner. Data goes to files, messages to stderr;
//! exit code 1 means the invocation was invalid, 2 means a run failed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kddyn_core::gradflow::{closed_form_traces, theorem_sweep, verify_theorem, GradFlowProblem};
use kddyn_core::runner::{self, ExperimentConfig, ExperimentKind, RunnerError};

#[derive(Parser)]
#[command(
    name = "kddyn",
    version,
    about = "Distillation dynamics laboratory",
    after_help = "When KDDYN_SEED is set it overrides master_seed in any loaded config."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep random two-rate problems; fails if any matched ratio reaches 1.
    VerifyTheorem {
        /// How many random problems to draw.
        #[arg(long, default_value_t = 1000)]
        tuples: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output CSV path.
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Trace one linear problem's closed forms and report the slow-direction ratio.
    Gradflow {
        /// Comma-separated decreasing rates, e.g. 2,1.
        #[arg(long, value_delimiter = ',')]
        lambda: Vec<f64>,
        /// Teacher stop time (the student trains to the same horizon).
        #[arg(long = "T")]
        t_stop: f64,
        /// Top-direction convergence factor at which the models are compared.
        #[arg(long)]
        alpha: f64,
        /// Grid points across [0, T].
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Output CSV path.
        #[arg(long, default_value = "trace.csv")]
        out: PathBuf,
    },
    /// Train only the teacher stage of a toy_distill config.
    Train {
        config: PathBuf,
        /// Dotted-path config override, e.g. -O student.tau=4 (repeatable).
        #[arg(long = "override", short = 'O', value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the full teacher-student pipeline of a toy_distill config.
    Distill {
        config: PathBuf,
        #[arg(long = "override", short = 'O', value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Recompute scatter, slope, and deviation CSVs from stored tables.
    Diagnose {
        #[arg(long)]
        run_dir: PathBuf,
        /// Percentile band width for the slope fits.
        #[arg(long, default_value_t = 0.25)]
        slope_fraction: f64,
    },
    /// Rebuild eigendirection traces from a run's stored checkpoints.
    Eigentrace {
        #[arg(long)]
        run_dir: PathBuf,
        /// Which checkpoint set to trace (teacher, distilled, onehot).
        #[arg(long, default_value = "distilled")]
        model: String,
        #[arg(long, default_value_t = 4)]
        pairs: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output CSV path; defaults to eigentrace.csv inside the run dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute any experiment config end to end.
    Run {
        config: PathBuf,
        #[arg(long = "override", short = 'O', value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

fn validation(e: impl std::fmt::Display) -> Failure {
    Failure::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn classify(e: RunnerError) -> Failure {
    match e {
        RunnerError::Config(_) | RunnerError::TooManyPairs { .. } => validation(e),
        other => runtime(other),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::VerifyTheorem { tuples, seed, out } => {
            if tuples == 0 {
                return Err(Failure::Validation("--tuples must be at least 1".to_string()));
            }
            let samples = theorem_sweep(tuples, seed).map_err(runtime)?;
            std::fs::write(&out, runner::sweep_csv(&samples)).map_err(runtime)?;
            let max = samples.iter().map(|s| s.ratio).fold(f64::NEG_INFINITY, f64::max);
            eprintln!("{tuples} tuples swept, max ratio {max}, wrote {}", out.display());
            if max >= 1.0 {
                return Err(Failure::Runtime(format!(
                    "matched-convergence ratio reached {max}"
                )));
            }
            Ok(())
        }
        Command::Gradflow { lambda, t_stop, alpha, steps, out } => {
            if lambda.len() < 2 {
                return Err(Failure::Validation(
                    "--lambda needs at least two comma-separated rates".to_string(),
                ));
            }
            if steps < 2 {
                return Err(Failure::Validation("--steps must be at least 2".to_string()));
            }
            let problem = GradFlowProblem::from_spectrum(&lambda, t_stop).map_err(validation)?;
            let times: Vec<f64> =
                (0..steps).map(|i| t_stop * i as f64 / (steps - 1) as f64).collect();
            let traces = closed_form_traces(&problem, &times).map_err(runtime)?;
            std::fs::write(&out, runner::linear_trace_csv(&traces)).map_err(runtime)?;
            let ratio = verify_theorem(&problem, 0, 1, alpha).map_err(validation)?;
            eprintln!("ratio {ratio}");
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::Train { config, overrides } => {
            let config = load_config(&config, &overrides)?;
            runner::run_teacher(&config).map_err(classify)?;
            eprintln!("teacher run complete under {}", config.output_dir.display());
            Ok(())
        }
        Command::Distill { config, overrides } => {
            let config = load_config(&config, &overrides)?;
            if !matches!(config.kind, ExperimentKind::ToyDistill { .. }) {
                return Err(Failure::Validation(
                    "distill needs a toy_distill config".to_string(),
                ));
            }
            let manifest = runner::run(&config).map_err(classify)?;
            eprintln!(
                "distillation complete, {} artifacts under {}",
                manifest.artifacts.len(),
                config.output_dir.display()
            );
            Ok(())
        }
        Command::Diagnose { run_dir, slope_fraction } => {
            let written = runner::diagnose_dir(&run_dir, slope_fraction).map_err(classify)?;
            eprintln!("recomputed {} under {}", written.join(", "), run_dir.display());
            Ok(())
        }
        Command::Eigentrace { run_dir, model, pairs, seed, out } => {
            let (csv, sampled) =
                runner::eigentrace_dir(&run_dir, &model, pairs, seed).map_err(classify)?;
            let out = out.unwrap_or_else(|| run_dir.join("eigentrace.csv"));
            std::fs::write(&out, csv).map_err(runtime)?;
            eprintln!("traced {} direction pairs to {}", sampled.len(), out.display());
            Ok(())
        }
        Command::Run { config, overrides } => {
            let config = load_config(&config, &overrides)?;
            let manifest = runner::run(&config).map_err(classify)?;
            eprintln!(
                "run complete, {} artifacts under {}",
                manifest.artifacts.len(),
                config.output_dir.display()
            );
            Ok(())
        }
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Failure::Validation(format!("cannot read config {}: {e}", path.display()))
    })?;
    let mut doc: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Validation(format!("config {}: {e}", path.display())))?;
    for spec in overrides {
        apply_override(&mut doc, spec).map_err(Failure::Validation)?;
    }
    apply_env_seed(&mut doc).map_err(Failure::Validation)?;
    serde_json::from_value(doc)
        .map_err(|e| Failure::Validation(format!("config {}: {e}", path.display())))
}

/// KDDYN_SEED wins over both the file and any --override.
fn apply_env_seed(doc: &mut serde_json::Value) -> Result<(), String> {
    match std::env::var("KDDYN_SEED") {
        Ok(raw) => {
            let seed: u64 = raw
                .trim()
                .parse()
                .map_err(|_| format!("KDDYN_SEED {raw:?} is not an unsigned integer"))?;
            if let Some(obj) = doc.as_object_mut() {
                obj.insert("master_seed".to_string(), seed.into());
            }
            Ok(())
        }
        Err(std::env::VarError::NotPresent) => Ok(()),
        Err(e) => Err(format!("KDDYN_SEED: {e}")),
    }
}

/// Applies one `dotted.path=value` override. Every path segment must
/// already exist in the document; values parse as JSON when they can and
/// fall back to strings.
fn apply_override(doc: &mut serde_json::Value, spec: &str) -> Result<(), String> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override {spec:?} is not KEY=VALUE"))?;
    if path.is_empty() {
        return Err(format!("override {spec:?} has an empty key"));
    }
    let segments: Vec<&str> = path.split('.').collect();
    let mut cursor = doc;
    for (i, seg) in segments.iter().enumerate() {
        let obj = cursor.as_object_mut().ok_or_else(|| {
            format!("override {path}: {:?} is not an object", segments[..i].join("."))
        })?;
        let entry = obj.get_mut(*seg).ok_or_else(|| {
            format!("override {path}: no such key {seg:?} (overrides only change existing keys)")
        })?;
        if i + 1 == segments.len() {
            *entry = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            return Ok(());
        }
        cursor = entry;
    }
    unreachable!("segments is nonempty")
}
