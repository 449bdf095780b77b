//! End-to-end checks on the compiled binary: exit codes, stderr routing,
//! override handling, and the env-seed escape hatch.

use std::path::Path;
use std::process::{Command, Output};

fn kddyn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kddyn"))
        .args(args)
        .current_dir(dir)
        .env_remove("KDDYN_SEED")
        .output()
        .expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tiny_config(dir: &Path, name: &str, out_subdir: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    let doc = serde_json::json!({
        "schema_version": 1,
        "name": "cli-toy",
        "kind": {"toy_distill": {"setting": "synthetic"}},
        "dataset": {
            "classes": 3, "dim": 6, "train_count": 24, "test_count": 24,
            "spread": 0.1, "noise_fraction": 0.25
        },
        "model": {"hidden": 16},
        "teacher": {
            "seed": 0, "batch_size": 8, "duration": {"epochs": 3},
            "optimizer": {"adam": {"lr": 0.01}}, "mode": "one_hot", "tau": 1.0
        },
        "student": {
            "seed": 0, "batch_size": 8, "duration": {"epochs": 3},
            "optimizer": {"adam": {"lr": 0.01}}, "mode": "distill", "tau": 2.0
        },
        "diagnostics": {"eigentrace_pairs": 2, "truncation_k": [4]},
        "output_dir": dir.join(out_subdir),
        "master_seed": 11
    });
    std::fs::write(&path, serde_json::to_vec_pretty(&doc).unwrap()).unwrap();
    path
}

#[test]
fn sweep_succeeds_and_reports_to_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let out = kddyn(&["verify-theorem", "--tuples", "50", "--seed", "7"], dir.path());
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert!(out.stdout.is_empty());
    assert!(stderr_of(&out).contains("50 tuples"));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);
    assert!(csv.starts_with("lambda1,lambda2,"));
}

#[test]
fn gradflow_prints_the_worked_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let out = kddyn(
        &["gradflow", "--lambda", "2,1", "--T", "1", "--alpha", "0.747645"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    let err = stderr_of(&out);
    let ratio_line = err.lines().find(|l| l.starts_with("ratio ")).expect("ratio line");
    let ratio: f64 = ratio_line.trim_start_matches("ratio ").parse().unwrap();
    assert!((ratio - 0.802925601).abs() < 1e-5, "ratio {ratio}");
    assert!(dir.path().join("trace.csv").exists());
}

#[test]
fn bad_flags_exit_one_and_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = kddyn(&["gradflow", "--lambda", "2,1"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    let help = kddyn(&["--help"], dir.path());
    assert_eq!(help.status.code(), Some(0));
    for sub in ["verify-theorem", "gradflow", "train", "distill", "diagnose", "eigentrace", "run"] {
        let h = kddyn(&[sub, "--help"], dir.path());
        assert_eq!(h.status.code(), Some(0), "{sub} --help");
    }
}

#[test]
fn missing_config_exits_one_with_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = kddyn(&["run", "nope.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("nope.json"));
}

#[test]
fn unknown_override_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "config.json", "out");
    let out = kddyn(
        &["run", config.to_str().unwrap(), "-O", "dataset.bogus=3"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("bogus"));
}

#[test]
fn run_distill_and_rederive_subcommands_work_together() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "config.json", "out");
    let run = kddyn(&["distill", config.to_str().unwrap()], dir.path());
    assert!(run.status.success(), "{}", stderr_of(&run));
    let run_dir = dir.path().join("out");
    assert!(run_dir.join("manifest.json").exists());
    assert!(run_dir.join("accuracy.csv").exists());

    let diag = kddyn(
        &["diagnose", "--run-dir", run_dir.to_str().unwrap()],
        dir.path(),
    );
    assert!(diag.status.success(), "{}", stderr_of(&diag));

    let trace = kddyn(
        &[
            "eigentrace",
            "--run-dir",
            run_dir.to_str().unwrap(),
            "--model",
            "teacher",
            "--pairs",
            "2",
        ],
        dir.path(),
    );
    assert!(trace.status.success(), "{}", stderr_of(&trace));
    assert!(run_dir.join("eigentrace.csv").exists());
}

#[test]
fn train_subcommand_stops_after_the_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "config.json", "teacher-only");
    let out = kddyn(&["train", config.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", stderr_of(&out));
    let run_dir = dir.path().join("teacher-only");
    assert!(run_dir.join("checkpoints/teacher").exists());
    assert!(!run_dir.join("checkpoints/distilled").exists());
    let accuracy = std::fs::read_to_string(run_dir.join("accuracy.csv")).unwrap();
    assert_eq!(accuracy.lines().count(), 2);
}

#[test]
fn distill_rejects_non_toy_configs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.json");
    let doc = serde_json::json!({
        "schema_version": 1,
        "name": "sweep",
        "kind": {"theorem_sweep": {"tuples": 5}},
        "output_dir": dir.path().join("out"),
        "master_seed": 3
    });
    std::fs::write(&path, serde_json::to_vec(&doc).unwrap()).unwrap();
    let out = kddyn(&["distill", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("toy_distill"));
}

#[test]
fn env_seed_overrides_the_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.json");
    let doc = serde_json::json!({
        "schema_version": 1,
        "name": "sweep",
        "kind": {"theorem_sweep": {"tuples": 5}},
        "output_dir": dir.path().join("a"),
        "master_seed": 3
    });
    std::fs::write(&path, serde_json::to_vec(&doc).unwrap()).unwrap();

    let base = kddyn(&["run", path.to_str().unwrap()], dir.path());
    assert!(base.status.success(), "{}", stderr_of(&base));
    let plain = std::fs::read_to_string(dir.path().join("a/sweep.csv")).unwrap();

    let seeded = Command::new(env!("CARGO_BIN_EXE_kddyn"))
        .args([
            "run",
            path.to_str().unwrap(),
            "-O",
            &format!("output_dir={}", dir.path().join("b").display()),
        ])
        .current_dir(dir.path())
        .env("KDDYN_SEED", "99")
        .output()
        .unwrap();
    assert!(seeded.status.success(), "{}", stderr_of(&seeded));
    let reseeded = std::fs::read_to_string(dir.path().join("b/sweep.csv")).unwrap();
    assert_ne!(plain, reseeded);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("b/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(
        manifest["per_stage_seeds"]["sweep"],
        serde_json::json!(kddyn_core::runner::stage_seed(99, "sweep"))
    );
}

#[test]
fn overrides_walk_nested_paths_and_parse_json_values() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "config.json", "out-a");
    let out = kddyn(
        &[
            "run",
            config.to_str().unwrap(),
            "-O",
            "student.tau=4",
            "-O",
            "dataset.noise_fraction=0.5",
            "-O",
            &format!("output_dir={}", dir.path().join("out-b").display()),
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out-b/manifest.json")).unwrap(),
    )
    .unwrap();
    assert!(manifest["failing_stage"].is_null());
}
