use super::*;
use crate::nn::Optimizer;

fn tiny_plan(epochs: u64, mode: LossMode, tau: f64) -> TrainPlan {
    TrainPlan {
        seed: 0,
        batch_size: 8,
        duration: TrainDuration::Epochs(epochs),
        optimizer: Optimizer::Adam { lr: 1e-2 },
        mode,
        tau,
        raw_teacher_probs: false,
    }
}

fn tiny_toy_config(dir: &Path, setting: ToySetting) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        name: "tiny".to_string(),
        kind: ExperimentKind::ToyDistill { setting },
        dataset: DatasetConfig {
            classes: 3,
            dim: 6,
            train_count: 24,
            test_count: 24,
            spread: 0.1,
            noise_fraction: 0.25,
            ..DatasetConfig::default()
        },
        model: ModelConfig { features: 48, hidden: 16, ..ModelConfig::default() },
        teacher: tiny_plan(4, LossMode::OneHot, 1.0),
        student: tiny_plan(4, LossMode::Distill, 2.0),
        diagnostics: DiagnosticsConfig::default(),
        checkpoint_every: None,
        output_dir: dir.to_path_buf(),
        master_seed: 11,
    }
}

#[test]
fn stage_seeds_are_stable_and_distinct() {
    let a = stage_seed(7, "teacher");
    assert_eq!(a, stage_seed(7, "teacher"));
    assert_ne!(a, stage_seed(7, "student"));
    assert_ne!(a, stage_seed(8, "teacher"));
    // splitmix64 reference vector: first output from seed 0
    assert_eq!(splitmix64(0), 0xE220A8397B1DCDAF);
}

#[test]
fn pair_sampler_handles_edges() {
    assert_eq!(eigenpair_sampler(1, 2, 1).unwrap(), vec![(0, 1)]);
    assert!(eigenpair_sampler(1, 2, 0).unwrap().is_empty());
    assert_eq!(eigenpair_sampler(5, 9, 4).unwrap(), eigenpair_sampler(5, 9, 4).unwrap());
    match eigenpair_sampler(1, 3, 4) {
        Err(RunnerError::TooManyPairs { requested: 4, available: 3 }) => {}
        other => panic!("expected TooManyPairs, got {other:?}"),
    }
    assert!(eigenpair_sampler(1, 1, 0).is_err());
}

#[test]
fn pair_sampler_covers_every_pair_once() {
    let mut pairs = eigenpair_sampler(3, 5, 10).unwrap();
    pairs.sort_unstable();
    let mut expect = Vec::new();
    for i in 0..5 {
        for j in i + 1..5 {
            expect.push((i, j));
        }
    }
    assert_eq!(pairs, expect);
}

#[test]
fn sweep_run_emits_hashed_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        name: "sweep".to_string(),
        kind: ExperimentKind::TheoremSweep { tuples: 40 },
        dataset: DatasetConfig::default(),
        model: ModelConfig::default(),
        teacher: default_teacher_plan(),
        student: default_student_plan(),
        diagnostics: DiagnosticsConfig::default(),
        checkpoint_every: None,
        output_dir: dir.path().join("out"),
        master_seed: 5,
    };
    let manifest = run(&config).unwrap();
    assert_eq!(manifest.artifacts.len(), 1);
    assert_eq!(manifest.artifacts[0].path, "sweep.csv");
    let bytes = fs::read(config.output_dir.join("sweep.csv")).unwrap();
    assert_eq!(hex::encode(Sha256::digest(&bytes)), manifest.artifacts[0].sha256);
    let text = String::from_utf8(bytes).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "lambda1,lambda2,T,alpha_target,t,t_tilde,ratio");
    let mut rows = 0;
    for line in lines {
        let ratio: f64 = line.split(',').last().unwrap().parse().unwrap();
        assert!(ratio < 1.0);
        rows += 1;
    }
    assert_eq!(rows, 40);
    assert!(fs::read_to_string(config.output_dir.join("manifest.json"))
        .unwrap()
        .contains("\"failing_stage\": null"));
}

#[test]
fn identical_configs_reproduce_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_toy_config(dir.path(), ToySetting::Synthetic);
    config.diagnostics.eigentrace_pairs = 2;
    config.diagnostics.truncation_k = vec![6, 2];
    let first = run(&config).unwrap();
    let snapshot: Vec<(String, Vec<u8>)> = first
        .artifacts
        .iter()
        .map(|a| (a.path.clone(), fs::read(dir.path().join(&a.path)).unwrap()))
        .collect();
    let second = run(&config).unwrap();
    assert_eq!(first.config_digest, second.config_digest);
    assert_eq!(first.per_stage_seeds, second.per_stage_seeds);
    assert_eq!(first.artifacts.len(), second.artifacts.len());
    for ((a, b), (path, bytes)) in first.artifacts.iter().zip(&second.artifacts).zip(&snapshot) {
        assert_eq!(&a.path, path);
        assert_eq!(a.path, b.path);
        assert_eq!(a.sha256, b.sha256, "artifact {} digest changed", a.path);
        assert_eq!(&fs::read(dir.path().join(path)).unwrap(), bytes, "{path} bytes changed");
    }
    assert!(first.wall_clock_seconds >= 0.0);
}

#[test]
fn toy_run_emits_the_full_artifact_set() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_toy_config(dir.path(), ToySetting::Synthetic);
    config.diagnostics.eigentrace_pairs = 2;
    config.diagnostics.truncation_k = vec![6, 2];
    let manifest = run(&config).unwrap();
    for name in [
        "dataset.csv",
        "accuracy.csv",
        "teacher_probs.csv",
        "student_probs.csv",
        "scatter.csv",
        "scatter_density.csv",
        "slopes.csv",
        "metrics.csv",
        "trace.csv",
        "scores.csv",
        "truncation.csv",
        "checkpoints/teacher/spec.json",
    ] {
        assert!(
            manifest.artifacts.iter().any(|a| a.path == name),
            "missing artifact {name}"
        );
    }
    let acc = fs::read_to_string(dir.path().join("accuracy.csv")).unwrap();
    let mut lines = acc.lines();
    assert_eq!(
        lines.next().unwrap(),
        "teacher_train_acc,teacher_test_acc,onehot_train_acc,onehot_test_acc,distilled_train_acc,distilled_test_acc"
    );
    assert_eq!(lines.next().unwrap().split(',').count(), 6);
    assert!(lines.next().is_none());

    let scatter = fs::read_to_string(dir.path().join("scatter.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 1 + 24);
    let trunc = fs::read_to_string(dir.path().join("truncation.csv")).unwrap();
    assert_eq!(trunc.lines().count(), 1 + 4);

    // manifest digests verify against the files on disk
    for rec in &manifest.artifacts {
        let bytes = fs::read(dir.path().join(&rec.path)).unwrap();
        assert_eq!(hex::encode(Sha256::digest(&bytes)), rec.sha256, "{}", rec.path);
    }

    // log-spaced default cadence: checkpoint files exist for steps 0 and the end
    let total = config.teacher.total_steps(24);
    for step in [0, total] {
        let name = format!("checkpoints/teacher/step_{step:08}.kddl");
        assert!(dir.path().join(&name).exists(), "missing {name}");
    }
}

#[test]
fn prob_csv_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_toy_config(dir.path(), ToySetting::Synthetic);
    run(&config).unwrap();
    let path = dir.path().join("teacher_probs.csv");
    let (table, labels, cleans) = read_prob_csv(&path).unwrap();
    assert_eq!(labels.len(), 24);
    assert!(cleans.is_some(), "noisy run stores clean labels");
    let rewritten = prob_table_csv(&table, &labels, cleans.as_deref());
    assert_eq!(rewritten, fs::read_to_string(&path).unwrap());
}

#[test]
fn dataset_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_toy_config(dir.path(), ToySetting::Synthetic);
    run(&config).unwrap();
    let set = read_dataset_csv(&dir.path().join("dataset.csv")).unwrap();
    assert_eq!(set.len(), 24);
    assert_eq!(set.inputs.cols(), 6);
    assert_eq!(set.num_classes, 3);
    assert!(set.clean_labels.is_some());
}

#[test]
fn random_features_setting_traces_the_head_layer() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_toy_config(dir.path(), ToySetting::RandomFeaturesNoisy);
    config.diagnostics.eigentrace_pairs = 1;
    config.diagnostics.truncation_k = vec![2];
    let manifest = run(&config).unwrap();
    assert!(manifest.artifacts.iter().any(|a| a.path == "trace.csv"));
    let scores = fs::read_to_string(dir.path().join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 2);
    // feature basis has at most as many directions as train examples
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    for line in trace.lines().skip(1) {
        let dir_idx: usize = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(dir_idx < 24);
    }
}

#[test]
fn degenerate_slope_band_leaves_a_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_toy_config(dir.path(), ToySetting::Synthetic);
    config.dataset.train_count = 6;
    config.dataset.test_count = 6;
    // floor(0.25 * 6) = 1 record per band: below the fit minimum
    run(&config).unwrap();
    let slopes = fs::read_to_string(dir.path().join("slopes.csv")).unwrap();
    assert_eq!(slopes, "band,q,m,c,count\n");
}

#[test]
fn failed_stage_is_recorded_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_toy_config(dir.path(), ToySetting::MlpIdx);
    config.dataset.idx_train_images = Some(dir.path().join("missing.idx"));
    config.dataset.idx_train_labels = Some(dir.path().join("missing.idx"));
    config.dataset.idx_test_images = Some(dir.path().join("missing.idx"));
    config.dataset.idx_test_labels = Some(dir.path().join("missing.idx"));
    assert!(run(&config).is_err());
    let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("\"failing_stage\": \"dataset\""), "{manifest}");
}

#[test]
fn config_validation_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let good = tiny_toy_config(dir.path(), ToySetting::Synthetic);

    let mut bad = good.clone();
    bad.schema_version = 99;
    assert!(matches!(run(&bad), Err(RunnerError::Config(_))));

    let mut bad = good.clone();
    bad.checkpoint_every = Some(0);
    assert!(matches!(run(&bad), Err(RunnerError::Config(_))));

    let mut bad = good.clone();
    bad.teacher.mode = LossMode::Distill;
    assert!(matches!(run(&bad), Err(RunnerError::Config(_))));

    let mut bad = good.clone();
    bad.dataset.noise_fraction = 0.0;
    bad.diagnostics.truncation_k = vec![4];
    assert!(matches!(run(&bad), Err(RunnerError::Config(_))));

    let mut bad = good.clone();
    bad.kind = ExperimentKind::ToyDistill { setting: ToySetting::MlpIdx };
    assert!(matches!(run(&bad), Err(RunnerError::Config(_))));

    let mut bad = good;
    bad.kind = ExperimentKind::TheoremSweep { tuples: 0 };
    assert!(matches!(run(&bad), Err(RunnerError::Config(_))));
}

#[test]
fn linear_trace_run_matches_the_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        name: "trace".to_string(),
        kind: ExperimentKind::LinearTrace {
            lambdas: vec![2.0, 1.0],
            t_stop: 1.0,
            alpha_target: 0.747645,
            steps: 5,
        },
        dataset: DatasetConfig::default(),
        model: ModelConfig::default(),
        teacher: default_teacher_plan(),
        student: default_student_plan(),
        diagnostics: DiagnosticsConfig::default(),
        checkpoint_every: None,
        output_dir: dir.path().to_path_buf(),
        master_seed: 1,
    };
    run(&config).unwrap();
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    // 2 models x 2 directions x 5 times
    assert_eq!(trace.lines().count(), 1 + 20);
    let ratio_line = fs::read_to_string(dir.path().join("ratio.csv")).unwrap();
    let ratio: f64 = ratio_line
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .last()
        .unwrap()
        .parse()
        .unwrap();
    assert!((ratio - 0.802925601).abs() < 1e-6);
}

#[test]
fn degenerate_interpolation_study_gives_equal_students() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_toy_config(dir.path(), ToySetting::Synthetic);
    config.kind = ExperimentKind::InterpolationStudy {
        early_epochs: 4,
        switch_at: 0,
        switch_window: 0,
    };
    run(&config).unwrap();
    let report = fs::read_to_string(dir.path().join("interpolation.csv")).unwrap();
    let mut rows = std::collections::BTreeMap::new();
    for line in report.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        rows.insert(fields[0].to_string(), (fields[1].to_string(), fields[2].to_string()));
    }
    assert_eq!(rows.len(), 6);
    // early budget equals the full budget, so every pair collapses
    assert_eq!(rows["teacher_full"], rows["teacher_early"]);
    assert_eq!(rows["student_full"], rows["student_early"]);
    assert_eq!(rows["student_full_switched"], rows["student_early_switched"]);
}

#[test]
fn switch_study_trajectories_agree_before_the_switch() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_toy_config(dir.path(), ToySetting::Synthetic);
    config.kind = ExperimentKind::LossSwitchStudy { switch_at: 0, switch_window: 0 };
    config.checkpoint_every = Some(2);
    run(&config).unwrap();
    let text = fs::read_to_string(dir.path().join("switch.csv")).unwrap();
    let mut pure = std::collections::BTreeMap::new();
    let mut switched = std::collections::BTreeMap::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let step: u64 = fields[0].parse().unwrap();
        let row = (fields[2].to_string(), fields[3].to_string());
        match fields[1] {
            "pure" => pure.insert(step, row),
            "switched" => switched.insert(step, row),
            other => panic!("unexpected tag {other}"),
        };
    }
    assert_eq!(pure.len(), switched.len());
    let total = config.student.total_steps(24);
    let at_step = total / 2;
    for (step, row) in &pure {
        if *step <= at_step {
            assert_eq!(row, &switched[step], "step {step} diverged before the switch");
        }
    }
}

#[test]
fn diagnose_recomputes_the_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_toy_config(dir.path(), ToySetting::Synthetic);
    run(&config).unwrap();
    let original = fs::read_to_string(dir.path().join("scatter.csv")).unwrap();
    fs::remove_file(dir.path().join("scatter.csv")).unwrap();
    let written = diagnose_dir(dir.path(), 0.25).unwrap();
    assert!(written.contains(&"scatter.csv".to_string()));
    assert_eq!(original, fs::read_to_string(dir.path().join("scatter.csv")).unwrap());
}

#[test]
fn eigentrace_rebuilds_from_stored_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_toy_config(dir.path(), ToySetting::Synthetic);
    run(&config).unwrap();
    let (csv, sampled) = eigentrace_dir(dir.path(), "distilled", 2, 3).unwrap();
    assert_eq!(sampled.len(), 2);
    assert!(csv.starts_with("step,direction,value,model_tag\n"));
    assert!(csv.lines().count() > 1);
    let (again, _) = eigentrace_dir(dir.path(), "distilled", 2, 3).unwrap();
    assert_eq!(csv, again);
}

#[test]
fn config_json_round_trips_through_serde() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_toy_config(dir.path(), ToySetting::RandomFeaturesNoisy);
    config.diagnostics.truncation_k = vec![24, 20, 10];
    let text = serde_json::to_string_pretty(&config).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(config, back);
    // minimal document relies on the documented defaults
    let minimal: ExperimentConfig = serde_json::from_str(
        r#"{
            "schema_version": 1,
            "name": "sweep",
            "kind": { "theorem_sweep": { "tuples": 10 } },
            "output_dir": "/tmp/x",
            "master_seed": 7
        }"#,
    )
    .unwrap();
    assert_eq!(minimal.dataset, DatasetConfig::default());
    assert_eq!(minimal.teacher, default_teacher_plan());
    assert_eq!(minimal.student, default_student_plan());
}

#[test]
fn teacher_only_run_skips_the_students() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_toy_config(dir.path(), ToySetting::Synthetic);
    let manifest = run_teacher(&config).unwrap();
    assert!(manifest.artifacts.iter().any(|a| a.path == "teacher_probs.csv"));
    assert!(manifest.artifacts.iter().all(|a| !a.path.contains("student")));
    assert!(manifest.artifacts.iter().any(|a| a.path.starts_with("checkpoints/teacher/")));
    let acc = fs::read_to_string(dir.path().join("accuracy.csv")).unwrap();
    assert!(acc.starts_with("model,train_acc,test_acc\nteacher,"));
    // the teacher stage sees the same seed either way
    let full_dir = tempfile::tempdir().unwrap();
    let mut full = config.clone();
    full.output_dir = full_dir.path().to_path_buf();
    let full_manifest = run(&full).unwrap();
    assert_eq!(
        manifest.per_stage_seeds["teacher"],
        full_manifest.per_stage_seeds["teacher"]
    );
    let a = fs::read(dir.path().join("teacher_probs.csv")).unwrap();
    let b = fs::read(full_dir.path().join("teacher_probs.csv")).unwrap();
    assert_eq!(a, b, "teacher table must not depend on which pipeline ran it");
}

#[test]
fn density_grid_covers_the_bounding_box() {
    let records = vec![
        ScatterRecord { index: 0, x: 0.0, y: 0.0, group: crate::diagnostics::Group::Neither, is_noisy: false },
        ScatterRecord { index: 1, x: 1.0, y: 1.0, group: crate::diagnostics::Group::Neither, is_noisy: false },
        ScatterRecord { index: 2, x: 1.0, y: 1.0, group: crate::diagnostics::Group::Neither, is_noisy: true },
    ];
    let text = density_csv(&records);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x_bin,y_bin,x_center,y_center,count");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,0,"));
    assert!(lines[2].starts_with("79,79,"));
    assert!(lines[2].ends_with(",2"));
    assert_eq!(density_csv(&[]), "x_bin,y_bin,x_center,y_center,count\n");
}
