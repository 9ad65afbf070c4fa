//! End-to-end tests of the `concept-probe` binary: determinism, the
//! stage cache, exit codes and the log format.

use concept_probe::prt::PrtTensor;
use ndarray::{Array2, Array4};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_concept-probe"));
    cmd.env_remove("CONCEPT_PROBE_SEED");
    cmd
}

fn run_ok(cmd: &mut Command) -> Output {
    let output = cmd.output().expect("binary runs");
    assert!(
        output.status.success(),
        "exit {:?}\nstderr:\n{}",
        output.status.code(),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().expect("binary runs").status.code().expect("exit code")
}

fn stderr_events(output: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&output.stderr)
        .lines()
        .map(|line| serde_json::from_str(line).unwrap_or_else(|e| panic!("bad log line {line:?}: {e}")))
        .collect()
}

fn event_names(events: &[serde_json::Value]) -> Vec<String> {
    events.iter().map(|e| e["event"].as_str().unwrap_or("?").to_owned()).collect()
}

/// Sorted (relative path, content) pairs under a directory tree.
fn dir_contents(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_path_buf();
                out.push((rel, std::fs::read(&path).expect("readable file")));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// A config small enough for whole-pipeline tests.
fn tiny_config(dir: &Path, seed: u64) -> PathBuf {
    let config = serde_json::json!({
        "seed": seed,
        "data": {
            "train_per_class": 6,
            "val_per_class": 4,
            "eval_per_class": 4,
            "concept_excerpts": 5,
            "num_random_datasets": 3,
            "random_excerpts": 5,
            "excerpt_seconds": 0.8
        },
        "model": {
            "input_height": 88,
            "input_width": 16,
            "conv_channels": [3, 5],
            "kernel_size": 3,
            "num_classes": 2
        },
        "train": { "epochs": 2, "batch_size": 4 },
        "factorization": {
            "channel_rank": 2,
            "top_k": 2,
            "options": { "max_outer_iters": 30 }
        }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn dataset_command_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        run_ok(bin().args([
            "dataset",
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "9",
            "--random",
            "--count",
            "3",
            "--excerpts",
            "4",
            "--seconds",
            "1.0",
        ]));
    }
    let contents = dir_contents(&a);
    assert_eq!(contents, dir_contents(&b));

    let dirs: Vec<&str> = contents
        .iter()
        .filter_map(|(p, _)| p.iter().next().and_then(|s| s.to_str()))
        .collect();
    for j in 0..3 {
        let name = format!("random_{j:02}");
        assert!(dirs.contains(&name.as_str()), "missing {name}");
    }
    let mids = contents.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "mid")).count();
    let prts = contents.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "prt")).count();
    let manifests =
        contents.iter().filter(|(p, _)| p.ends_with(Path::new("manifest.json"))).count();
    assert_eq!((mids, prts, manifests), (12, 12, 3));

    run_ok(bin().args([
        "dataset",
        "--out",
        a.to_str().unwrap(),
        "--concept",
        "alberti",
        "--excerpts",
        "4",
        "--seconds",
        "1.0",
    ]));
    assert!(a.join("alberti/excerpt_003.mid").exists());
}

#[test]
fn environment_seed_overrides_the_flag() {
    let tmp = TempDir::new().unwrap();
    let flag_two = tmp.path().join("flag_two");
    let env_two = tmp.path().join("env_two");
    let flag_one = tmp.path().join("flag_one");
    let args = |out: &Path, seed: &str| {
        vec![
            "dataset".to_owned(),
            "--out".into(),
            out.to_str().unwrap().into(),
            "--seed".into(),
            seed.into(),
            "--concept".into(),
            "random".into(),
            "--excerpts".into(),
            "3".into(),
            "--seconds".into(),
            "1.0".into(),
        ]
    };
    run_ok(bin().args(args(&flag_two, "2")));
    run_ok(bin().args(args(&env_two, "1")).env("CONCEPT_PROBE_SEED", "2"));
    run_ok(bin().args(args(&flag_one, "1")));
    assert_eq!(dir_contents(&flag_two), dir_contents(&env_two));
    assert_ne!(dir_contents(&flag_one), dir_contents(&env_two));

    let code = bin()
        .args(args(&tmp.path().join("bad"), "1"))
        .env("CONCEPT_PROBE_SEED", "not-a-number")
        .output()
        .unwrap()
        .status
        .code();
    assert_eq!(code, Some(2));
}

#[test]
fn unknown_concept_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let code = exit_code(bin().args([
        "dataset",
        "--out",
        tmp.path().join("x").to_str().unwrap(),
        "--concept",
        "mordent",
        "--excerpts",
        "2",
    ]));
    assert_eq!(code, 2);
}

#[test]
fn roll_and_render_round_trip_is_byte_stable() {
    let tmp = TempDir::new().unwrap();
    run_ok(bin().args([
        "dataset",
        "--out",
        tmp.path().to_str().unwrap(),
        "--concept",
        "alberti",
        "--excerpts",
        "1",
        "--seconds",
        "0.8",
    ]));
    let midi = tmp.path().join("alberti/excerpt_000.mid");
    let roll_path = tmp.path().join("roll.prt");
    run_ok(bin().args([
        "roll",
        "--input",
        midi.to_str().unwrap(),
        "--out",
        roll_path.to_str().unwrap(),
        "--seconds",
        "0.8",
    ]));

    let out_a = tmp.path().join("render_a");
    let out_b = tmp.path().join("render_b");
    for out in [&out_a, &out_b] {
        run_ok(bin().args([
            "render",
            "--input",
            roll_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--name",
            "fig",
        ]));
    }
    for name in ["fig.svg", "fig.png", "fig.mid"] {
        assert!(out_a.join(name).exists(), "missing {name}");
        assert_eq!(
            std::fs::read(out_a.join(name)).unwrap(),
            std::fs::read(out_b.join(name)).unwrap(),
            "{name} not reproducible"
        );
    }

    // A heatmap switches the output to one file pair per threshold.
    let roll = PrtTensor::read_file(&roll_path).unwrap();
    let (rows, cols) = (roll.dims[0], roll.dims[1]);
    let map = Array2::from_shape_fn((rows, cols), |(p, c)| ((p + c) % 5) as f32 / 4.0);
    let hm_path = tmp.path().join("heatmap.prt");
    PrtTensor::from_array(
        map.view(),
        serde_json::json!({"kind": "heatmap", "concept_index": 0, "excerpt_id": 0, "average_presence": 0.5}),
    )
    .write_file(&hm_path)
    .unwrap();
    let out_h = tmp.path().join("render_h");
    run_ok(bin().args([
        "render",
        "--input",
        roll_path.to_str().unwrap(),
        "--heatmap",
        hm_path.to_str().unwrap(),
        "--out",
        out_h.to_str().unwrap(),
        "--name",
        "fig",
    ]));
    for name in ["fig_t40.svg", "fig_t60.png", "fig_t80.svg", "fig.mid"] {
        assert!(out_h.join(name).exists(), "missing {name}");
    }
}

#[test]
fn pipeline_completes_caches_and_reproduces_reports() {
    let tmp = TempDir::new().unwrap();
    let config = tiny_config(tmp.path(), 7);
    let run_dir = tmp.path().join("run");

    let first = run_ok(bin().args([
        "pipeline",
        "--config",
        config.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]));
    let names = event_names(&stderr_events(&first));
    for stage in ["train", "activations", "tcav", "explain", "render"] {
        assert!(names.iter().any(|n| n == "stage_complete"), "no completions logged");
        assert!(
            stderr_events(&first)
                .iter()
                .any(|e| e["event"] == "stage_complete" && e["stage"] == stage),
            "stage {stage} did not complete"
        );
    }

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stages"].as_array().unwrap().len(), 5);
    assert_eq!(manifest["seed"], 7);
    assert!(manifest["config_sha256"].as_str().unwrap().len() == 64);

    let tcav_report = std::fs::read(run_dir.join("tcav/tcav_report.json")).unwrap();
    let explain_report = std::fs::read(run_dir.join("explain/explain_report.json")).unwrap();
    assert!(!serde_json::from_slice::<serde_json::Value>(&tcav_report).unwrap()["per_class"]
        .as_array()
        .unwrap()
        .is_empty());
    let renders: Vec<_> = std::fs::read_dir(run_dir.join("renders")).unwrap().collect();
    assert!(!renders.is_empty(), "render stage wrote nothing");

    // Second run: everything cached, reports byte-identical.
    let second = run_ok(bin().args([
        "pipeline",
        "--config",
        config.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]));
    let cached = stderr_events(&second)
        .iter()
        .filter(|e| e["event"] == "stage_cached")
        .count();
    assert_eq!(cached, 5, "expected every stage cached");
    assert_eq!(std::fs::read(run_dir.join("tcav/tcav_report.json")).unwrap(), tcav_report);
    assert_eq!(
        std::fs::read(run_dir.join("explain/explain_report.json")).unwrap(),
        explain_report
    );

    // Re-running one stage after dropping its stamp reuses the cached
    // model instead of retraining.
    std::fs::remove_file(run_dir.join("stages/tcav.json")).unwrap();
    let third = run_ok(bin().args([
        "pipeline",
        "--config",
        config.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--stage",
        "tcav",
    ]));
    let events = stderr_events(&third);
    assert!(events.iter().any(|e| e["event"] == "stage_start" && e["stage"] == "tcav"));
    assert!(!events.iter().any(|e| e["event"] == "epoch"), "tcav stage retrained the model");
    assert_eq!(std::fs::read(run_dir.join("tcav/tcav_report.json")).unwrap(), tcav_report);
}

#[test]
fn stage_on_a_fresh_directory_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let config = tiny_config(tmp.path(), 0);
    let code = exit_code(bin().args([
        "pipeline",
        "--config",
        config.to_str().unwrap(),
        "--out",
        tmp.path().join("fresh").to_str().unwrap(),
        "--stage",
        "tcav",
    ]));
    assert_eq!(code, 3);

    let bad_stage = exit_code(bin().args([
        "pipeline",
        "--config",
        config.to_str().unwrap(),
        "--out",
        tmp.path().join("fresh2").to_str().unwrap(),
        "--stage",
        "nonsense",
    ]));
    assert_eq!(bad_stage, 2);
}

#[test]
fn invalid_configs_are_config_errors() {
    let tmp = TempDir::new().unwrap();
    let mismatched = tmp.path().join("mismatched.json");
    std::fs::write(&mismatched, br#"{ "data": { "excerpt_seconds": 5.0 } }"#).unwrap();
    let code = exit_code(bin().args([
        "pipeline",
        "--config",
        mismatched.to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
    ]));
    assert_eq!(code, 2);

    let malformed = tmp.path().join("malformed.json");
    std::fs::write(&malformed, b"{ not json").unwrap();
    let code = exit_code(bin().args([
        "train",
        "--config",
        malformed.to_str().unwrap(),
        "--run-dir",
        tmp.path().join("run2").to_str().unwrap(),
    ]));
    assert_eq!(code, 2);
}

#[test]
fn logs_are_line_delimited_json() {
    let tmp = TempDir::new().unwrap();
    let output = run_ok(bin().args([
        "dataset",
        "--out",
        tmp.path().join("d").to_str().unwrap(),
        "--concept",
        "alberti",
        "--excerpts",
        "2",
        "--seconds",
        "1.0",
    ]));
    let events = stderr_events(&output);
    assert!(!events.is_empty());
    for event in &events {
        assert!(event["event"].is_string(), "log line without event field: {event}");
    }
}

#[test]
fn cav_and_ntd_commands_work_on_stored_tensors() {
    let tmp = TempDir::new().unwrap();

    // Two linearly separated activation clouds.
    let concept = Array2::from_shape_fn((12, 6), |(i, j)| 1.0f32 + ((i * 7 + j) % 3) as f32 * 0.1);
    let random = Array2::from_shape_fn((12, 6), |(i, j)| -1.0f32 - ((i * 5 + j) % 3) as f32 * 0.1);
    let concept_path = tmp.path().join("concept.prt");
    let random_path = tmp.path().join("random.prt");
    PrtTensor::from_array(concept.view(), serde_json::Value::Null)
        .write_file(&concept_path)
        .unwrap();
    PrtTensor::from_array(random.view(), serde_json::Value::Null)
        .write_file(&random_path)
        .unwrap();
    let cav_path = tmp.path().join("cav.json");
    run_ok(bin().args([
        "cav",
        "--concept",
        concept_path.to_str().unwrap(),
        "--random",
        random_path.to_str().unwrap(),
        "--layer",
        "1",
        "--out",
        cav_path.to_str().unwrap(),
    ]));
    let cav: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&cav_path).unwrap()).unwrap();
    assert_eq!(cav["layer"], 1);
    assert!(cav["classifier_accuracy"].as_f64().unwrap() > 0.99);
    let norm: f64 = cav["v"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap().powi(2)).sum();
    assert!((norm - 1.0).abs() < 1e-5, "CAV is not unit length: {norm}");

    // Full-rank NTD of a small tensor is numerically exact.
    let tensor = Array4::from_shape_fn((4, 3, 2, 3), |(a, b, c, d)| {
        ((a * 31 + b * 17 + c * 7 + d * 3) % 11) as f32 / 10.0
    });
    let acts_path = tmp.path().join("acts.prt");
    PrtTensor::from_array(tensor.view(), serde_json::Value::Null)
        .write_file(&acts_path)
        .unwrap();
    let ntd_dir = tmp.path().join("ntd");
    run_ok(bin().args([
        "ntd",
        "--input",
        acts_path.to_str().unwrap(),
        "--ranks",
        "4,3,2,3",
        "--out",
        ntd_dir.to_str().unwrap(),
    ]));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(ntd_dir.join("ntd_report.json")).unwrap()).unwrap();
    assert!(report["relative_error"].as_f64().unwrap() < 1e-6);
    assert!(ntd_dir.join("core.prt").exists());
    assert!(ntd_dir.join("factor_3.prt").exists());

    // Wrong rank count is a config error; a missing input is a data error.
    let code = exit_code(bin().args([
        "ntd",
        "--input",
        acts_path.to_str().unwrap(),
        "--ranks",
        "4,3",
        "--out",
        tmp.path().join("ntd2").to_str().unwrap(),
    ]));
    assert_eq!(code, 4);
    let code = exit_code(bin().args([
        "ntd",
        "--input",
        tmp.path().join("missing.prt").to_str().unwrap(),
        "--ranks",
        "1,1,1,1",
        "--out",
        tmp.path().join("ntd3").to_str().unwrap(),
    ]));
    assert_eq!(code, 3);
}
