//! End-to-end checks of the `medrec` binary: exit codes, artifact files,
//! flag overrides and rerun determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn medrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medrec"))
        .args(args)
        .output()
        .expect("binary spawns")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_tiny_spec(path: &Path) {
    let spec = r#"{
        "diseases": 3, "procedures": 1, "medications": 3,
        "edges": [
            {"from": "d0", "to": "m0", "weight": 3.0},
            {"from": "d1", "to": "m1", "weight": 3.0},
            {"from": "p0", "to": "m2", "weight": 3.0},
            {"from": "d0", "to": "d1", "weight": 2.0}
        ],
        "base_logits": {
            "d0": -0.5, "d1": -0.5, "d2": -0.5, "p0": -1.0,
            "m0": -2.0, "m1": -2.0, "m2": -2.0
        },
        "patients": 24, "visits": [1, 2], "seed": 5,
        "ddi_pairs": [["m0", "m2"]]
    }"#;
    fs::write(path, spec).unwrap();
}

#[test]
fn synth_with_the_bundled_spec_writes_the_three_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("synth");
    let run = medrec(&["synth", "--out", out.to_str().unwrap()]);
    assert!(run.status.success(), "stderr: {}", stderr_of(&run));
    for name in ["cohort.jsonl", "ddi.csv", "ground_truth.json"] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    let stdout = String::from_utf8_lossy(&run.stdout).into_owned();
    assert!(stdout.contains("500 patients"), "stdout: {stdout}");
}

#[test]
fn synth_rejects_a_missing_spec_path_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let run = medrec(&[
        "synth",
        "--spec",
        "/nonexistent/model.json",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(run.status.code(), Some(2), "stderr: {}", stderr_of(&run));
    assert!(stderr_of(&run).contains("/nonexistent/model.json"));
}

#[test]
fn synth_reruns_with_the_same_seed_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("tiny.json");
    write_tiny_spec(&spec);
    for out in ["a", "b"] {
        let run = medrec(&[
            "synth",
            "--spec",
            spec.to_str().unwrap(),
            "--out",
            dir.path().join(out).to_str().unwrap(),
        ]);
        assert!(run.status.success(), "stderr: {}", stderr_of(&run));
    }
    for name in ["cohort.jsonl", "ddi.csv", "ground_truth.json"] {
        let a = fs::read(dir.path().join("a").join(name)).unwrap();
        let b = fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn pipeline_runs_and_honors_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("tiny.json");
    write_tiny_spec(&spec);
    let data = dir.path().join("data");
    let run = medrec(&[
        "synth",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "stderr: {}", stderr_of(&run));

    let config = dir.path().join("run.json");
    fs::write(
        &config,
        format!(
            r#"{{
                "cohort": "{}", "ddi": "{}", "out_dir": "{}",
                "epochs": 1, "dim": 4, "rgcn_layers": 1,
                "n_relations": 2, "eval_rounds": 2, "seed": 3
            }}"#,
            data.join("cohort.jsonl").display(),
            data.join("ddi.csv").display(),
            dir.path().join("artifacts").display(),
        ),
    )
    .unwrap();

    let run = medrec(&["pipeline", "--config", config.to_str().unwrap()]);
    assert!(run.status.success(), "stderr: {}", stderr_of(&run));
    let metrics = dir.path().join("artifacts").join("metrics.json");
    assert!(metrics.is_file());
    assert!(fs::read_to_string(&metrics).unwrap().contains("\"mode\": \"full\""));

    let other = dir.path().join("ablated");
    let run = medrec(&[
        "pipeline",
        "--config",
        config.to_str().unwrap(),
        "--mode",
        "cooccurrence",
        "--out",
        other.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "stderr: {}", stderr_of(&run));
    let text = fs::read_to_string(other.join("metrics.json")).unwrap();
    assert!(text.contains("\"mode\": \"cooccurrence\""), "metrics: {text}");
}

#[test]
fn pipeline_with_a_bad_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");

    fs::write(&config, r#"{"cohort": "/nonexistent/cohort.jsonl"}"#).unwrap();
    let run = medrec(&["pipeline", "--config", config.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2), "stderr: {}", stderr_of(&run));
    assert!(stderr_of(&run).contains("cohort"));

    fs::write(&config, r#"{"cohort": "x.jsonl", "betta": 0.5}"#).unwrap();
    let run = medrec(&["pipeline", "--config", config.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2));
    assert!(stderr_of(&run).contains("betta"));
}

#[test]
fn missing_subcommand_is_a_usage_error() {
    let run = medrec(&[]);
    assert_eq!(run.status.code(), Some(2));
}
