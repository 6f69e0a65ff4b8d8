use std::path::Path;
use std::process::{Command, Output};

fn exante(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exante")).args(args).current_dir(dir).env_remove("EXANTE_WORKERS").output().unwrap()
}

#[test]
fn generate_run_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let gen = exante(&["generate", "--seed", "3", "--n", "2000", "--out", "data.csv"], dir.path());
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));

    let run = exante(
        &["run", "--data", "data.csv", "--scenarios", "s0,s31", "-B", "4", "--seed", "5", "--workers", "1", "--out", "out"],
        dir.path(),
    );
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    for f in ["model.json", "forecasts.csv", "errors_s0.csv", "errors_s31.csv", "accuracy.csv", "comparison.csv", "manifest.jsonl"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }

    let again = exante(&["replay", "out/manifest.jsonl", "--out", "again", "--workers", "2"], dir.path());
    assert!(again.status.success(), "{}", String::from_utf8_lossy(&again.stderr));
    assert_eq!(
        std::fs::read(dir.path().join("out/accuracy.csv")).unwrap(),
        std::fs::read(dir.path().join("again/accuracy.csv")).unwrap()
    );
}

#[test]
fn unknown_scenario_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = exante(&["run", "--synthetic", "1", "--scenarios", "s0,nope", "-B", "2", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_column_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.csv"), "PRICE,REGION,SECTIONS,YEAR\n1000,1,single,2020\n").unwrap();
    let out = exante(&["run", "--data", "bad.csv", "-B", "2", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("WEIGHT"));
}

#[test]
fn select_prints_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let gen = exante(&["generate", "--seed", "2", "--n", "1500", "--out", "d.csv"], dir.path());
    assert!(gen.status.success());
    let out = exante(&["select", "--data", "d.csv", "--seed", "1"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(trace["selected_columns"].as_array().is_some_and(|a| !a.is_empty()));
}
