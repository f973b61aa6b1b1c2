use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use autotune::tuner::TunerRecord;
use serde_json::Value;

const SMALL: &str = r#"{
    // short runs for the command-line tests
    "tuner": {
        "initial_samples": 5,
        "budget": 8,
        "validation_draws": 4,
        "bo": { "pso": { "particles": 12, "iterations": 10 }, "gp_restarts": 2 },
        "stage2": { "bo": { "pso": { "particles": 10, "iterations": 8 }, "gp_restarts": 1 } },
        "outlier": { "restarts": 1 }
    },
    "benchmark": { "algorithms": ["I", "IV"], "repetitions": 2 }
}"#;

fn autotune(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autotune"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.json"), SMALL).unwrap();
    dir
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stderr)))
}

#[test]
fn simulate_reports_finite_metrics() {
    let dir = setup();
    let o = autotune(dir.path(), &["simulate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = &stdout_json(&o)["completed"];
    for key in ["ite", "overshoot", "step_time"] {
        assert!(m[key].as_f64().unwrap().is_finite(), "{key}");
    }
}

#[test]
fn simulate_rejects_out_of_bounds_controller() {
    let dir = setup();
    let o = autotune(dir.path(), &["simulate", "--hu", "31"]);
    assert_eq!(o.status.code(), Some(2));
    let o = autotune(dir.path(), &["simulate", "--lambda-mpc", "-7"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tuner.bounds"));
}

#[test]
fn bad_config_names_the_field() {
    let dir = setup();
    fs::write(dir.path().join("bad.json"), r#"{"tuner": {"initial_samples": 0}}"#).unwrap();
    let o = autotune(dir.path(), &["--config", "bad.json", "tune"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tuner.initial_samples"));
}

#[test]
fn trace_has_one_row_per_sample() {
    let dir = setup();
    let o = autotune(dir.path(), &["--out", "sim", "simulate", "--trace", "--stiffness", "1.2"]);
    assert!(o.status.success());
    let csv = fs::read_to_string(dir.path().join("sim/trace.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("k,v_ref,v,u,xhat_v,xhat_dv"));
    // the default trajectory has 1500 steps plus the initial sample
    assert_eq!(lines.count(), 1501);
}

#[test]
fn tune_validate_and_grid_round_trip() {
    let dir = setup();
    let o = autotune(dir.path(), &["--config", "small.json", "--out", "run", "--seed", "3", "tune"]);
    assert!(
        o.status.success() || o.status.code() == Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let run = dir.path().join("run");
    for f in ["config.resolved.json", "history.jsonl", "bo_log.jsonl", "summary.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(!run.join("history.jsonl.tmp").exists());

    let history: Vec<TunerRecord> = fs::read_to_string(run.join("history.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(history.len(), 8);
    let best: Vec<f64> = history
        .iter()
        .filter_map(|r| r.incumbent.as_ref()?.best_validation_objective)
        .collect();
    assert!(best.windows(2).all(|w| w[1] <= w[0]), "{best:?}");
    assert_eq!(fs::read_to_string(run.join("bo_log.jsonl")).unwrap().lines().count(), 8);

    // the resolved config reproduces itself byte for byte
    let resolved = fs::read_to_string(run.join("config.resolved.json")).unwrap();
    let o = autotune(dir.path(), &["--config", "run/config.resolved.json", "--out", "run2", "grid", "--run", "run"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = autotune_cli::RunConfig::parse(&resolved).unwrap();
    assert_eq!(cfg.to_json(), resolved);
    assert_eq!(cfg.seed, 3);

    let grid = fs::read_to_string(dir.path().join("run2/grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 25 * 25);
    assert!(grid.starts_with("horizon,lambda_mpc,"), "{}", grid.lines().next().unwrap());

    // re-validating the summary reproduces the stored verdict
    let summary: Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    if summary["best"].is_null() {
        return;
    }
    let o = autotune(dir.path(), &["--config", "small.json", "validate", "--summary", "run/summary.json"]);
    let v = stdout_json(&o);
    assert_eq!(v, summary["validation"]);
    let code = if v["feasible"].as_bool().unwrap() { 0 } else { 3 };
    assert_eq!(o.status.code(), Some(code));
}

#[test]
fn grid_names_missing_artifacts() {
    let dir = setup();
    let o = autotune(dir.path(), &["grid", "--run", "nowhere"]);
    assert_eq!(o.status.code(), Some(4));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("nowhere") && err.contains("config.resolved.json"), "{err}");
}

#[test]
fn benchmark_writes_one_row_per_algorithm() {
    let dir = setup();
    fs::write(
        dir.path().join("bench.json"),
        SMALL.replace("\"budget\": 8", "\"budget\": 5"),
    )
    .unwrap();
    let o = autotune(dir.path(), &["--config", "bench.json", "--out", "bench", "--workers", "2", "benchmark"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("bench/benchmark.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("algorithm,feasibility,obj_validation,obj_gap"));
    let algs: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(algs, ["I", "IV"]);
    assert_eq!(String::from_utf8_lossy(&o.stdout), csv);
    let runs = fs::read_to_string(dir.path().join("bench/benchmark_runs.jsonl")).unwrap();
    assert_eq!(runs.lines().count(), 4);
}
