use std::path::Path;
use std::process::{Command, Output};

use gcdisc_core::gc::GcGraph;

fn gcdisc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcdisc"))
        .args(args)
        .current_dir(dir)
        .env("GCDISC_LOG", "warn")
        .output()
        .unwrap()
}

fn small_config(dir: &Path) -> String {
    let text = r#"
[train]
total_steps = 40
warmup_steps = 10
compression_start = 20
eta_max = 0.01
lambda = 1.0
hidden = 8

[lorenz96]
variates = 5
steps = 60
"#;
    std::fs::write(dir.join("small.toml"), text).unwrap();
    "small.toml".into()
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(gcdisc(&["simulate", "rossler"], tmp.path()).status.code(), Some(2));
    assert_eq!(gcdisc(&["train"], tmp.path()).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = gcdisc(&["train", "missing.csv"], tmp.path());
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing.csv"));

    std::fs::write(tmp.path().join("bad.toml"), "[train]\nlamda = 3.0\n").unwrap();
    let bad = gcdisc(&["simulate", "var", "--config", "bad.toml"], tmp.path());
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn simulate_lorenz_writes_series_and_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gcdisc(&["simulate", "lorenz96", "--seed", "4", "--out", "sim"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("sim/data.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 501);
    assert!(lines.iter().all(|l| l.split(',').count() == 20));
    let truth = GcGraph::read(tmp.path().join("sim/truth.json")).unwrap();
    assert_eq!(truth.num_edges(), 80);
    assert!(tmp.path().join("sim/manifest.json").exists());
}

#[test]
fn simulate_var_writes_lagged_truth_and_coefficients() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gcdisc(&["simulate", "var", "--out", "sim"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let truth = GcGraph::read(tmp.path().join("sim/truth.json")).unwrap();
    assert_eq!(truth.lags().unwrap().dim().0, 2);
    assert!(tmp.path().join("sim/coefficients.json").exists());
}

#[test]
fn evaluate_truth_against_itself_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(gcdisc(&["simulate", "lorenz96", "--out", "sim"], tmp.path()).status.success());
    let out = gcdisc(&["evaluate", "sim/truth.json", "sim/truth.json"], tmp.path());
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["balanced_accuracy"], 1.0);
    assert_eq!(report["accuracy"], 1.0);
}

#[test]
fn train_and_replay_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    assert!(gcdisc(&["simulate", "lorenz96", "--config", &cfg, "--out", "sim"], tmp.path()).status.success());
    let out = gcdisc(
        &["train", "sim/data.csv", "--truth", "sim/truth.json", "--config", &cfg, "--out", "run", "--workers", "2"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["graph.json", "graph.csv", "graph.dot", "metrics.json", "checkpoints/component_004.bin"] {
        assert!(tmp.path().join("run").join(f).exists(), "{f}");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("run/metrics.json")).unwrap()).unwrap();
    assert!(metrics["metrics"]["balanced_accuracy"].is_number());

    let again = gcdisc(&["replay", "run/manifest.json", "--out", "again"], tmp.path());
    assert!(again.status.success(), "{}", String::from_utf8_lossy(&again.stderr));
    let a = std::fs::read(tmp.path().join("run/checkpoints/component_000.bin")).unwrap();
    let b = std::fs::read(tmp.path().join("again/checkpoints/component_000.bin")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sweep_requires_two_lambdas() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    assert!(gcdisc(&["simulate", "lorenz96", "--config", &cfg, "--out", "sim"], tmp.path()).status.success());
    let out = gcdisc(&["sweep", "sim/data.csv", "--config", &cfg, "--lambdas", "3"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let ok = gcdisc(
        &["sweep", "sim/data.csv", "--truth", "sim/truth.json", "--config", &cfg, "--lambdas", "0.5,50", "--out", "sw"],
        tmp.path(),
    );
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("sw/metrics.json")).unwrap()).unwrap();
    assert_eq!(summary["per_lambda"].as_array().unwrap().len(), 2);
    assert!(summary["auroc"].is_number());
}
