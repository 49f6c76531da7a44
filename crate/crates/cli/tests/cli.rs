use std::path::Path;
use std::process::{Command, Output};

fn ergosense(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ergosense"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).expect("stdout is JSON")
}

#[test]
fn explore_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let run = ergosense(&["explore", "--t-final", "0.5", "--seed", "3", "--out", out]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let metrics = json(&run.stdout);
    assert_eq!(metrics["stage"], "explore");
    assert_eq!(metrics["seed"], 3);
    assert_eq!(metrics["measurements"], 5);
    for f in ["metrics.json", "manifest.json", "trajectory.csv", "measurements.csv", "controller.csv"] {
        assert!(Path::new(out).join(f).is_file(), "missing {f}");
    }

    let eval = ergosense(&["eval", out]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let report = json(&eval.stdout);
    assert_eq!(report["checksum_ok"], true);
    assert_eq!(report["metrics"], metrics);
}

#[test]
fn eval_flags_tampered_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(ergosense(&["explore", "--eer", "--t-final", "0.3", "--out", out]).status.success());
    let path = dir.path().join("metrics.json");
    let mut metrics = json(&std::fs::read(&path).unwrap());
    metrics["auc"] = serde_json::json!(0.5);
    std::fs::write(&path, serde_json::to_vec_pretty(&metrics).unwrap()).unwrap();
    let eval = ergosense(&["eval", out]);
    assert_eq!(eval.status.code(), Some(2));
}

#[test]
fn bad_config_exits_with_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"control_period": -1.0}"#).unwrap();
    let out = dir.path().join("run");
    let run = ergosense(&["localize", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2));
    let record = json(&std::fs::read(out.join("error.json")).unwrap());
    assert!(record["kind"].is_string());
    assert!(record["message"].as_str().unwrap().contains("control_period"));
    let stderr = String::from_utf8_lossy(&run.stderr);
    assert!(stderr.lines().last().unwrap().contains("\"kind\""));
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.json");
    std::fs::write(&cfg, r#"{"t_finale": 1.0}"#).unwrap();
    let run = ergosense(&["explore", "--config", cfg.to_str().unwrap()]);
    assert!(!run.status.success());
}
