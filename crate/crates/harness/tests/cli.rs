use std::process::{Command, Output};

use serde_json::Value;

fn dmmimo(dir: &std::path::Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmmimo"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn error_kind(out: &Output) -> String {
    assert!(!out.status.success());
    let line = String::from_utf8(out.stderr.clone()).unwrap();
    let v: Value = serde_json::from_str(line.trim()).unwrap();
    v["error"]["kind"].as_str().unwrap().to_string()
}

#[test]
fn missing_checkpoint_is_a_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmmimo(dir.path(), &["--out", "o", "e2e-eval"]);
    assert_eq!(error_kind(&out), "missing_checkpoint");
    let out = dmmimo(dir.path(), &["--out", "o", "train", "--stage", "3"]);
    assert_eq!(error_kind(&out), "missing_checkpoint");
}

#[test]
fn invalid_stage_is_a_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmmimo(dir.path(), &["train", "--stage", "4"]);
    assert_eq!(error_kind(&out), "invalid_stage");
}

#[test]
fn unused_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmmimo(dir.path(), &["--snr", "0,5", "svd-stats"]);
    assert_eq!(error_kind(&out), "config");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[common]\nseeed = 1\n").unwrap();
    let out = dmmimo(dir.path(), &["--config", "c.toml", "svd-stats"]);
    assert_eq!(error_kind(&out), "config");
}

#[test]
fn bad_flag_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmmimo(dir.path(), &["svd-stats", "--no-such-flag"]);
    assert!(!out.status.success());
    let out = dmmimo(dir.path(), &["--snr", "a:b", "mse-sweep"]);
    assert!(!out.status.success());
}

#[test]
fn outputs_carry_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmmimo(dir.path(), &["--out", "o", "--trials", "500", "--seed", "9", "svd-stats"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("o/svd_hist.csv")).unwrap();
    let head = csv.lines().next().unwrap();
    assert!(head.starts_with("# dmmimo ") && head.contains("seed=9") && head.contains("config_sha256="));
    let json: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/svd_stats.json")).unwrap()).unwrap();
    assert_eq!(json["provenance"]["seed"], 9);
    assert_eq!(json["trials"], 500);
}

#[test]
fn snr_override_sets_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmmimo(dir.path(), &["--out", "o", "--trials", "5", "--snr", "0:4:2", "mse-sweep"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("o/mse_sweep.csv")).unwrap();
    let snrs: Vec<&str> = csv.lines().skip(2).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(snrs, ["0", "2", "4"]);
}
