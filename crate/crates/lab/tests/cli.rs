//! CLI contract tests: exit codes, config-file precedence, and the
//! DLAB_SEED fallback.

use std::path::Path;
use std::process::Command;

fn dlab() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dlab"));
    cmd.env_remove("DLAB_SEED");
    cmd
}

#[test]
fn missing_subcommand_is_a_usage_error() {
    let out = dlab().output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = dlab().args(["make-dataset", "--frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dlab()
        .args([
            "evaluate",
            "--model", "/nonexistent/model.ckpt",
            "--dataset", "/nonexistent/test.ndjson",
            "--out", dir.path().join("eval").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"train_count": 8, "test_count": 4, "seed": 3}"#).unwrap();

    let from_config = dir.path().join("from_config");
    let status = dlab()
        .args([
            "make-dataset",
            "--config", config.to_str().unwrap(),
            "--out", from_config.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let items = std::fs::read_to_string(from_config.join("train.ndjson")).unwrap();
    assert_eq!(items.lines().count(), 8);

    let overridden = dir.path().join("overridden");
    let status = dlab()
        .args([
            "make-dataset",
            "--config", config.to_str().unwrap(),
            "--train-count", "12",
            "--out", overridden.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let items = std::fs::read_to_string(overridden.join("train.ndjson")).unwrap();
    assert_eq!(items.lines().count(), 12);
}

#[test]
fn env_seed_matches_explicit_seed_flag() {
    let dir = tempfile::tempdir().unwrap();
    let via_flag = dir.path().join("flag");
    let via_env = dir.path().join("env");
    assert!(dlab()
        .args([
            "make-dataset", "--train-count", "10", "--test-count", "2",
            "--seed", "5", "--out", via_flag.to_str().unwrap(),
        ])
        .status()
        .unwrap()
        .success());
    assert!(dlab()
        .env("DLAB_SEED", "5")
        .args([
            "make-dataset", "--train-count", "10", "--test-count", "2",
            "--out", via_env.to_str().unwrap(),
        ])
        .status()
        .unwrap()
        .success());
    assert_eq!(read(&via_flag.join("train.ndjson")), read(&via_env.join("train.ndjson")));
    assert_eq!(read(&via_flag.join("test.ndjson")), read(&via_env.join("test.ndjson")));
}
