use assert_cmd::Command;
use predicates::prelude::*;
use serde_json::Value;

fn mokt() -> Command {
    Command::cargo_bin("mokt").unwrap()
}

fn json_stdout(args: &[&str]) -> Value {
    let out = mokt().args(args).args(["--format", "json"]).assert().success();
    serde_json::from_slice(&out.get_output().stdout).unwrap()
}

#[test]
fn complexity_reports_threshold_and_flops() {
    let v = json_stdout(&["complexity", "--tokens", "196", "--dim", "384"]);
    assert_eq!(v["block_flops"], 752_640_000u64);
    assert_eq!(v["tau"], 2304);
    assert_eq!(v["is_long_sequence"], false);
    let v = json_stdout(&["complexity", "--tokens", "4000", "--dim", "384"]);
    assert_eq!(v["is_long_sequence"], true);
}

#[test]
fn audit_passes_for_femto_and_echoes_config() {
    mokt()
        .args(["audit", "--model", "femto"])
        .assert()
        .success()
        .stderr(predicate::str::contains("effective config"))
        .stdout(predicate::str::contains("femto"));
    let v = json_stdout(&["audit", "--model", "tiny"]);
    assert!(v["total_params"].as_u64().unwrap() > 25_000_000);
}

#[test]
fn out_directory_receives_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    mokt()
        .args(["scan-check", "--max-len", "32", "--trials", "10", "--out"])
        .arg(dir.path())
        .assert()
        .success();
    for f in ["config.json", "VERSION", "scan-check.json", "scan-check.txt"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let version = std::fs::read_to_string(dir.path().join("VERSION")).unwrap();
    assert!(version.starts_with("mokt "));
    let cfg: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["settings"]["trials"], 10);
    assert_eq!(cfg["command"], "scan-check");
}

#[test]
fn short_training_run_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    mokt()
        .args([
            "train",
            "--epochs",
            "1",
            "--train-samples",
            "32",
            "--val-samples",
            "16",
            "--batch-size",
            "16",
            "--out",
        ])
        .arg(dir.path())
        .assert()
        .success();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(dir.path().join("checkpoint.mokt").is_file());
    assert!(dir.path().join("config.toml").is_file());
}

#[test]
fn validation_errors_exit_with_one() {
    mokt()
        .args(["audit", "--model", "giant"])
        .assert()
        .code(1)
        .stderr(predicate::str::contains("giant"));
    mokt().args(["no-such-command"]).assert().code(1);
    mokt()
        .args(["complexity", "--tokens", "0", "--dim", "384"])
        .assert()
        .code(1);
    mokt().args(["compare-mixers", "--seeds", "0"]).assert().code(1);
    mokt().args(["audit", "--input", "16"]).assert().code(1);
}

#[test]
fn bad_config_file_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "epochz = 3\n").unwrap();
    mokt()
        .arg("train")
        .arg("--config")
        .arg(&path)
        .assert()
        .code(1)
        .stderr(predicate::str::contains("epochz"));
}

#[test]
fn bad_thread_setting_is_rejected() {
    mokt()
        .env("MOKT_THREADS", "many")
        .args(["complexity", "--tokens", "4", "--dim", "4"])
        .assert()
        .code(1);
}

#[test]
fn help_and_version_succeed() {
    mokt()
        .arg("--help")
        .assert()
        .success()
        .stdout(predicate::str::contains("compare-mixers"));
    mokt()
        .arg("--version")
        .assert()
        .success()
        .stdout(predicate::str::contains("0.1.0"));
}
