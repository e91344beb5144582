use std::path::Path;
use std::process::{Command, Output};

use dmcanc::harness::ExperimentConfig;

fn dmcanc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmcanc")).args(args).output().unwrap()
}

fn small_config(dir: &Path) -> String {
    let cfg = ExperimentConfig {
        duration: 8000,
        comp_samples: 20_000,
        window: 500,
        n_runs: 1,
        ..ExperimentConfig::ci()
    };
    let path = dir.join("exp.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path.display().to_string()
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "n_nodes = 3\nbogus = 1\n").unwrap();
    let out = dmcanc(&["--config", path.to_str().unwrap(), "config"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn invalid_value_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "n_nodes = 0\n").unwrap();
    let out = dmcanc(&["--config", path.to_str().unwrap(), "run"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_comm_string_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = dmcanc(&["--config", &cfg, "--comm", "carrier-pigeon", "run"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_round_trips() {
    let out = dmcanc(&["--profile", "ci", "config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(cfg, ExperimentConfig::ci());
}

#[test]
fn run_writes_traces_and_filters() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out_dir = tmp.path().join("out");
    let out = dmcanc(&["--config", &cfg, "-o", out_dir.to_str().unwrap(), "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("mse.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header, "sample,mse_node_1_db,mse_node_2_db,mse_node_3_db,mse_mean_db");
    assert!(csv.lines().count() > 10);
    for k in 1..=3 {
        let w = std::fs::read_to_string(out_dir.join("weights").join(format!("w_{k}.txt"))).unwrap();
        assert!(w.lines().count() > 100);
    }
}
