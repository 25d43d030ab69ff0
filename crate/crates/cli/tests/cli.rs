use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use graphmut::campaign::{CampaignConfig, CampaignReport};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn campaign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_campaign")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("campaign.toml");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn shipped_default_config_matches_built_in_defaults() {
    let cfg = CampaignConfig::from_file(&configs_dir().join("default.toml")).unwrap();
    assert_eq!(cfg, CampaignConfig::default());
    let faults = CampaignConfig::from_file(&configs_dir().join("all_faults.toml")).unwrap();
    assert_eq!(faults.arm_faults.len(), 6);
}

#[test]
fn clean_run_exits_zero_and_writes_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seed_model_path = \"builtin:lenet_small\"\nrounds = 3\ntop_k = 2\ntrain_steps = 5\n");
    let out = tmp.path().join("out");
    let res = campaign(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let report = CampaignReport::from_json(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.rounds.len(), 3);
    assert!(report.defects.is_empty());
    assert!(String::from_utf8_lossy(&res.stdout).contains("3 rounds"));
}

#[test]
fn faulty_run_exits_two_and_its_defects_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "rounds = 3\ntop_k = 2\ntrain_steps = 6\n");
    let out = tmp.path().join("out");
    let res = campaign(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--arm-fault",
        "quadratic-slowdown",
        "--arm-fault",
        "leaked-allocation-per-step",
    ]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
    let report_path = out.join("report.json");
    let report = CampaignReport::from_json(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(!report.defects.is_empty());
    let rep = campaign(&["replay", "--report", report_path.to_str().unwrap(), "--defect", "0"]);
    assert_eq!(rep.status.code(), Some(0), "{}", String::from_utf8_lossy(&rep.stderr));
    let outcome: serde_json::Value = serde_json::from_slice(&rep.stdout).unwrap();
    assert_eq!(outcome["reproduced"], true);

    let missing = campaign(&["replay", "--report", report_path.to_str().unwrap(), "--defect", "9999"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn bad_config_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let unknown = write_config(tmp.path(), "roundz = 3\n");
    let res = campaign(&["run", "--config", &unknown]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("config error"));

    let zero = write_config(tmp.path(), "rounds = 0\n");
    assert_eq!(campaign(&["run", "--config", &zero]).status.code(), Some(1));
    let fault = write_config(tmp.path(), "arm_faults = [\"no-such-fault\"]\n");
    assert_eq!(campaign(&["run", "--config", &fault]).status.code(), Some(1));
    assert_eq!(campaign(&["run", "--config", "/nonexistent/campaign.toml"]).status.code(), Some(1));
}

#[test]
fn ablate_prints_one_summary_per_strategy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seed_model_path = \"builtin:mlp_regression\"\nrounds = 3\n");
    let res = campaign(&["ablate", "--config", &cfg, "--repetitions", "2", "--strategies", "double-q,random"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("double-q") && stdout.contains("random"));
    let json = &stdout[stdout.find('{').unwrap()..];
    let parsed: serde_json::Value = serde_json::from_str(json).unwrap();
    assert_eq!(parsed["runs"].as_array().unwrap().len(), 4);

    let out = tmp.path().join("abl");
    let res = campaign(&["ablate", "--config", &cfg, "--repetitions", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0));
    assert!(out.join("ablation.json").exists());
}
