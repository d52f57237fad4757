use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cocofed::aoa::read_batches;
use cocofed::config::ExperimentConfig;

fn cocofed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cocofed")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

const TINY: &str = r#"{
    "_note": "small enough for a test",
    "K": 2, "U": 1, "T": 8, "N_NB": 4, "r": 2, "r_a": 4, "N_loc": 2, "rounds": 2,
    "buffer_capacity": 8, "layer_dims": [[8, 6], [6, 4]], "minibatch": 2, "test_size": 8
}"#;

#[test]
fn account_prints_default_ledger() {
    let o = cocofed(&["account"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["uplink_bits_per_round"], 43_392);
    assert_eq!(v["downlink_bits_per_round"], 28_832);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&cocofed(&["bogus"])), 1);
    assert_eq!(code(&cocofed(&[])), 1);
    assert_eq!(code(&cocofed(&["train", "--rounds", "many"])), 1);
}

#[test]
fn config_errors_exit_two_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    for (text, key) in [(r#"{"r": 100}"#, "`r`"), (r#"{"q_U": 0}"#, "`q_U`"), (r#"{"colour": 1}"#, "colour")] {
        let p = write(dir.path(), "c.json", text);
        let o = cocofed(&["account", "--config", &p]);
        assert_eq!(code(&o), 2, "{text}");
        assert!(String::from_utf8_lossy(&o.stderr).contains(key), "{text}");
    }
    let p = write(dir.path(), "broken.json", "{");
    assert_eq!(code(&cocofed(&["account", "--config", &p])), 2);
    assert_eq!(code(&cocofed(&["account", "--config", "/definitely/missing.json"])), 2);
}

#[test]
fn zero_rounds_write_setup_row_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.json", TINY);
    let out = dir.path().join("run");
    let o = cocofed(&["train", "--config", &cfg, "--rounds", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "round,test_mse,uplink_bits,downlink_bits,grad_norm,local_losses,config_hash");
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields[0], "0");
    assert_eq!((fields[2], fields[3]), ("128", "160"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["total_uplink_bits"], 0);
    assert_eq!(summary["ledger"]["uplink_bits_per_round"], 128);
    assert!(summary["final_mse"].as_f64().unwrap().is_finite());
    // Every stderr line is a JSON object.
    for line in String::from_utf8_lossy(&o.stderr).lines() {
        assert!(serde_json::from_str::<serde_json::Value>(line).unwrap().is_object());
    }
}

#[test]
fn training_is_byte_reproducible_and_flags_override_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.json", TINY);
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--config", cfg.as_str(), "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        assert_eq!(code(&cocofed(&args)), 0);
        fs::read_to_string(out.join("metrics.csv")).unwrap()
    };
    let a = run("a", &[]);
    assert_eq!(a.lines().count(), 4);
    assert_eq!(a, run("b", &[]));

    let seeded = run("c", &["--seed", "7", "--mode", "fedavg", "--rounds", "1"]);
    assert_eq!(seeded.lines().count(), 3);
    let mut want = ExperimentConfig::from_json(TINY).unwrap();
    want.master_seed = 7;
    want.mode = cocofed::config::Mode::Fedavg;
    want.rounds = 1;
    assert!(seeded.lines().nth(1).unwrap().ends_with(&want.hash()));
}

#[test]
fn gen_data_writes_readable_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.json", TINY);
    let out = dir.path().join("data");
    let o = cocofed(&["gen-data", "--config", &cfg, "--blocks", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    for k in 0..2 {
        let batches = read_batches(&out.join(format!("gnb_{k}.bin")), k).unwrap();
        assert_eq!(batches.len(), 3);
        assert_eq!((batches[0].n_antennas(), batches[0].n_snapshots()), (4, 8));
    }
}

#[test]
fn verify_exit_code_matches_report() {
    let o = cocofed(&["verify"]);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let passed = report["passed"].as_bool().unwrap();
    assert_eq!(code(&o), if passed { 0 } else { 3 });
    let checks = report["checks"].as_array().unwrap();
    assert!(checks.len() >= 9);
    assert_eq!(passed, checks.iter().all(|c| c["passed"].as_bool().unwrap()));
}
