use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pin_core::config::RunConfig;
use pin_core::{pinf, state_file, train::TrainState};

fn pin(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pin"))
        .args(args)
        .current_dir(dir)
        .env_remove("PIN_SEED")
        .output()
        .expect("binary runs")
}

fn small_world(dir: &Path) {
    fs::write(
        dir.join("spec.json"),
        r#"{"D": 16, "n_train": 256, "n_id": 64, "n_ood": 64, "seed": 3}"#,
    )
    .unwrap();
    fs::write(
        dir.join("run.json"),
        r#"{"D": 16, "d": 8, "r_attn": 2, "lora_rank": 2, "batch_size": 32}"#,
    )
    .unwrap();
    let out = pin(&["gen-data", "--spec", "spec.json", "--out", "f.pinf"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_eval_export_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_world(d);
    let out = pin(
        &["train", "--data", "f.pinf", "--config", "run.json", "--out", "m.pinstate", "--curves", "c.csv"],
        d,
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).starts_with("config {"));

    let curves = fs::read_to_string(d.join("c.csv")).unwrap();
    assert!(curves.starts_with("# config {"));
    assert_eq!(curves.lines().count(), 2 + 8);

    let out = pin(&["export-curves", "--model", "m.pinstate"], d);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout(&out), curves);

    let out = pin(&["eval", "--data", "f.pinf", "--model", "m.pinstate", "--report", "r.csv"], d);
    assert_eq!(out.status.code(), Some(0));
    let report = fs::read_to_string(d.join("r.csv")).unwrap();
    assert!(report.lines().nth(1).unwrap().starts_with("domain,n,accuracy"));
    assert!(report.contains("ood_test,64,"));
}

#[test]
fn identical_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_world(d);
    for tag in ["a", "b"] {
        let m = format!("{tag}.pinstate");
        let c = format!("{tag}.csv");
        let out = pin(&["train", "--data", "f.pinf", "--config", "run.json", "--out", &m, "--curves", &c], d);
        assert!(out.status.success());
    }
    assert_eq!(fs::read(d.join("a.pinstate")).unwrap(), fs::read(d.join("b.pinstate")).unwrap());
    assert_eq!(fs::read(d.join("a.csv")).unwrap(), fs::read(d.join("b.csv")).unwrap());
}

#[test]
fn zero_epochs_writes_init_state() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_world(d);
    let out = pin(
        &["train", "--data", "f.pinf", "--config", "run.json", "--out", "m.pinstate", "--epochs", "0"],
        d,
    );
    assert_eq!(out.status.code(), Some(0));
    let saved = state_file::load_state(d.join("m.pinstate")).unwrap();
    let mut cfg = RunConfig::from_json(&fs::read_to_string(d.join("run.json")).unwrap()).unwrap();
    cfg.epochs = 0;
    let init = TrainState::init(&cfg, &pinf::read_features(d.join("f.pinf")).unwrap()).unwrap();
    assert_eq!(fs::read(d.join("m.pinstate")).unwrap(), state_file::encode_state(&init));
    assert!(saved.curves.is_empty());
}

#[test]
fn seed_environment_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_world(d);
    let out = Command::new(env!("CARGO_BIN_EXE_pin"))
        .args(["train", "--data", "f.pinf", "--config", "run.json", "--out", "m.pinstate", "--epochs", "0"])
        .current_dir(d)
        .env("PIN_SEED", "42")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(stdout(&out).contains("seed 42"));
    assert_eq!(state_file::load_state(d.join("m.pinstate")).unwrap().config.seed, 42);
}

#[test]
fn bad_magic_exits_two_with_offset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_world(d);
    let mut bytes = fs::read(d.join("f.pinf")).unwrap();
    bytes[..4].copy_from_slice(b"NOPE");
    fs::write(d.join("bad.pinf"), bytes).unwrap();
    let out = pin(&["train", "--data", "bad.pinf", "--config", "run.json", "--out", "m.pinstate"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte 0"));
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(pin(&["train", "--bogus"], d).status.code(), Some(1));
    assert_eq!(pin(&["frobnicate"], d).status.code(), Some(1));
    fs::write(d.join("bad.json"), r#"{"lambda": 0.2}"#).unwrap();
    assert_eq!(pin(&["check", "--config", "bad.json"], d).status.code(), Some(1));
    assert_eq!(pin(&["--help"], d).status.code(), Some(0));
}

#[test]
fn check_passes_on_small_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.json"), r#"{"D": 16, "d": 8, "r_attn": 2, "lora_rank": 2}"#).unwrap();
    let out = pin(&["check", "--config", "run.json"], d);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.contains("ok   gradient/noise_gen"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn check_passes_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = pin(&["check"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
}

#[test]
fn ablate_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_world(d);
    let out = pin(
        &["ablate", "--data", "f.pinf", "--config", "run.json", "--seeds", "3", "--modes", "none,pin", "--report", "a.csv"],
        d,
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(table.lines().filter(|l| l.contains(",median,")).count(), 2);
    assert_eq!(pin(&["ablate", "--data", "f.pinf", "--seeds", "2"], d).status.code(), Some(1));
}
