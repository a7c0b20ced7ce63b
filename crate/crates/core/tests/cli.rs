mod common;

use std::path::Path;
use std::process::Command;

use cimsim::chip::ChipDescriptor;
use cimsim::harness::ExperimentConfig;

fn cimsim(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cimsim")).args(args).output().unwrap()
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_json().unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn malformed_config_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("bad.json");
    std::fs::write(&p, "{ not json").unwrap();
    let out = cimsim(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let mut cfg = ExperimentConfig::default();
    cfg.chips.truncate(1);
    let p = write_config(d.path(), &cfg);
    assert_eq!(cimsim(&["transfer", "--config", &p]).status.code(), Some(2));
}

#[test]
fn missing_flags_and_unknown_subcommands_exit_2() {
    assert_eq!(cimsim(&["report"]).status.code(), Some(2));
    assert_eq!(cimsim(&["finetune"]).status.code(), Some(2));
    assert_eq!(cimsim(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_3() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.dir = d.path().join("nowhere");
    let p = write_config(d.path(), &cfg);
    let out = cimsim(&["train", "--config", &p, "--out", d.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn diverging_training_exits_4() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_config(d.path().into());
    cfg.train.learning_rate = 1e308;
    cfg.train.max_train_samples = Some(640);
    let p = write_config(d.path(), &cfg);
    let out = cimsim(&["train", "--config", &p]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn make_chip_writes_loadable_descriptors() {
    let d = tempfile::tempdir().unwrap();
    let out_dir = d.path().to_str().unwrap();
    let out = cimsim(&["make-chip", "--out", out_dir]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let listed = String::from_utf8(out.stdout).unwrap();
    assert_eq!(listed.lines().count(), ExperimentConfig::default().chips.len());
    let desc = ChipDescriptor::load(&d.path().join("chips/A-101.chip.json")).unwrap();
    assert_eq!(desc.chip_seed, 101);

    let out = cimsim(&["make-chip", "--out", out_dir, "--seed", "77"]);
    assert!(out.status.success());
    let desc = ChipDescriptor::load(&d.path().join("chips/A-77.chip.json")).unwrap();
    assert_eq!(desc.chip_seed, 77);

    // The printed offset hash is a pure function of the descriptor.
    let again = cimsim(&["make-chip", "--out", out_dir, "--seed", "77"]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), String::from_utf8(out.stdout).unwrap());
}
