mod common;

use cimsim::adcmodel::AdcKind;
use cimsim::attack::{AttackConfig, Norm};
use cimsim::harness::*;
use cimsim::Error;

use common::{chip, tiny_config};

#[test]
fn protocol_is_deterministic_and_replayable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment(&tiny_config(a.path().into()), None).unwrap();
    let rb = run_experiment(&tiny_config(b.path().into()), None).unwrap();

    // Only out_dir differs between the two configs.
    let mut rb_same_dir = rb.clone();
    rb_same_dir.config.out_dir = ra.config.out_dir.clone();
    assert_eq!(ra.to_json().unwrap(), rb_same_dir.to_json().unwrap());
    for f in ["table1.csv", "transfer_matrix.csv"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }

    let stored = std::fs::read_to_string(a.path().join("report.json")).unwrap();
    assert_eq!(TransferReport::from_json(&stored).unwrap(), ra);
    let replayed = replay(a.path()).unwrap();
    assert_eq!(replayed.to_json().unwrap(), stored);

    // Structural checks on the report.
    assert_eq!(ra.table1.len(), 1);
    assert_eq!(ra.norm_table.len(), 1);
    let m = ra.transfer_matrix.as_ref().unwrap();
    assert_eq!(m.values.len(), 2);
    assert!(m.values.iter().all(|r| r.len() == 2));
    for r in &ra.table1 {
        for v in [
            r.accuracy_before_finetune,
            r.retrained_accuracy,
            r.software_attack_model0,
            r.case1_attack_on_chip1,
            r.digital_accuracy_model1,
            r.software_attack_model1,
            r.case2_attack_on_chip1,
            r.chip2_after_attack,
            r.case3_attack_on_chip1,
        ] {
            assert!((0.0..=100.0).contains(&v));
        }
        for set in [&r.case1_set, &r.case2_set, &r.case3_set] {
            assert!(ra.adversarial_sets.iter().any(|s| &s.name == set));
        }
    }
    for s in &ra.adversarial_sets {
        assert!(a.path().join(&s.file).exists());
    }
    let csv = std::fs::read_to_string(a.path().join("table1.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), TABLE1_HEADER.join(","));
    assert!(!a.path().join("table2.csv").exists());
}

#[test]
fn replay_detects_a_tampered_set() {
    let d = tempfile::tempdir().unwrap();
    let report = run_experiment(&tiny_config(d.path().into()), None).unwrap();
    let file = d.path().join(&report.adversarial_sets[0].file);
    let mut bytes = std::fs::read(&file).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&file, bytes).unwrap();
    assert!(matches!(replay(d.path()), Err(Error::State(_))));
}

#[test]
fn zero_sigma_grid_keeps_model0_everywhere() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(d.path().into());
    cfg.sigma_scale = 0.0;
    cfg.transfer_matrix = false;
    let data = load_data(&cfg.dataset).unwrap();
    let s = setup(&cfg, &data, None).unwrap();
    for c in &s.chips {
        assert_eq!(c.accuracy_before, c.accuracy_after);
        assert_eq!(c.accuracy_after, s.model0_accuracy);
    }
    let (report, _) = run_protocol(&s).unwrap();
    let r = &report.table1[0];
    assert_eq!(r.case1_attack_on_chip1, r.software_attack_model0);
    assert_eq!(r.digital_accuracy_model1, s.model0_accuracy);
    assert!(report.transfer_matrix.is_none());
}

#[test]
fn several_norms_fill_the_norm_table() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(d.path().into());
    cfg.transfer_matrix = false;
    let mut linf = cfg.attacks[0].clone();
    linf.norm = Norm::Linf;
    linf.max_rounds = 2;
    cfg.attacks.push(linf);
    let report = run_experiment(&cfg, None).unwrap();
    assert_eq!(report.norm_table.len(), 2);
    assert_eq!(report.norm_table[1].norm, Norm::Linf);
    let csv = std::fs::read_to_string(d.path().join("table2.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), TABLE2_HEADER.join(","));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn config_validation() {
    let base = ExperimentConfig::default();
    base.validate().unwrap();
    let round = ExperimentConfig::from_json(&base.to_json().unwrap()).unwrap();
    assert_eq!(round, base);
    assert_eq!(base.groups().len(), 4);

    let mut one = base.clone();
    one.chips.truncate(1);
    assert!(matches!(one.validate(), Err(Error::Config(_))));

    let mut lonely = base.clone();
    lonely.chips.push(chip("E", AdcKind::Sar, 1.0, 9));
    assert!(matches!(lonely.validate(), Err(Error::Config(_))));

    let mut mixed = base.clone();
    mixed.chips[1].wl_param = 3.0;
    assert!(matches!(mixed.validate(), Err(Error::Config(_))));

    let mut dup = base.clone();
    dup.chips[1].seed = dup.chips[0].seed;
    assert!(matches!(dup.validate(), Err(Error::Config(_))));

    let mut no_attack = base.clone();
    no_attack.attacks.clear();
    assert!(matches!(no_attack.validate(), Err(Error::Config(_))));

    let mut bad_attack = base.clone();
    bad_attack.attacks = vec![AttackConfig {
        step_size: 0.0,
        ..AttackConfig::default()
    }];
    assert!(bad_attack.validate().is_err());

    let mut version = base.clone();
    version.format_version = 99;
    assert!(matches!(version.validate(), Err(Error::Config(_))));

    assert!(matches!(ExperimentConfig::from_json("{\"format_version\": 1}"), Err(Error::Config(_))));

    let quick = base.clone().quick();
    assert_eq!(quick.samples.attack, 200);
    assert_eq!(quick.samples.eval, base.samples.quick_eval);
}

#[test]
fn attack_slice_beyond_the_test_split_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(d.path().into());
    cfg.samples.attack_offset = 9995;
    let data = load_data(&cfg.dataset).unwrap();
    let ck = train_model0(&cfg, &data.train.head(200)).unwrap().0;
    assert!(matches!(setup(&cfg, &data, Some(ck)), Err(Error::Config(_))));
}
