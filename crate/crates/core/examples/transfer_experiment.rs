//! Runs the whole protocol (baseline, chips, finetune, the three attack
//! cases, the transfer matrix), writes the report, then replays it from
//! the serialized artifacts.
//!
//! ```text
//! cargo run --release --example transfer_experiment -- [config.json] [model0.json]
//! ```
//!
//! Without a config the quick variant of the default configuration is used
//! with two configurations (SAR at wl 1 and Flash at wl 1) and L2 only.

use std::path::PathBuf;

use cimsim::attack::{AttackConfig, Norm};
use cimsim::harness::{replay, run_experiment, ExperimentConfig};
use cimsim::nnquant::load_checkpoint;

fn main() -> cimsim::Result<()> {
    let mut args = std::env::args().skip(1);
    let cfg = match args.next() {
        Some(p) => ExperimentConfig::load(&PathBuf::from(p))?,
        None => {
            let mut c = ExperimentConfig::default().quick();
            c.chips.retain(|s| s.config == "A" || s.config == "C");
            c.attacks = vec![AttackConfig::with_norm(Norm::L2)];
            c
        }
    };
    let model0 = args.next().map(|p| load_checkpoint(&PathBuf::from(p))).transpose()?;

    let report = run_experiment(&cfg, model0)?;
    println!("model0 clean accuracy {:.2}%", report.model0_accuracy);
    for r in &report.table1 {
        println!(
            "{} {} wl {}: retrained {:.2}%, case1 {:.2}% (model0 {:.2}%), case2 {:.2}% (model1 {:.2}%), case3 {:.2}% (chip2 {:.2}%)",
            r.config,
            r.adc_kind,
            r.wl_param,
            r.retrained_accuracy,
            r.case1_attack_on_chip1,
            r.software_attack_model0,
            r.case2_attack_on_chip1,
            r.software_attack_model1,
            r.case3_attack_on_chip1,
            r.chip2_after_attack
        );
    }
    if let Some(m) = &report.transfer_matrix {
        println!("transfer matrix (rows: attacked chip, columns: evaluated chip)");
        for (name, row) in m.chips.iter().zip(&m.values) {
            println!("  {name:>8} {}", row.iter().map(|v| format!("{v:6.2}")).collect::<Vec<_>>().join(" "));
        }
    }
    let replayed = replay(&cfg.out_dir)?;
    assert_eq!(replayed, report);
    println!("replayed {} adversarial sets from {}", report.adversarial_sets.len(), cfg.out_dir.display());
    Ok(())
}
