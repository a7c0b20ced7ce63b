//! Command-line front end for the experiment harness.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric
//! failure, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cimsim::attack::{evaluate_on, run_attack, AdversarialSet, GradientSource};
use cimsim::chip::{make_chip, ChipDescriptor};
use cimsim::harness::{self, ExperimentConfig};
use cimsim::nnquant::{accuracy, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
use cimsim::{Error, Result};

#[derive(Parser)]
#[command(name = "cimsim", version, about = "CIM chip variation and adversarial transfer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config JSON (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed (or the chip seed for make-chip).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Chip descriptor file.
    #[arg(long)]
    chip: Option<PathBuf>,
    /// Model checkpoint file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use the reduced sample counts.
    #[arg(long)]
    quick: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train model0 and write model0.json.
    Train(Common),
    /// Write chip descriptors for the configured grid.
    MakeChip(Common),
    /// Hybrid-finetune a checkpoint on a chip.
    Finetune(Common),
    /// Attack a checkpoint, or a chip with the chip in the loop.
    Attack(Common),
    /// Run the full protocol and write the report.
    Transfer(Common),
    /// Recompute the report in --out from its serialized artifacts.
    Report(Common),
}

fn config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.master_seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if c.quick {
        cfg = cfg.quick();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn train(c: &Common) -> Result<()> {
    let cfg = config(c)?;
    let data = harness::load_data(&cfg.dataset)?;
    let (ck, report) = harness::train_model0(&cfg, &data.train)?;
    mkdir(&cfg.out_dir)?;
    save_checkpoint(&cfg.out_dir.join("model0.json"), &ck)?;
    let acc = accuracy(&ck.model, &data.test, 500)?;
    print_json(&serde_json::json!({
        "epoch_losses": report.epoch_losses,
        "act_clips": report.act_clips,
        "test_accuracy": acc,
    }))
}

fn make_chip_cmd(c: &Common) -> Result<()> {
    let mut cfg = config(&Common { seed: None, ..c.clone() })?;
    let model = match &c.checkpoint {
        Some(p) => load_checkpoint(p)?.model,
        None => cfg.build_network()?,
    };
    if let Some(seed) = c.seed {
        let mut spec = cfg.chips[0].clone();
        spec.seed = seed;
        cfg.chips = vec![spec];
    }
    let dir = cfg.out_dir.join("chips");
    mkdir(&dir)?;
    for spec in &cfg.chips {
        let desc = cfg.descriptor(&model, spec)?;
        let chip = make_chip(&desc)?;
        let path = dir.join(format!("{}.chip.json", spec.name()));
        desc.save(&path)?;
        println!("{} {}", path.display(), chip.offset_hash());
    }
    Ok(())
}

fn finetune(c: &Common) -> Result<()> {
    let cfg = config(c)?;
    let chip_path = required(&c.chip, "chip")?;
    let ck = load_checkpoint(required(&c.checkpoint, "checkpoint")?)?;
    let desc = ChipDescriptor::load(chip_path)?;
    let data = harness::load_data(&cfg.dataset)?;
    let eval = data.test.head(cfg.samples.eval);
    let mut chip = make_chip(&desc)?;
    chip.program(&ck.model)?;
    let mut model = ck.model.clone();
    let f = &cfg.finetune;
    let ft = cimsim::nnquant::FinetuneConfig {
        epochs: f.epochs,
        batch_size: f.batch_size,
        learning_rate: ck.final_learning_rate * f.lr_factor,
        momentum: f.momentum,
        seed: cfg.master_seed,
        eval_interval: f.eval_interval,
        max_train_samples: f.max_train_samples,
    };
    let report = cimsim::nnquant::finetune_hybrid(&mut chip, &mut model, &data.train, &eval.head(cfg.samples.curve), &ft)?;
    mkdir(&cfg.out_dir)?;
    let stem = chip_path
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.trim_end_matches(".json").trim_end_matches(".chip"))
        .unwrap_or("chip");
    save_checkpoint(
        &cfg.out_dir.join(format!("{stem}.model.json")),
        &Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model,
            final_learning_rate: ck.final_learning_rate,
            train_seed: ck.train_seed,
        },
    )?;
    print_json(&serde_json::json!({
        "retrain_curve": report.curve,
        "accuracy_before": report.accuracy_before,
        "accuracy_after": accuracy(&chip, &eval, 500)?,
    }))
}

fn attack(c: &Common) -> Result<()> {
    let cfg = config(c)?;
    let ck = load_checkpoint(required(&c.checkpoint, "checkpoint")?)?;
    let data = harness::load_data(&cfg.dataset)?;
    let s = &cfg.samples;
    if s.attack_offset + s.attack > data.test.len() {
        return Err(Error::Config("attack slice exceeds the test split".into()));
    }
    let idx: Vec<usize> = (s.attack_offset..s.attack_offset + s.attack).collect();
    let (x, labels) = data.test.batch(&idx);
    let chip = match &c.chip {
        Some(p) => {
            let mut chip = make_chip(&ChipDescriptor::load(p)?)?;
            chip.program(&ck.model)?;
            Some(chip)
        }
        None => None,
    };
    let (source, label) = match &chip {
        Some(ch) => (GradientSource::HybridChip(ch), "hybrid"),
        None => (GradientSource::Digital(&ck.model), "digital"),
    };
    let dir = cfg.out_dir.join("adv");
    mkdir(&dir)?;
    for a in &cfg.attacks {
        let before = evaluate_on(&source, &x, &labels)?;
        let r = run_attack(&source, &x, &labels, a)?;
        let path = dir.join(format!("attack-{label}-{}.cimadv", a.norm));
        AdversarialSet::new(label, a, &x, &labels, &r).save(&path)?;
        println!(
            "{} {}: accuracy {before:.2} -> {:.2}, mean distortion {:.4} ({})",
            label,
            a.norm,
            r.source_accuracy,
            r.distortion.iter().sum::<f64>() / r.distortion.len() as f64,
            path.display()
        );
    }
    Ok(())
}

fn transfer(c: &Common) -> Result<()> {
    let cfg = config(c)?;
    let model0 = c.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let report = harness::run_experiment(&cfg, model0)?;
    print!("{}", String::from_utf8_lossy(&harness::table1_csv(&report)?));
    println!("report written to {}", cfg.out_dir.join("report.json").display());
    Ok(())
}

fn report(c: &Common) -> Result<()> {
    let dir = required(&c.out, "out")?;
    let replayed = harness::replay(dir)?;
    let path = dir.join("report.json");
    let stored = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    print!("{}", String::from_utf8_lossy(&harness::table1_csv(&replayed)?));
    if replayed.to_json()? != stored {
        return Err(Error::State("replayed report differs from the stored report".into()));
    }
    println!("replay matches {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => train(c),
        Command::MakeChip(c) => make_chip_cmd(c),
        Command::Finetune(c) => finetune(c),
        Command::Attack(c) => attack(c),
        Command::Transfer(c) => transfer(c),
        Command::Report(c) => report(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
