//! Recovers a high-variation SAR chip's accuracy by finetuning with the
//! chip in the forward pass, then shows that the finetuned weights read
//! back from the chip no longer fit an ideal digital evaluation.
//!
//! ```text
//! cargo run --release --example hybrid_finetune -- model0.json [mnist_dir] [chip_seed]
//! ```

use std::path::PathBuf;

use cimsim::adcmodel::AdcKind;
use cimsim::chip::{make_chip, ChipDescriptor};
use cimsim::crossbar::ArrayConfig;
use cimsim::dataio::{load_mnist, Split};
use cimsim::harness::default_pass_rate;
use cimsim::nnquant::{accuracy, finetune_hybrid, load_checkpoint, FinetuneConfig, QuantizedModel};

fn main() -> cimsim::Result<()> {
    let mut args = std::env::args().skip(1);
    let ck = load_checkpoint(&PathBuf::from(args.next().unwrap_or_else(|| "model0.json".into())))?;
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "data/mnist".into()));
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(101);
    let train = load_mnist(&dir, Split::Train)?;
    let test = load_mnist(&dir, Split::Test)?;

    let desc = ChipDescriptor::for_model(&ck.model, seed, ArrayConfig::integer_grid(), default_pass_rate(), AdcKind::Sar, 1.0);
    let mut chip = make_chip(&desc)?;
    chip.program(&ck.model)?;
    let mut model = ck.model.clone();
    let cfg = FinetuneConfig::from_baseline(ck.final_learning_rate, seed);
    let report = finetune_hybrid(&mut chip, &mut model, &train, &test.head(1000), &cfg)?;

    println!("retrain curve (iteration, accuracy on 1000 test images):");
    for (it, acc) in &report.curve {
        println!("  {it:>4} {acc:6.2}%");
    }
    println!("digital model0       {:6.2}%", accuracy(&ck.model, &test, 500)?);
    println!("chip after finetune  {:6.2}%", accuracy(&chip, &test, 500)?);
    let model1 = QuantizedModel::from_readout(&ck.model, &chip.readout()?)?;
    println!("readout, digital     {:6.2}%", accuracy(&model1, &test, 500)?);
    Ok(())
}
