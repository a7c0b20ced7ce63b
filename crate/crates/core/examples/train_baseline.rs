//! Trains the desk CNN on MNIST and saves a checkpoint.
//!
//! ```text
//! cargo run --release --example train_baseline -- [mnist_dir] [out.json]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use cimsim::dataio::{load_mnist, Split};
use cimsim::nnquant::{accuracy, save_checkpoint, train_baseline, Checkpoint, QuantConfig, QuantizedModel, TrainConfig, CHECKPOINT_FORMAT_VERSION};

fn main() -> cimsim::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "data/mnist".into()));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "model0.json".into()));
    let train = load_mnist(&dir, Split::Train)?;
    let test = load_mnist(&dir, Split::Test)?;

    let cfg = TrainConfig::default();
    let mut model = QuantizedModel::desk_cnn(cfg.seed, QuantConfig::default())?;
    let t = Instant::now();
    let report = train_baseline(&mut model, &train, &cfg)?;
    println!("epoch losses {:?}", report.epoch_losses);
    println!("activation clips {:?}", report.act_clips);
    println!("trained in {:.1} s", t.elapsed().as_secs_f64());
    println!("test accuracy {:.2}%", accuracy(&model, &test, 500)?);

    save_checkpoint(
        &out,
        &Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model,
            final_learning_rate: report.final_learning_rate,
            train_seed: cfg.seed,
        },
    )?;
    println!("wrote {}", out.display());
    Ok(())
}
