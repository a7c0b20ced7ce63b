//! Programs a trained checkpoint onto chips of every converter kind and
//! variation level and compares their accuracy with the digital model.
//!
//! ```text
//! cargo run --release --example chip_inference -- model0.json [mnist_dir] [samples]
//! ```

use std::path::PathBuf;

use cimsim::adcmodel::AdcKind;
use cimsim::chip::{make_chip, ChipDescriptor};
use cimsim::crossbar::ArrayConfig;
use cimsim::dataio::{load_mnist, Split};
use cimsim::harness::default_pass_rate;
use cimsim::nnquant::{accuracy, load_checkpoint};

fn main() -> cimsim::Result<()> {
    let mut args = std::env::args().skip(1);
    let ck = load_checkpoint(&PathBuf::from(args.next().unwrap_or_else(|| "model0.json".into())))?;
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "data/mnist".into()));
    let n: usize = args.next().map(|s| s.parse().expect("sample count")).unwrap_or(2000);
    let test = load_mnist(&dir, Split::Test)?.head(n);

    println!("digital           {:6.2}%", accuracy(&ck.model, &test, 500)?);
    for kind in [AdcKind::Sar, AdcKind::Flash] {
        for wl in [1.0, 2.0] {
            for (label, scale) in [("ideal", 0.0), ("offsets", 1.0)] {
                let curve = default_pass_rate().with_wl(wl)?;
                let desc = ChipDescriptor::for_model(&ck.model, 7, ArrayConfig::integer_grid(), curve, kind, scale);
                let mut chip = make_chip(&desc)?;
                chip.program(&ck.model)?;
                println!(
                    "{:<5} wl {wl} {label:<7} {:6.2}%",
                    kind.to_string(),
                    accuracy(&chip, &test, 500)?
                );
            }
        }
    }
    Ok(())
}
