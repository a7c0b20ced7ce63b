//! Builds chip descriptors, derives their static offset tables, and shows
//! that a descriptor alone re-derives the same chip.
//!
//! ```text
//! cargo run --release --example make_chip -- [out_dir]
//! ```

use std::path::PathBuf;

use cimsim::adcmodel::{AdcKind, PassRateCurve};
use cimsim::chip::{make_chip, ChipDescriptor};
use cimsim::crossbar::ArrayConfig;
use cimsim::nnquant::{QuantConfig, QuantizedModel};

fn main() -> cimsim::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/chips".into()));
    std::fs::create_dir_all(&out).map_err(|e| cimsim::Error::io(&out, e))?;
    let model = QuantizedModel::desk_cnn(1, QuantConfig::default())?;
    let curve = PassRateCurve::new(0.97, 0.75, 1.5, 1.0)?;

    for (kind, seed) in [(AdcKind::Sar, 101), (AdcKind::Sar, 102), (AdcKind::Flash, 301)] {
        let desc = ChipDescriptor::for_model(&model, seed, ArrayConfig::integer_grid(), curve.clone(), kind, 1.0);
        let chip = make_chip(&desc)?;
        let converters: usize = chip.adcs().iter().flatten().map(|a| a.len()).sum();
        let first = &chip.adcs()[0][0][0];
        println!(
            "{kind} seed {seed}: {converters} converters, first offsets {:+.3} {:+.3} {:+.3}",
            first.offsets()[0],
            first.offsets()[1],
            first.offsets()[2]
        );
        let path = out.join(format!("{kind}-{seed}.chip.json"));
        desc.save(&path)?;
        let again = make_chip(&ChipDescriptor::load(&path)?)?;
        assert_eq!(again.offset_hash(), chip.offset_hash());
        println!("  {} -> offsets sha256 {}", path.display(), chip.offset_hash());
    }
    Ok(())
}
