//! Carlini-Wagner attacks under L2, L0 and L-infinity against the digital
//! model, saved as replayable adversarial sets.
//!
//! ```text
//! cargo run --release --example cw_attack -- model0.json [mnist_dir] [samples] [out_dir]
//! ```

use std::path::PathBuf;

use cimsim::attack::{run_attack, AdversarialSet, AttackConfig, GradientSource, Norm};
use cimsim::dataio::{load_mnist, Split};
use cimsim::nnquant::load_checkpoint;

fn main() -> cimsim::Result<()> {
    let mut args = std::env::args().skip(1);
    let ck = load_checkpoint(&PathBuf::from(args.next().unwrap_or_else(|| "model0.json".into())))?;
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "data/mnist".into()));
    let n: usize = args.next().map(|s| s.parse().expect("sample count")).unwrap_or(50);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/adv".into()));
    std::fs::create_dir_all(&out).map_err(|e| cimsim::Error::io(&out, e))?;

    let test = load_mnist(&dir, Split::Test)?;
    let idx: Vec<usize> = (0..n).collect();
    let (x, labels) = test.batch(&idx);
    let source = GradientSource::Digital(&ck.model);
    for norm in [Norm::L2, Norm::L0, Norm::Linf] {
        let cfg = AttackConfig::with_norm(norm);
        let r = run_attack(&source, &x, &labels, &cfg)?;
        let hits: Vec<f64> = r
            .distortion
            .iter()
            .zip(&r.success)
            .filter(|(d, s)| **s && **d > 0.0)
            .map(|(d, _)| *d)
            .collect();
        println!(
            "{norm:>4}: accuracy after attack {:5.2}%, mean distortion of successes {:.4}",
            r.source_accuracy,
            hits.iter().sum::<f64>() / hits.len().max(1) as f64
        );
        let path = out.join(format!("digital-{norm}.cimadv"));
        AdversarialSet::new("digital:model0", &cfg, &x, &labels, &r).save(&path)?;
    }
    Ok(())
}
