//! From a sense pass-rate curve to per-level offset sigmas, then Flash and
//! SAR offset patterns and the conversion errors they cause.

use std::sync::Arc;

use cimsim::adcmodel::{sample_instance, sigma_profile, AdcKind, AdcSpec, PassRateCurve};
use cimsim::numstat::derive_stream;

fn main() -> cimsim::Result<()> {
    let spec = Arc::new(AdcSpec::uniform(5, 31)?);
    for wl in [1.0, 2.0] {
        let curve = PassRateCurve::new(0.97, 0.75, 1.5, wl)?;
        let sigmas = sigma_profile(&curve, &spec)?;
        println!("wl_param {wl}:");
        for k in [1, 8, 16, 24, 31] {
            println!(
                "  level {k:>2}: pass rate {:.4}  sigma {:.4}",
                curve.pass_rate_at(k, spec.n_thresholds())?,
                sigmas.sigmas[k - 1]
            );
        }
        for kind in [AdcKind::Flash, AdcKind::Sar] {
            let mut wrong = 0usize;
            let mut total = 0usize;
            for chip in 0..200u64 {
                let mut stream = derive_stream(chip, b"demo");
                let adc = sample_instance(spec.clone(), &sigmas, kind, &mut stream)?;
                for v in 0..=31 {
                    total += 1;
                    wrong += (adc.convert(v as f64) != spec.ideal_convert(v as f64)) as usize;
                }
            }
            println!("  {:>5}: {:.2}% of integer partial sums misconverted", kind.to_string(), 100.0 * wrong as f64 / total as f64);
        }
    }

    // A single SAR instance shifts every threshold the same way.
    let curve = PassRateCurve::new(0.97, 0.75, 1.5, 1.0)?;
    let adc = sample_instance(spec.clone(), &sigma_profile(&curve, &spec)?, AdcKind::Sar, &mut derive_stream(3, b"demo"))?;
    println!("\nSAR offsets (first 6): {:?}", &adc.offsets()[..6]);
    Ok(())
}
