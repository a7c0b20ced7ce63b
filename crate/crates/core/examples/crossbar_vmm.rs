//! Maps a small signed weight matrix onto bit-sliced sub-arrays and runs
//! a bit-serial product, with exact partial sums and with offset
//! converters.

use std::sync::Arc;

use cimsim::adcmodel::{sample_instance, sigma_profile, AdcKind, PassRateCurve};
use cimsim::crossbar::{collect_terms, map_weights, ArrayConfig};
use cimsim::numstat::derive_stream;

fn main() -> cimsim::Result<()> {
    let cfg = ArrayConfig::integer_grid();
    let (outs, ins, wb) = (4, 24, 4);
    let mut s = derive_stream(5, b"weights");
    let w: Vec<i32> = (0..outs * ins).map(|_| s.below(16) as i32 - 8).collect();
    let x: Vec<u32> = (0..ins).map(|_| s.below(256) as u32).collect();

    let layer = map_weights(&w, outs, ins, &cfg, wb)?;
    assert_eq!(layer.reassembled_weights(), w);
    println!(
        "{} sub-array(s), {} slices per weight, shift {}",
        layer.sub_arrays.len(),
        layer.n_slices,
        layer.shift
    );

    let reference: Vec<i64> = (0..outs)
        .map(|o| (0..ins).map(|i| w[o * ins + i] as i64 * x[i] as i64).sum())
        .collect();

    let spec = Arc::new(cfg.adc_spec()?);
    let sigmas = sigma_profile(&PassRateCurve::new(0.97, 0.75, 1.5, 1.0)?, &spec)?;
    let adcs: Vec<Vec<_>> = layer
        .sub_arrays
        .iter()
        .enumerate()
        .map(|(a, sa)| {
            (0..sa.n_cols)
                .map(|c| sample_instance(spec.clone(), &sigmas, AdcKind::Sar, &mut derive_stream(9, format!("{a}/{c}").as_bytes())))
                .collect::<cimsim::Result<Vec<_>>>()
        })
        .collect::<cimsim::Result<_>>()?;

    for (label, conv) in [("exact", None), ("with offsets", Some(adcs.as_slice()))] {
        let terms = collect_terms(&layer, &x, 8, conv)?;
        let mut y = vec![0i64; outs];
        for t in &terms {
            let sa = &layer.sub_arrays[t.array];
            for (c, code) in t.codes.iter().enumerate() {
                y[sa.column_output[c]] += (*code as i64) * (sa.slice_significance[c] as i64) << t.bit;
            }
            for (o, yo) in y.iter_mut().enumerate() {
                if sa.column_output.contains(&o) {
                    *yo -= layer.shift * (t.active as i64) << t.bit;
                }
            }
        }
        println!("{label:>13}: {y:?}");
    }
    println!("{:>13}: {reference:?}", "reference");
    Ok(())
}
