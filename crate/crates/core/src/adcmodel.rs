//! Sense-amplifier pass-rate curves, reference-offset sigmas and static
//! Flash/SAR offset patterns.
//!
//! Thresholds and reconstruction levels live in partial-sum units. Code `k`
//! reconstructs to `levels[k]`; threshold `k` (1-based) sits halfway between
//! `levels[k-1]` and `levels[k]`, so with `psum_max == 2^N - 1` the levels are
//! the integers and the thresholds are `k - 0.5`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numstat::{inv_norm_cdf, sample_normal, RngStream};

/// Fractional bits of the fixed-point reconstruction levels used by the
/// integer accumulation path.
pub const LEVEL_FRAC_BITS: u32 = 16;

/// Parametric sense pass rate per reference level.
///
/// `p(k) = 1 - (1 - base(k)) / wl_param` with
/// `base(k) = p_low - (p_low - p_high) * ((k-1)/(n-1))^shape_gamma`.
/// `wl_param = 1` is the neutral device size; larger values shrink the
/// failure probability at every level. An explicit per-level `table`
/// replaces `base(k)` when present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassRateCurve {
    pub p_low: f64,
    pub p_high: f64,
    pub shape_gamma: f64,
    pub wl_param: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<f64>>,
}

impl PassRateCurve {
    pub fn new(p_low: f64, p_high: f64, shape_gamma: f64, wl_param: f64) -> Result<Self> {
        let curve = PassRateCurve {
            p_low,
            p_high,
            shape_gamma,
            wl_param,
            table: None,
        };
        curve.validate()?;
        Ok(curve)
    }

    pub fn with_wl(&self, wl_param: f64) -> Result<Self> {
        let mut c = self.clone();
        c.wl_param = wl_param;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.5 < self.p_high && self.p_high <= self.p_low && self.p_low < 1.0) {
            return Err(Error::Config(format!(
                "pass-rate curve needs 0.5 < p_high <= p_low < 1, got p_low={} p_high={}",
                self.p_low, self.p_high
            )));
        }
        if !(self.shape_gamma > 0.0 && self.shape_gamma.is_finite()) {
            return Err(Error::Config("shape_gamma must be positive".into()));
        }
        if !(self.wl_param > 0.0 && self.wl_param.is_finite()) {
            return Err(Error::Config("wl_param must be positive".into()));
        }
        if let Some(t) = &self.table {
            if t.iter().any(|p| !(*p > 0.5 && *p < 1.0)) {
                return Err(Error::Config("pass-rate table entries must lie in (0.5, 1)".into()));
            }
            if t.windows(2).any(|w| w[1] > w[0]) {
                return Err(Error::Config("pass-rate table must be non-increasing".into()));
            }
        }
        Ok(())
    }

    /// Pass rate at reference level `level` in `1..=n_levels`.
    pub fn pass_rate_at(&self, level: usize, n_levels: usize) -> Result<f64> {
        if n_levels == 0 || level == 0 || level > n_levels {
            return Err(Error::Domain(format!(
                "level {level} outside 1..={n_levels}"
            )));
        }
        let base = match &self.table {
            Some(t) => *t.get(level - 1).ok_or_else(|| {
                Error::Config(format!("pass-rate table has {} entries, need {n_levels}", t.len()))
            })?,
            None => {
                let frac = if n_levels == 1 {
                    0.0
                } else {
                    (level - 1) as f64 / (n_levels - 1) as f64
                };
                self.p_low - (self.p_low - self.p_high) * frac.powf(self.shape_gamma)
            }
        };
        Ok(1.0 - (1.0 - base) / self.wl_param)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdcKind {
    Flash,
    Sar,
}

impl std::fmt::Display for AdcKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AdcKind::Flash => f.write_str("Flash"),
            AdcKind::Sar => f.write_str("SAR"),
        }
    }
}

/// Serializable converter parameters; [`AdcSpec`] is derived from them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdcParams {
    pub bits: u32,
    pub psum_max: u32,
    #[serde(default)]
    pub step_compression: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdcSpec {
    params: AdcParams,
    levels: Vec<f64>,
    thresholds: Vec<f64>,
    levels_fixed: Vec<i64>,
}

impl AdcSpec {
    pub fn uniform(bits: u32, psum_max: u32) -> Result<Self> {
        Self::new(AdcParams {
            bits,
            psum_max,
            step_compression: 0.0,
        })
    }

    /// Builds the level ladder. With `step_compression = s > 0` the step
    /// below level `k` is proportional to `1 / (1 + s*k)`, renormalized so
    /// the top level lands on `psum_max`.
    pub fn new(params: AdcParams) -> Result<Self> {
        let AdcParams {
            bits,
            psum_max,
            step_compression,
        } = params;
        if !(1..=12).contains(&bits) {
            return Err(Error::Config(format!("ADC bits must be in 1..=12, got {bits}")));
        }
        if psum_max == 0 {
            return Err(Error::Config("psum_max must be positive".into()));
        }
        if !(step_compression >= 0.0 && step_compression.is_finite()) {
            return Err(Error::Config("step_compression must be >= 0".into()));
        }
        let m = (1usize << bits) - 1;
        let steps: Vec<f64> = (1..=m)
            .map(|k| 1.0 / (1.0 + step_compression * k as f64))
            .collect();
        let total: f64 = steps.iter().sum();
        let mut levels = Vec::with_capacity(m + 1);
        levels.push(0.0);
        let mut acc = 0.0;
        for (k, s) in steps.iter().enumerate() {
            acc += s;
            levels.push(if step_compression == 0.0 {
                (k + 1) as f64 * psum_max as f64 / m as f64
            } else {
                acc / total * psum_max as f64
            });
        }
        levels[m] = psum_max as f64;
        Self::from_levels(params, levels)
    }

    fn from_levels(params: AdcParams, levels: Vec<f64>) -> Result<Self> {
        let thresholds: Vec<f64> = levels.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        if thresholds.windows(2).any(|w| w[1] <= w[0])
            || thresholds.first().is_some_and(|t| *t <= 0.0)
            || thresholds.last().is_some_and(|t| *t >= params.psum_max as f64)
        {
            return Err(Error::Config("ADC thresholds must increase strictly inside (0, psum_max)".into()));
        }
        let scale = (1u64 << LEVEL_FRAC_BITS) as f64;
        let levels_fixed = levels.iter().map(|l| (l * scale).round() as i64).collect();
        Ok(AdcSpec {
            params,
            levels,
            thresholds,
            levels_fixed,
        })
    }

    pub fn params(&self) -> AdcParams {
        self.params
    }

    pub fn bits(&self) -> u32 {
        self.params.bits
    }

    pub fn psum_max(&self) -> u32 {
        self.params.psum_max
    }

    pub fn n_thresholds(&self) -> usize {
        self.thresholds.len()
    }

    pub fn max_code(&self) -> u32 {
        self.thresholds.len() as u32
    }

    pub fn ideal_thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Reconstruction level of each code in units of `2^-LEVEL_FRAC_BITS`.
    pub fn levels_fixed(&self) -> &[i64] {
        &self.levels_fixed
    }

    /// Half the step between the two codes that threshold `level` separates.
    pub fn half_step(&self, level: usize) -> f64 {
        0.5 * (self.levels[level] - self.levels[level - 1])
    }

    /// Number of ideal thresholds strictly below `value`.
    pub fn ideal_convert(&self, value: f64) -> u32 {
        self.thresholds.partition_point(|t| *t < value) as u32
    }
}

/// Per-level sigma of the reference offset, in partial-sum units.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaProfile {
    pub sigmas: Vec<f64>,
}

impl SigmaProfile {
    pub fn zeros(n: usize) -> Self {
        SigmaProfile { sigmas: vec![0.0; n] }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        SigmaProfile {
            sigmas: self.sigmas.iter().map(|s| s * factor).collect(),
        }
    }
}

/// Sigma such that a Gaussian reference offset stays on the correct side of
/// an input `delta` away with probability `pass_rate`.
pub fn sigma_from_pass_rate(pass_rate: f64, delta: f64, level: usize) -> Result<f64> {
    if !(pass_rate > 0.5) {
        return Err(Error::Conversion { level, p: pass_rate });
    }
    if pass_rate >= 1.0 {
        return Ok(0.0);
    }
    Ok(delta / inv_norm_cdf(pass_rate)?)
}

pub fn sigma_profile(curve: &PassRateCurve, spec: &AdcSpec) -> Result<SigmaProfile> {
    let n = spec.n_thresholds();
    let sigmas = (1..=n)
        .map(|k| sigma_from_pass_rate(curve.pass_rate_at(k, n)?, spec.half_step(k), k))
        .collect::<Result<Vec<_>>>()?;
    Ok(SigmaProfile { sigmas })
}

/// One converter with its static reference offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct AdcInstance {
    spec: Arc<AdcSpec>,
    kind: AdcKind,
    offsets: Vec<f64>,
    shifted: Vec<f64>,
}

impl AdcInstance {
    pub fn with_offsets(spec: Arc<AdcSpec>, kind: AdcKind, offsets: Vec<f64>) -> Result<Self> {
        if offsets.len() != spec.n_thresholds() {
            return Err(Error::Config(format!(
                "{} offsets for a converter with {} thresholds",
                offsets.len(),
                spec.n_thresholds()
            )));
        }
        let shifted = spec
            .ideal_thresholds()
            .iter()
            .zip(&offsets)
            .map(|(t, o)| t + o)
            .collect();
        Ok(AdcInstance {
            spec,
            kind,
            offsets,
            shifted,
        })
    }

    pub fn ideal(spec: Arc<AdcSpec>, kind: AdcKind) -> Self {
        let n = spec.n_thresholds();
        Self::with_offsets(spec, kind, vec![0.0; n]).expect("length matches")
    }

    pub fn spec(&self) -> &AdcSpec {
        &self.spec
    }

    pub fn kind(&self) -> AdcKind {
        self.kind
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn shifted_thresholds(&self) -> &[f64] {
        &self.shifted
    }

    /// Flash: thermometer count of shifted thresholds below `value`, which
    /// tolerates out-of-order thresholds. SAR: MSB-first binary search with
    /// exactly `bits` comparisons.
    pub fn convert(&self, value: f64) -> u32 {
        match self.kind {
            AdcKind::Flash => self.shifted.iter().filter(|t| **t < value).count() as u32,
            AdcKind::Sar => {
                let mut code = 0u32;
                for bit in (0..self.spec.bits()).rev() {
                    let trial = code | (1 << bit);
                    if value > self.shifted[trial as usize - 1] {
                        code = trial;
                    }
                }
                code
            }
        }
    }

    /// Code table for every integer partial sum in `0..=max_psum`.
    pub fn code_table(&self, max_psum: u32) -> Vec<u16> {
        (0..=max_psum).map(|v| self.convert(v as f64) as u16).collect()
    }
}

/// Samples a static offset pattern. Flash draws one normal per level in
/// ascending level order; SAR draws a single `z` and scales it per level.
pub fn sample_instance(
    spec: Arc<AdcSpec>,
    profile: &SigmaProfile,
    kind: AdcKind,
    stream: &mut RngStream,
) -> Result<AdcInstance> {
    if profile.sigmas.len() != spec.n_thresholds() {
        return Err(Error::Config(format!(
            "sigma profile has {} levels, converter has {}",
            profile.sigmas.len(),
            spec.n_thresholds()
        )));
    }
    let offsets = match kind {
        AdcKind::Flash => profile
            .sigmas
            .iter()
            .map(|s| sample_normal(stream, 0.0, *s))
            .collect::<Result<Vec<_>>>()?,
        AdcKind::Sar => {
            let z = sample_normal(stream, 0.0, 1.0)?;
            profile.sigmas.iter().map(|s| z * s).collect()
        }
    };
    AdcInstance::with_offsets(spec, kind, offsets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numstat::{derive_stream, oracle::phi};

    fn demo_curve() -> PassRateCurve {
        PassRateCurve::new(0.97, 0.75, 1.5, 1.0).unwrap()
    }

    #[test]
    fn curve_boundaries_and_wl_ordering() {
        let c = demo_curve();
        assert_eq!(c.pass_rate_at(1, 31).unwrap(), 0.97);
        assert!((c.pass_rate_at(31, 31).unwrap() - 0.75).abs() < 1e-15);
        assert!(c.pass_rate_at(0, 31).is_err());
        assert!(c.pass_rate_at(32, 31).is_err());

        let wide = c.with_wl(1.4).unwrap();
        for k in 1..=31 {
            let (a, b) = (c.pass_rate_at(k, 31).unwrap(), wide.pass_rate_at(k, 31).unwrap());
            assert!(b >= a && b < 1.0 && a > 0.5);
            if k > 1 {
                assert!(c.pass_rate_at(k, 31).unwrap() <= c.pass_rate_at(k - 1, 31).unwrap());
            }
        }
        assert!(PassRateCurve::new(0.7, 0.8, 1.0, 1.0).is_err());
        assert!(PassRateCurve::new(0.9, 0.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn sigma_conversion_examples() {
        assert!((sigma_from_pass_rate(0.841_344_746_068_542_9, 0.5, 1).unwrap() - 0.5).abs() < 1e-9);
        // Series oracle: phi(2) = 0.977249868..., so p = 0.97725 sits at z = 2 + 6e-7.
        assert!((phi(2.0) - 0.977_249_868).abs() < 1e-9);
        assert!((sigma_from_pass_rate(0.97725, 0.5, 1).unwrap() - 0.25).abs() < 1e-4);
        assert!(matches!(
            sigma_from_pass_rate(0.5, 0.5, 3),
            Err(Error::Conversion { level: 3, .. })
        ));
    }

    #[test]
    fn relative_sigma_grows_with_level() {
        for sc in [0.0, 0.04] {
            let spec = AdcSpec::new(AdcParams { bits: 5, psum_max: 48, step_compression: sc }).unwrap();
            let prof = sigma_profile(&demo_curve(), &spec).unwrap();
            assert!(prof.sigmas.iter().all(|s| s.is_finite() && *s >= 0.0));
            let rel: Vec<f64> = (1..=31).map(|k| prof.sigmas[k - 1] / spec.half_step(k)).collect();
            assert!(rel.windows(2).all(|w| w[1] >= w[0]), "{rel:?}");
        }
    }

    #[test]
    fn spec_layout() {
        let spec = AdcSpec::uniform(5, 31).unwrap();
        assert_eq!(spec.n_thresholds(), 31);
        assert_eq!(spec.ideal_thresholds()[0], 0.5);
        assert_eq!(spec.ideal_thresholds()[30], 30.5);
        assert_eq!(spec.levels_fixed()[7], 7 << LEVEL_FRAC_BITS);

        let squeezed = AdcSpec::new(AdcParams {
            bits: 5,
            psum_max: 48,
            step_compression: 0.05,
        })
        .unwrap();
        let t = squeezed.ideal_thresholds();
        assert!(t.windows(2).all(|w| w[1] > w[0]));
        let gaps: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(gaps.windows(2).all(|g| g[1] < g[0]));
        assert!(t[0] > 0.0 && t[30] < 48.0);
        assert!(AdcSpec::uniform(0, 31).is_err());
        assert!(AdcSpec::uniform(5, 0).is_err());
    }

    #[test]
    fn ideal_conversion_examples() {
        let spec = AdcSpec::uniform(5, 31).unwrap();
        assert_eq!(spec.ideal_convert(-3.0), 0);
        assert_eq!(spec.ideal_convert(0.4), 0);
        assert_eq!(spec.ideal_convert(31.0), 31);
        assert_eq!(spec.ideal_convert(400.0), 31);
        for k in 0..32 {
            assert_eq!(spec.ideal_convert(k as f64 + 0.2), k);
        }
    }

    #[test]
    fn flash_bubble_example() {
        let spec = Arc::new(AdcSpec::uniform(2, 3).unwrap());
        assert_eq!(spec.ideal_thresholds(), &[0.5, 1.5, 2.5]);
        let adc = AdcInstance::with_offsets(spec, AdcKind::Flash, vec![0.0, 1.2, 0.0]).unwrap();
        assert_eq!(adc.convert(2.0), 1);
    }

    #[test]
    fn sar_binary_search_trace() {
        let spec = Arc::new(AdcSpec::uniform(3, 7).unwrap());
        let adc = AdcInstance::with_offsets(spec, AdcKind::Sar, vec![1.0; 7]).unwrap();
        let t = adc.shifted_thresholds();
        // Trial codes 4, 2, 3 compare against 4.5, 2.5, 3.5.
        assert_eq!((t[3], t[1], t[2]), (4.5, 2.5, 3.5));
        assert_eq!(adc.convert(3.2), 2);
    }

    #[test]
    fn zero_offsets_match_ideal() {
        let spec = Arc::new(AdcSpec::uniform(5, 48).unwrap());
        for kind in [AdcKind::Flash, AdcKind::Sar] {
            let adc = AdcInstance::ideal(spec.clone(), kind);
            let mut v = -1.0;
            while v <= 49.0 {
                assert_eq!(adc.convert(v), spec.ideal_convert(v), "{kind} at {v}");
                v += 0.013;
            }
        }
        let mut s = derive_stream(1, b"z");
        let z = SigmaProfile::zeros(31);
        for kind in [AdcKind::Flash, AdcKind::Sar] {
            let adc = sample_instance(spec.clone(), &z, kind, &mut s).unwrap();
            assert!(adc.offsets().iter().all(|o| *o == 0.0));
        }
    }

    #[test]
    fn draw_counts_and_sign_coherence() {
        let spec = Arc::new(AdcSpec::uniform(5, 31).unwrap());
        let prof = sigma_profile(&demo_curve(), &spec).unwrap();
        for seed in 0..50u64 {
            let mut s = derive_stream(seed, b"adc");
            let sar = sample_instance(spec.clone(), &prof, AdcKind::Sar, &mut s).unwrap();
            assert_eq!(s.draw_count(), 1);
            let nonzero: Vec<f64> = sar.offsets().iter().copied().filter(|o| *o != 0.0).collect();
            assert!(nonzero.iter().all(|o| o.signum() == nonzero[0].signum()));

            let mut s = derive_stream(seed, b"adc");
            sample_instance(spec.clone(), &prof, AdcKind::Flash, &mut s).unwrap();
            assert_eq!(s.draw_count(), 31);
        }
        let short = SigmaProfile::zeros(30);
        let mut s = derive_stream(0, b"x");
        assert!(matches!(
            sample_instance(spec, &short, AdcKind::Flash, &mut s),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn flash_offset_std_matches_sigma() {
        let spec = Arc::new(AdcSpec::uniform(5, 31).unwrap());
        let prof = SigmaProfile { sigmas: vec![1.0; 31] };
        let n = 10_000;
        let mut sums = vec![0.0; 31];
        let mut sq = vec![0.0; 31];
        for i in 0..n {
            let mut s = derive_stream(99, format!("flash/{i}").as_bytes());
            let adc = sample_instance(spec.clone(), &prof, AdcKind::Flash, &mut s).unwrap();
            for (k, o) in adc.offsets().iter().enumerate() {
                sums[k] += o;
                sq[k] += o * o;
            }
        }
        for k in 0..31 {
            let mean = sums[k] / n as f64;
            let sd = (sq[k] / n as f64 - mean * mean).sqrt();
            assert!((0.97..=1.03).contains(&sd), "level {k}: {sd}");
        }
    }

    #[test]
    fn code_table_matches_convert() {
        let spec = Arc::new(AdcSpec::uniform(5, 48).unwrap());
        let prof = sigma_profile(&demo_curve(), &spec).unwrap();
        for kind in [AdcKind::Flash, AdcKind::Sar] {
            let mut s = derive_stream(4, b"lut");
            let adc = sample_instance(spec.clone(), &prof, kind, &mut s).unwrap();
            let lut = adc.code_table(60);
            for (v, c) in lut.iter().enumerate() {
                assert_eq!(*c as u32, adc.convert(v as f64));
            }
        }
    }

    fn mean_abs_code_error(adc: &AdcInstance) -> f64 {
        let spec = adc.spec();
        let n = 2000;
        let top = spec.psum_max() as f64;
        (0..n)
            .map(|i| {
                let v = top * (i as f64 + 0.5) / n as f64;
                (adc.convert(v) as f64 - spec.ideal_convert(v) as f64).abs()
            })
            .sum::<f64>()
            / n as f64
    }

    #[test]
    fn sar_errors_exceed_flash_on_average() {
        let spec = Arc::new(AdcSpec::uniform(5, 31).unwrap());
        let prof = sigma_profile(&demo_curve(), &spec).unwrap();
        let (mut sar, mut flash) = (0.0, 0.0);
        let n = 200;
        for i in 0..n {
            let label = format!("pair/{i}");
            let mut s = derive_stream(17, label.as_bytes());
            let f = sample_instance(spec.clone(), &prof, AdcKind::Flash, &mut s).unwrap();
            // The SAR draw reuses the first Flash quantile.
            let mut s = derive_stream(17, label.as_bytes());
            let z = sample_normal(&mut s, 0.0, 1.0).unwrap();
            let offs = prof.sigmas.iter().map(|sg| z * sg).collect();
            let sr = AdcInstance::with_offsets(spec.clone(), AdcKind::Sar, offs).unwrap();
            flash += mean_abs_code_error(&f);
            sar += mean_abs_code_error(&sr);
        }
        assert!(sar >= flash, "SAR {} vs Flash {}", sar / n as f64, flash / n as f64);
    }

    #[test]
    fn smaller_wl_gives_more_code_errors() {
        let spec = Arc::new(AdcSpec::uniform(5, 31).unwrap());
        let narrow = sigma_profile(&demo_curve(), &spec).unwrap();
        let wide = sigma_profile(&demo_curve().with_wl(1.5).unwrap(), &spec).unwrap();
        for kind in [AdcKind::Flash, AdcKind::Sar] {
            let (mut e_narrow, mut e_wide) = (0.0, 0.0);
            for i in 0..100 {
                let label = format!("wl/{i}");
                let mut s = derive_stream(23, label.as_bytes());
                e_narrow += mean_abs_code_error(&sample_instance(spec.clone(), &narrow, kind, &mut s).unwrap());
                let mut s = derive_stream(23, label.as_bytes());
                e_wide += mean_abs_code_error(&sample_instance(spec.clone(), &wide, kind, &mut s).unwrap());
            }
            assert!(e_narrow > e_wide, "{kind}: {e_narrow} vs {e_wide}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn conversion_is_monotone(seed in any::<u64>(), a in -2.0f64..40.0, b in -2.0f64..40.0, sar in any::<bool>()) {
                let spec = Arc::new(AdcSpec::uniform(5, 31).unwrap());
                let prof = sigma_profile(&PassRateCurve::new(0.9, 0.6, 1.0, 1.0).unwrap(), &spec).unwrap();
                let kind = if sar { AdcKind::Sar } else { AdcKind::Flash };
                let mut s = derive_stream(seed, b"mono");
                let adc = sample_instance(spec, &prof.scaled(3.0), kind, &mut s).unwrap();
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(adc.convert(lo) <= adc.convert(hi));
            }
        }
    }
}
