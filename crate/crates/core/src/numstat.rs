//! Deterministic random streams and standard-normal numerics.
//!
//! Every random quantity in the simulator (ADC offsets, weight init, data
//! order, attack sample selection) comes from an [`RngStream`] derived from a
//! 64-bit seed and a byte label. The construction is fixed so any other
//! implementation can reproduce a chip bit for bit:
//!
//! 1. `key = mix64(master_seed) ^ fnv1a64(label)`, where `mix64` is the
//!    SplitMix64 output finalizer and `fnv1a64` is 64-bit FNV-1a
//!    (offset basis `0xcbf29ce484222325`, prime `0x100000001b3`).
//! 2. The four xoshiro256** state words are the first four outputs of a
//!    SplitMix64 sequence started at `key`.
//! 3. Uniform doubles in the open interval (0, 1) are
//!    `((next_u64() >> 11) + 0.5) * 2^-53`.
//! 4. Normal variates use the inverse-CDF method, one uniform per draw.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier written into chip descriptors.
pub const ALGORITHM_ID: &str = "xoshiro256starstar/splitmix64/fnv1a64";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// A xoshiro256** generator that counts its scalar draws.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    state: [u64; 4],
    draw_count: u64,
}

impl RngStream {
    /// Seeds the state from a SplitMix64 sequence starting at `seed`.
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        let mut state = [0u64; 4];
        for word in state.iter_mut() {
            sm = sm.wrapping_add(GOLDEN);
            *word = mix64(sm);
        }
        RngStream {
            state,
            draw_count: 0,
        }
    }

    pub fn algorithm_id(&self) -> &'static str {
        ALGORITHM_ID
    }

    pub fn draw_count(&self) -> u64 {
        self.draw_count
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        self.draw_count += 1;
        result
    }

    /// Uniform double strictly inside (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by rejection on the top bits.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Fisher-Yates shuffle, last index first.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Derives a labelled sub-stream of `master_seed`.
pub fn derive_stream(master_seed: u64, label: &[u8]) -> RngStream {
    RngStream::from_seed(mix64(master_seed) ^ fnv1a64(label))
}

/// Standard normal CDF, `0.5 * erfc(-z / sqrt(2))`.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

// Acklam's rational approximation (relative error 1.15e-9 before refinement).
const A: [f64; 6] = [
    -3.969_683_028_665_376e1,
    2.209_460_984_245_205e2,
    -2.759_285_104_469_687e2,
    1.383_577_518_672_69e2,
    -3.066_479_806_614_716e1,
    2.506_628_277_459_239,
];
const B: [f64; 5] = [
    -5.447_609_879_822_406e1,
    1.615_858_368_580_409e2,
    -1.556_989_798_598_866e2,
    6.680_131_188_771_972e1,
    -1.328_068_155_288_572e1,
];
const C: [f64; 6] = [
    -7.784_894_002_430_293e-3,
    -3.223_964_580_411_365e-1,
    -2.400_758_277_161_838,
    -2.549_732_539_343_734,
    4.374_664_141_464_968,
    2.938_163_982_698_783,
];
const D: [f64; 4] = [
    7.784_695_709_041_462e-3,
    3.224_671_290_700_398e-1,
    2.445_134_137_142_996,
    3.754_408_661_907_416,
];
const P_TAIL: f64 = 0.024_25;

fn acklam(p: f64) -> f64 {
    if p < P_TAIL {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_TAIL {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Standard normal quantile: Acklam's approximation followed by one Halley
/// step against `norm_cdf`.
pub fn inv_norm_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "inv_norm_cdf needs p in (0, 1), got {p}"
        )));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    let x = acklam(p);
    let e = norm_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    Ok(x - u / (1.0 + 0.5 * x * u))
}

/// `mu + sigma * inv_norm_cdf(u)` with one uniform from `stream`.
pub fn sample_normal(stream: &mut RngStream, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("sigma must be >= 0, got {sigma}")));
    }
    let u = stream.uniform();
    if sigma == 0.0 {
        return Ok(mu);
    }
    Ok(mu + sigma * inv_norm_cdf(u)?)
}

#[cfg(test)]
pub(crate) mod oracle {
    /// Maclaurin series of erf, summed until terms vanish. Accurate to a few
    /// ulp for |x| <= 3, which covers p in [1e-4, 1 - 1e-4].
    pub fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let x2 = x * x;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -x2 / n;
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() < 1e-18 * sum.abs().max(1e-300) {
                break;
            }
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    pub fn phi(z: f64) -> f64 {
        0.5 * (1.0 + erf_series(z / std::f64::consts::SQRT_2))
    }
}
