//! Carlini-Wagner attacks under L2, L0 and L-infinity with a pluggable
//! gradient source, plus replayable adversarial-set files.
//!
//! All attacks are untargeted by default. The margin term for true class
//! `t` is `f = Z_t - max_{i != t} Z_i`, and an iterate succeeds when
//! `f + kappa < 0`. With `targeted`, the target is `(label + 1) % classes`
//! and `f = max_{i != T} Z_i - Z_T`.
//!
//! * L2 optimizes `w` with `x' = (tanh(w) + 1) / 2`, minimizing
//!   `||x' - x||^2 + c * max(f, -kappa)` by plain gradient descent, with a
//!   binary search on `c` (multiplied by 100 until the first success).
//! * L0 repeats a box-projected L2 descent restricted to an allowed pixel
//!   set, freezing the least useful changed pixels after every success.
//! * L-infinity minimizes `c * max(f, -kappa) + sum(max(|d| - tau, 0))` by
//!   box-projected descent, shrinking `tau` after every success.
//!
//! Samples that the source already misclassifies count as successes with
//! zero distortion.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chip::ChipInstance;
use crate::error::{Error, Result};
use crate::nnquant::{Cache, Classifier, QuantizedModel, Tensor};

pub const ADV_MAGIC: &[u8; 8] = b"CIMADV01";
pub const ADV_FORMAT_VERSION: u32 = 1;

/// Where forward logits and input gradients come from.
#[derive(Clone, Copy)]
pub enum GradientSource<'a> {
    /// The quantized digital network.
    Digital(&'a QuantizedModel),
    /// Forward on the chip, backward in software through its programmed
    /// model with straight-through converters.
    HybridChip(&'a ChipInstance),
}

impl GradientSource<'_> {
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        match self {
            GradientSource::Digital(m) => m.forward_digital(x),
            GradientSource::HybridChip(c) => c.forward(x),
        }
    }

    fn model(&self) -> Result<&QuantizedModel> {
        match self {
            GradientSource::Digital(m) => Ok(m),
            GradientSource::HybridChip(c) => c.programmed_model(),
        }
    }

    /// Gradient of `sum(grad_logits * Z)` with respect to the input.
    pub fn input_gradient(&self, cache: &Cache, grad_logits: &Tensor) -> Result<Tensor> {
        Ok(self.model()?.backward_from_logits(cache, grad_logits, false)?.input)
    }

    /// `(max code, clip)` of the first layer's input quantizer.
    fn input_quantizer(&self) -> Result<(f64, f64)> {
        let m = self.model()?;
        let first = m
            .layers
            .iter()
            .find(|l| l.kind.is_weighted())
            .ok_or_else(|| Error::State("model has no weighted layer".into()))?;
        Ok((m.quant.act_max() as f64, first.act_clip))
    }
}

impl Classifier for GradientSource<'_> {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    L0,
    L2,
    Linf,
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Norm::L0 => "L0",
            Norm::L2 => "L2",
            Norm::Linf => "Linf",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub norm: Norm,
    pub confidence: f64,
    pub binary_search_steps: usize,
    pub max_iterations: usize,
    pub step_size: f64,
    pub initial_c: f64,
    #[serde(default)]
    pub targeted: bool,
    /// L0: share of the still-changed pixels frozen after each success.
    #[serde(default = "default_freeze")]
    pub l0_freeze_fraction: f64,
    /// L0 rounds / L-infinity tau reductions.
    #[serde(default = "default_rounds")]
    pub max_rounds: usize,
    /// L-infinity: `tau` multiplier after a success.
    #[serde(default = "default_tau_decay")]
    pub tau_decay: f64,
    /// L-infinity: stop once `tau` falls below this.
    #[serde(default = "default_min_tau")]
    pub min_tau: f64,
}

fn default_freeze() -> f64 {
    0.3
}
fn default_rounds() -> usize {
    20
}
fn default_tau_decay() -> f64 {
    0.8
}
fn default_min_tau() -> f64 {
    1.0 / 255.0
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            norm: Norm::L2,
            confidence: 0.0,
            binary_search_steps: 6,
            max_iterations: 300,
            step_size: 0.01,
            initial_c: 1e-3,
            targeted: false,
            l0_freeze_fraction: default_freeze(),
            max_rounds: default_rounds(),
            tau_decay: default_tau_decay(),
            min_tau: default_min_tau(),
        }
    }
}

impl AttackConfig {
    pub fn with_norm(norm: Norm) -> Self {
        AttackConfig {
            norm,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.confidence >= 0.0
            && self.step_size > 0.0
            && self.initial_c > 0.0
            && self.binary_search_steps > 0
            && self.l0_freeze_fraction > 0.0
            && self.l0_freeze_fraction <= 1.0
            && self.tau_decay > 0.0
            && self.tau_decay < 1.0
            && self.min_tau > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid attack config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub norm: Norm,
    pub adversarial: Tensor,
    pub success: Vec<bool>,
    /// Distortion under `norm` (changed-pixel count for L0).
    pub distortion: Vec<f64>,
    /// Gradient steps spent per sample.
    pub iterations: Vec<usize>,
    /// Top-1 accuracy (%) of the source on the adversarial batch.
    pub source_accuracy: f64,
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn l0_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64
}

pub fn linf_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn distance(norm: Norm, a: &[f64], b: &[f64]) -> f64 {
    match norm {
        Norm::L0 => l0_distance(a, b),
        Norm::L2 => l2_distance(a, b),
        Norm::Linf => linf_distance(a, b),
    }
}

/// Runs the attack selected by `cfg.norm`.
pub fn run_attack(source: &GradientSource<'_>, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
    match cfg.norm {
        Norm::L2 => cw_l2(source, x, labels, cfg),
        Norm::L0 => cw_l0(source, x, labels, cfg),
        Norm::Linf => cw_linf(source, x, labels, cfg),
    }
}

struct Margin {
    /// `f` as defined in the module docs.
    f: f64,
    plus: usize,
    minus: usize,
}

fn margin(row: &[f64], label: usize, targeted: bool) -> Margin {
    let k = row.len();
    let anchor = if targeted { (label + 1) % k } else { label };
    let mut best = usize::MAX;
    for (i, v) in row.iter().enumerate() {
        if i != anchor && (best == usize::MAX || *v > row[best]) {
            best = i;
        }
    }
    if targeted {
        Margin {
            f: row[best] - row[anchor],
            plus: best,
            minus: anchor,
        }
    } else {
        Margin {
            f: row[anchor] - row[best],
            plus: anchor,
            minus: best,
        }
    }
}

fn check_batch(x: &Tensor, labels: &[usize]) -> Result<()> {
    if x.batch() != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            x.batch()
        )));
    }
    if x.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain("attack inputs must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Per-sample success on the clean batch (already misclassified).
fn initial_success(source: &GradientSource<'_>, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Vec<bool>> {
    let logits = source.logits(x)?;
    Ok((0..x.batch())
        .map(|i| margin(logits.sample(i), labels[i], cfg.targeted).f + cfg.confidence < 0.0)
        .collect())
}

fn finish(source: &GradientSource<'_>, norm: Norm, x: &Tensor, labels: &[usize], adversarial: Tensor, iterations: Vec<usize>, cfg: &AttackConfig) -> Result<AttackResult> {
    let logits = source.logits(&adversarial)?;
    let mut correct = 0;
    let mut success = Vec::with_capacity(labels.len());
    let mut distortion = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.sample(i);
        success.push(margin(row, label, cfg.targeted).f + cfg.confidence < 0.0);
        if logits_argmax(row) == label {
            correct += 1;
        }
        distortion.push(distance(norm, adversarial.sample(i), x.sample(i)));
    }
    Ok(AttackResult {
        norm,
        adversarial,
        success,
        distortion,
        iterations,
        source_accuracy: if labels.is_empty() {
            0.0
        } else {
            100.0 * correct as f64 / labels.len() as f64
        },
    })
}

fn logits_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// How the optimization variable maps to the image.
#[derive(Clone, Copy, PartialEq)]
enum Param {
    Tanh,
    Clamp,
}

/// Distance term of the inner objective.
#[derive(Clone, Copy)]
enum Penalty {
    SquaredL2,
    /// `sum(max(|d| - tau, 0))` with a per-sample `tau`.
    Hinge,
}

struct InnerOutcome {
    /// Lowest-distortion successful iterate per sample.
    best: Vec<Option<Vec<f64>>>,
    best_dist: Vec<f64>,
    /// Final iterate per sample (warm starts).
    last: Vec<Vec<f64>>,
    iterations: Vec<usize>,
}

const TANH_EDGE: f64 = 1.0 - 1e-6;

/// Factor applied to `c` while an L2 search has not yet succeeded.
const L2_GROWTH: f64 = 100.0;
/// Factor applied to `c` after a failed L-infinity descent.
const LINF_GROWTH: f64 = 10.0;

/// Batched gradient descent for the samples in `active`. `start[i]` is the
/// starting image, `mask[i]` (if given) marks the pixels allowed to move.
#[allow(clippy::too_many_arguments)]
fn inner_descent(
    source: &GradientSource<'_>,
    x0: &Tensor,
    labels: &[usize],
    active: &[usize],
    start: &[Vec<f64>],
    masks: Option<&[Vec<bool>]>,
    c: &[f64],
    tau: &[f64],
    param: Param,
    penalty: Penalty,
    rank: Norm,
    cfg: &AttackConfig,
) -> Result<InnerOutcome> {
    let n = x0.batch();
    let per = x0.per_sample();
    let mut vars: Vec<Vec<f64>> = start
        .iter()
        .map(|s| match param {
            Param::Tanh => s.iter().map(|v| (2.0 * v - 1.0).clamp(-TANH_EDGE, TANH_EDGE).atanh()).collect(),
            Param::Clamp => s.clone(),
        })
        .collect();
    let image = |v: &[f64], i: usize| -> Vec<f64> {
        let img: Vec<f64> = match param {
            Param::Tanh => v.iter().map(|w| 0.5 * (w.tanh() + 1.0)).collect(),
            Param::Clamp => v.to_vec(),
        };
        match masks {
            Some(m) => img
                .iter()
                .zip(&m[i])
                .zip(x0.sample(i))
                .map(|((a, keep), o)| if *keep { *a } else { *o })
                .collect(),
            None => img,
        }
    };

    let mut out = InnerOutcome {
        best: vec![None; n],
        best_dist: vec![f64::INFINITY; n],
        last: start.to_vec(),
        iterations: vec![0; n],
    };
    let mut running: Vec<usize> = active.to_vec();
    let mut prev_loss = vec![f64::INFINITY; n];
    let check_every = (cfg.max_iterations / 10).max(1);
    let mut shape = x0.shape.clone();

    for it in 0..cfg.max_iterations {
        if running.is_empty() {
            break;
        }
        shape[0] = running.len();
        let mut data = Vec::with_capacity(running.len() * per);
        let imgs: Vec<Vec<f64>> = running.iter().map(|&i| image(&vars[i], i)).collect();
        for img in &imgs {
            data.extend_from_slice(img);
        }
        let batch = Tensor::new(shape.clone(), data);
        let (logits, cache) = source.forward(&batch)?;
        let mut gz = Tensor::zeros(logits.shape.clone());
        let mut losses = vec![0.0; running.len()];
        for (b, &i) in running.iter().enumerate() {
            let img = &imgs[b];
            let m = margin(logits.sample(b), labels[i], cfg.targeted);
            let dist_term = match penalty {
                Penalty::SquaredL2 => img.iter().zip(x0.sample(i)).map(|(a, o)| (a - o).powi(2)).sum::<f64>(),
                Penalty::Hinge => img
                    .iter()
                    .zip(x0.sample(i))
                    .map(|(a, o)| ((a - o).abs() - tau[i]).max(0.0))
                    .sum::<f64>(),
            };
            losses[b] = dist_term + c[i] * m.f.max(-cfg.confidence);
            if m.f + cfg.confidence < 0.0 {
                let d = distance(rank, img, x0.sample(i));
                if d < out.best_dist[i] {
                    out.best_dist[i] = d;
                    out.best[i] = Some(img.clone());
                }
            }
            if m.f > -cfg.confidence {
                let g = gz.sample_mut(b);
                g[m.plus] += c[i];
                g[m.minus] -= c[i];
            }
        }
        let gx = source.input_gradient(&cache, &gz)?;

        let mut keep = Vec::with_capacity(running.len());
        for (b, &i) in running.iter().enumerate() {
            out.iterations[i] += 1;
            let g = gx.sample(b);
            if g.iter().any(|v| !v.is_finite()) || !losses[b].is_finite() {
                continue;
            }
            if it % check_every == 0 && it > 0 {
                if losses[b] > prev_loss[i] * 0.9999 {
                    out.last[i] = imgs[b].clone();
                    continue;
                }
                prev_loss[i] = losses[b];
            } else if it == 0 {
                prev_loss[i] = losses[b];
            }
            let img = &imgs[b];
            let orig = x0.sample(i);
            let allowed = masks.map(|m| &m[i]);
            let v = &mut vars[i];
            for p in 0..per {
                if let Some(a) = allowed {
                    if !a[p] {
                        continue;
                    }
                }
                let d = img[p] - orig[p];
                let dist_grad = match penalty {
                    Penalty::SquaredL2 => 2.0 * d,
                    Penalty::Hinge => {
                        if d.abs() > tau[i] {
                            d.signum()
                        } else {
                            0.0
                        }
                    }
                };
                let gimg = dist_grad + g[p];
                match param {
                    Param::Tanh => {
                        let t = v[p].tanh();
                        v[p] -= cfg.step_size * gimg * 0.5 * (1.0 - t * t);
                    }
                    Param::Clamp => v[p] = (v[p] - cfg.step_size * gimg).clamp(0.0, 1.0),
                }
            }
            out.last[i] = image(v, i);
            keep.push(i);
        }
        running = keep;
    }
    Ok(out)
}

/// Carlini-Wagner L2 with a binary search on `c`.
pub fn cw_l2(source: &GradientSource<'_>, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    check_batch(x, labels)?;
    let n = x.batch();
    let done = initial_success(source, x, labels, cfg)?;
    let mut best: Vec<Vec<f64>> = (0..n).map(|i| x.sample(i).to_vec()).collect();
    let mut best_dist = vec![f64::INFINITY; n];
    let mut iterations = vec![0; n];
    let mut c = vec![cfg.initial_c; n];
    let mut lower = vec![0.0; n];
    let mut upper = vec![f64::INFINITY; n];
    let active: Vec<usize> = (0..n).filter(|i| !done[*i]).collect();
    let starts: Vec<Vec<f64>> = (0..n).map(|i| x.sample(i).to_vec()).collect();
    if cfg.max_iterations > 0 {
        for _ in 0..cfg.binary_search_steps {
            let r = inner_descent(source, x, labels, &active, &starts, None, &c, &[], Param::Tanh, Penalty::SquaredL2, Norm::L2, cfg)?;
            for &i in &active {
                iterations[i] += r.iterations[i];
                if let Some(adv) = &r.best[i] {
                    if r.best_dist[i] < best_dist[i] {
                        best_dist[i] = r.best_dist[i];
                        best[i] = adv.clone();
                    }
                    upper[i] = upper[i].min(c[i]);
                    c[i] = (lower[i] + upper[i]) / 2.0;
                } else {
                    lower[i] = lower[i].max(c[i]);
                    c[i] = if upper[i].is_finite() {
                        (lower[i] + upper[i]) / 2.0
                    } else {
                        c[i] * L2_GROWTH
                    };
                }
            }
        }
    }
    let adversarial = Tensor::new(x.shape.clone(), best.concat());
    finish(source, Norm::L2, x, labels, adversarial, iterations, cfg)
}

/// Snaps pixels whose input code did not change back to the original value,
/// so the reported L0 count is the number of pixels the network sees change.
fn canonicalize(adv: &mut [f64], orig: &[f64], levels: f64, clip: f64) {
    let code = |v: f64| (v.clamp(0.0, clip) / clip * levels).round();
    for (a, o) in adv.iter_mut().zip(orig) {
        if code(*a) == code(*o) {
            *a = *o;
        }
    }
}

/// Carlini-Wagner L0: repeated restricted L2 descents with pixel freezing.
pub fn cw_l0(source: &GradientSource<'_>, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    check_batch(x, labels)?;
    let (levels, clip) = source.input_quantizer()?;
    let n = x.batch();
    let per = x.per_sample();
    let done = initial_success(source, x, labels, cfg)?;
    let mut best: Vec<Vec<f64>> = (0..n).map(|i| x.sample(i).to_vec()).collect();
    let mut iterations = vec![0; n];
    let mut masks = vec![vec![true; per]; n];
    let mut c = vec![cfg.initial_c; n];
    let mut starts: Vec<Vec<f64>> = best.clone();
    let mut refining: Vec<usize> = if cfg.max_iterations > 0 {
        (0..n).filter(|i| !done[*i]).collect()
    } else {
        Vec::new()
    };

    for _ in 0..cfg.max_rounds {
        if refining.is_empty() {
            break;
        }
        // Escalate c until this round's restricted problem is solved.
        let mut found: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut pending = refining.clone();
        for _ in 0..cfg.binary_search_steps {
            if pending.is_empty() {
                break;
            }
            let r = inner_descent(source, x, labels, &pending, &starts, Some(&masks), &c, &[], Param::Clamp, Penalty::SquaredL2, Norm::L2, cfg)?;
            let mut still = Vec::new();
            for &i in &pending {
                iterations[i] += r.iterations[i];
                match &r.best[i] {
                    Some(adv) => found[i] = Some(adv.clone()),
                    None => {
                        c[i] *= 10.0;
                        still.push(i);
                    }
                }
            }
            pending = still;
        }

        let mut next = Vec::new();
        let mut candidates: Vec<(usize, Vec<f64>)> = Vec::new();
        for &i in &refining {
            if let Some(mut adv) = found[i].take() {
                canonicalize(&mut adv, x.sample(i), levels, clip);
                candidates.push((i, adv));
            }
        }
        if candidates.is_empty() {
            break;
        }
        // Importance of every changed pixel: |df/dx * delta| at the adversarial.
        let mut shape = x.shape.clone();
        shape[0] = candidates.len();
        let batch = Tensor::new(shape, candidates.iter().flat_map(|(_, a)| a.iter().copied()).collect());
        let (logits, cache) = source.forward(&batch)?;
        let mut gz = Tensor::zeros(logits.shape.clone());
        let mut still_adv = vec![false; candidates.len()];
        for (b, (i, _)) in candidates.iter().enumerate() {
            let m = margin(logits.sample(b), labels[*i], cfg.targeted);
            still_adv[b] = m.f + cfg.confidence < 0.0;
            let g = gz.sample_mut(b);
            g[m.plus] += 1.0;
            g[m.minus] -= 1.0;
        }
        let gx = source.input_gradient(&cache, &gz)?;
        for (b, (i, adv)) in candidates.into_iter().enumerate() {
            if !still_adv[b] {
                continue;
            }
            let orig = x.sample(i);
            let changed: Vec<usize> = (0..per).filter(|p| adv[*p] != orig[*p]).collect();
            best[i] = adv.clone();
            for p in 0..per {
                if adv[p] == orig[p] {
                    masks[i][p] = false;
                }
            }
            if changed.len() <= 1 {
                continue;
            }
            let g = gx.sample(b);
            let mut ranked: Vec<(f64, usize)> = changed.iter().map(|&p| ((g[p] * (adv[p] - orig[p])).abs(), p)).collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let k = ((changed.len() as f64 * cfg.l0_freeze_fraction).floor() as usize).max(1);
            for &(_, p) in ranked.iter().take(k) {
                masks[i][p] = false;
            }
            starts[i] = (0..per).map(|p| if masks[i][p] { adv[p] } else { orig[p] }).collect();
            next.push(i);
        }
        refining = next;
    }
    let adversarial = Tensor::new(x.shape.clone(), best.concat());
    finish(source, Norm::L0, x, labels, adversarial, iterations, cfg)
}

/// Carlini-Wagner L-infinity with a shrinking `tau`.
pub fn cw_linf(source: &GradientSource<'_>, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    check_batch(x, labels)?;
    let n = x.batch();
    let done = initial_success(source, x, labels, cfg)?;
    let mut best: Vec<Vec<f64>> = (0..n).map(|i| x.sample(i).to_vec()).collect();
    let mut iterations = vec![0; n];
    let mut best_d = vec![f64::INFINITY; n];
    let mut tau = vec![1.0; n];
    let mut c = vec![cfg.initial_c; n];
    let mut starts: Vec<Vec<f64>> = best.clone();
    let mut refining: Vec<usize> = if cfg.max_iterations > 0 {
        (0..n).filter(|i| !done[*i]).collect()
    } else {
        Vec::new()
    };

    for _ in 0..cfg.max_rounds {
        if refining.is_empty() {
            break;
        }
        let mut found: Vec<Option<(Vec<f64>, f64)>> = vec![None; n];
        let mut pending = refining.clone();
        for _ in 0..cfg.binary_search_steps {
            if pending.is_empty() {
                break;
            }
            let r = inner_descent(source, x, labels, &pending, &starts, None, &c, &tau, Param::Clamp, Penalty::Hinge, Norm::Linf, cfg)?;
            let mut still = Vec::new();
            for &i in &pending {
                iterations[i] += r.iterations[i];
                starts[i] = r.last[i].clone();
                match &r.best[i] {
                    Some(adv) => found[i] = Some((adv.clone(), r.best_dist[i])),
                    None => {
                        c[i] *= LINF_GROWTH;
                        still.push(i);
                    }
                }
            }
            pending = still;
        }
        let mut next = Vec::new();
        for &i in &refining {
            if let Some((adv, d)) = found[i].take() {
                if d < best_d[i] {
                    best_d[i] = d;
                    best[i] = adv.clone();
                }
                starts[i] = adv;
                tau[i] = tau[i].min(d) * cfg.tau_decay;
                if tau[i] >= cfg.min_tau {
                    next.push(i);
                }
            }
        }
        refining = next;
    }
    let adversarial = Tensor::new(x.shape.clone(), best.concat());
    finish(source, Norm::Linf, x, labels, adversarial, iterations, cfg)
}

/// Top-1 accuracy (%) of `target` on a batch.
pub fn evaluate_on(target: &dyn Classifier, x: &Tensor, labels: &[usize]) -> Result<f64> {
    if x.batch() != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            x.batch()
        )));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..labels.len()).collect();
    for chunk in idx.chunks(500) {
        let pred = target.logits(&x.select(chunk))?.argmax_rows();
        correct += chunk.iter().zip(&pred).filter(|(i, p)| labels[**i] == **p).count();
    }
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// A serialized adversarial set: originals, adversarials and per-sample
/// metadata.
///
/// File layout: the 8 magic bytes `CIMADV01`, a little-endian `u64` header
/// length, the JSON header, then `originals` and `adversarial` as raw
/// little-endian `f64` values in tensor order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialSet {
    pub header: AdvHeader,
    pub originals: Tensor,
    pub adversarial: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvHeader {
    pub format_version: u32,
    /// Free-form description of the attacked source.
    pub source: String,
    pub config: AttackConfig,
    pub shape: Vec<usize>,
    pub labels: Vec<usize>,
    pub success: Vec<bool>,
    pub distortion: Vec<f64>,
    pub iterations: Vec<usize>,
    pub source_accuracy: f64,
}

impl AdversarialSet {
    pub fn new(source: &str, cfg: &AttackConfig, originals: &Tensor, labels: &[usize], result: &AttackResult) -> Self {
        AdversarialSet {
            header: AdvHeader {
                format_version: ADV_FORMAT_VERSION,
                source: source.to_string(),
                config: cfg.clone(),
                shape: originals.shape.clone(),
                labels: labels.to_vec(),
                success: result.success.clone(),
                distortion: result.distortion.clone(),
                iterations: result.iterations.clone(),
                source_accuracy: result.source_accuracy,
            },
            originals: originals.clone(),
            adversarial: result.adversarial.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 16 * self.originals.data.len());
        out.extend_from_slice(ADV_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.originals.data.iter().chain(&self.adversarial.data) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |offset: usize, msg: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            msg,
        };
        if bytes.len() < 16 || &bytes[..8] != ADV_MAGIC {
            return Err(fmt(0, "missing CIMADV01 magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| fmt(8, format!("header length {hlen} exceeds file")))?;
        let header: AdvHeader = serde_json::from_slice(&bytes[16..body]).map_err(|e| fmt(16, e.to_string()))?;
        if header.format_version != ADV_FORMAT_VERSION {
            return Err(fmt(16, format!("format_version {}", header.format_version)));
        }
        let count: usize = header.shape.iter().product();
        if bytes.len() != body + 16 * count {
            return Err(fmt(body, format!("expected {} data bytes, found {}", 16 * count, bytes.len() - body)));
        }
        if header.labels.len() != header.shape.first().copied().unwrap_or(0) {
            return Err(fmt(16, "label count does not match the batch".into()));
        }
        let vals: Vec<f64> = bytes[body..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(AdversarialSet {
            originals: Tensor::new(header.shape.clone(), vals[..count].to_vec()),
            adversarial: Tensor::new(header.shape.clone(), vals[count..].to_vec()),
            header,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnquant::{random_tensor, LayerKind, QuantConfig};
    use crate::numstat::RngStream;

    /// A tiny dense classifier with a wide margin on the all-0.5 image.
    fn tiny() -> QuantizedModel {
        QuantizedModel::from_kinds(
            vec![6],
            &[
                LayerKind::Dense {
                    in_features: 6,
                    out_features: 8,
                },
                LayerKind::Relu,
                LayerKind::Dense {
                    in_features: 8,
                    out_features: 3,
                },
            ],
            QuantConfig {
                act_bits: 8,
                weight_bits: 8,
            },
            21,
        )
        .unwrap()
    }

    fn batch(m: &QuantizedModel, n: usize) -> (Tensor, Vec<usize>) {
        let mut s = RngStream::from_seed(3);
        let x = random_tensor(vec![n, 6], 0.05, 0.95, &mut s);
        let y = m.logits(&x).unwrap().argmax_rows();
        (x, y)
    }

    fn quick(norm: Norm) -> AttackConfig {
        AttackConfig {
            norm,
            max_iterations: 100,
            step_size: 0.05,
            initial_c: 0.1,
            max_rounds: 8,
            ..AttackConfig::default()
        }
    }

    #[test]
    fn zero_iterations_is_a_no_op() {
        let m = tiny();
        let (x, mut y) = batch(&m, 6);
        y[0] = (y[0] + 1) % 3;
        let src = GradientSource::Digital(&m);
        for norm in [Norm::L2, Norm::L0, Norm::Linf] {
            let cfg = AttackConfig {
                max_iterations: 0,
                ..AttackConfig::with_norm(norm)
            };
            let r = run_attack(&src, &x, &y, &cfg).unwrap();
            assert_eq!(r.adversarial, x);
            assert_eq!(r.success, vec![true, false, false, false, false, false]);
            assert!(r.distortion.iter().all(|d| *d == 0.0));
        }
    }

    #[test]
    fn attacks_succeed_and_account_distortion() {
        let m = tiny();
        let (x, y) = batch(&m, 8);
        let src = GradientSource::Digital(&m);
        for norm in [Norm::L2, Norm::L0, Norm::Linf] {
            let r = run_attack(&src, &x, &y, &quick(norm)).unwrap();
            assert!(r.adversarial.data.iter().all(|v| (0.0..=1.0).contains(v)));
            let pred = m.logits(&r.adversarial).unwrap().argmax_rows();
            for i in 0..8 {
                assert_eq!(r.success[i], pred[i] != y[i], "{norm} sample {i}");
                let d = distance(norm, r.adversarial.sample(i), x.sample(i));
                assert!((d - r.distortion[i]).abs() < 1e-6);
                if r.success[i] && norm == Norm::L0 {
                    assert!(r.distortion[i] >= 1.0);
                }
            }
            assert!(r.success.iter().filter(|s| **s).count() >= 6, "{norm}: {:?}", r.success);
            let acc = evaluate_on(&m, &r.adversarial, &y).unwrap();
            assert_eq!(acc, r.source_accuracy);
            let succ: Vec<usize> = (0..8).filter(|i| r.success[*i]).collect();
            let ys: Vec<usize> = succ.iter().map(|i| y[*i]).collect();
            assert_eq!(evaluate_on(&m, &r.adversarial.select(&succ), &ys).unwrap(), 0.0);
        }
    }

    #[test]
    fn clean_evaluation_is_plain_accuracy() {
        let m = tiny();
        let (x, y) = batch(&m, 10);
        assert_eq!(evaluate_on(&m, &x, &y).unwrap(), 100.0);
        assert!(evaluate_on(&m, &x, &y[..3]).is_err());
    }

    #[test]
    fn adversarial_container_round_trip() {
        let m = tiny();
        let (x, y) = batch(&m, 4);
        let cfg = quick(Norm::L2);
        let r = cw_l2(&GradientSource::Digital(&m), &x, &y, &cfg).unwrap();
        let set = AdversarialSet::new("digital", &cfg, &x, &y, &r);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.adv");
        set.save(&p).unwrap();
        assert_eq!(AdversarialSet::load(&p).unwrap(), set);
        let mut bytes = set.to_bytes().unwrap();
        bytes.pop();
        assert!(matches!(AdversarialSet::from_bytes(&bytes, &p), Err(Error::Format { .. })));
        bytes[0] = b'X';
        assert!(matches!(AdversarialSet::from_bytes(&bytes, &p), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn inputs_outside_the_box_are_rejected() {
        let m = tiny();
        let x = Tensor::new(vec![1, 6], vec![0.5, 1.5, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(cw_l2(&GradientSource::Digital(&m), &x, &[0], &quick(Norm::L2)), Err(Error::Domain(_))));
    }
}
