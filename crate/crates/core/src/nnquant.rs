//! A small quantized CNN engine with explicit forward and backward passes.
//!
//! Every conv/dense layer in quantized mode computes
//!
//! ```text
//! codes = round(clamp(x, 0, clip) / clip * (2^a - 1))
//! z     = w_q . codes            (integer products, or chip partial sums)
//! y     = z * (s_w * s_x) + b    with s_x = clip / (2^a - 1)
//! ```
//!
//! The integer products come from a [`MacEngine`]: the digital engine
//! multiplies exactly, a chip runs the mapped crossbars. Because the final
//! expression is shared, a lossless zero-offset chip reproduces the digital
//! logits bit for bit.
//!
//! Backward uses straight-through estimators: weight gradients flow to the
//! float master weights unchanged, the activation quantizer passes gradient
//! where `0 <= x <= clip`, and the converter path is treated as identity.
//! Inputs to every weighted layer must be non-negative (image pixels or the
//! output of a relu/pool), which the layer graphs built here guarantee.

use serde::{Deserialize, Serialize};

use crate::chip::ChipInstance;
use crate::dataio::{batches, Dataset};
use crate::error::{Error, Result};
use crate::numstat::{derive_stream, sample_normal, RngStream};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per batch entry.
    pub fn per_sample(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.per_sample();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.per_sample();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Rows `indices` of the batch dimension.
    pub fn select(&self, indices: &[usize]) -> Tensor {
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * self.per_sample());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor { shape, data }
    }

    /// Index of the largest entry per batch row (first on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.batch())
            .map(|i| {
                let row = self.sample(i);
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    AvgPool {
        size: usize,
    },
    Flatten,
}

impl LayerKind {
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Dense { .. })
    }

    /// `(rows, cols)` of the weight matrix: outputs by flattened fan-in.
    pub fn weight_dims(&self) -> Option<(usize, usize)> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((out_channels, in_channels * kernel * kernel)),
            LayerKind::Dense {
                in_features,
                out_features,
            } => Some((out_features, in_features)),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || Error::Shape(format!("{self:?} cannot take input {input:?}"));
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = <[usize; 3]>::try_from(input).map_err(|_| bad())?;
                if c != in_channels || stride == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(bad());
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                if input.iter().product::<usize>() != in_features || input.len() != 1 {
                    return Err(bad());
                }
                Ok(vec![out_features])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool { size } | LayerKind::AvgPool { size } => {
                let [c, h, w] = <[usize; 3]>::try_from(input).map_err(|_| bad())?;
                if size == 0 || h < size || w < size {
                    return Err(bad());
                }
                Ok(vec![c, h / size, w / size])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Integer weights and their dequantization scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantWeights {
    pub w_q: Vec<i32>,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    #[serde(default)]
    pub weights: Vec<f64>,
    #[serde(default)]
    pub bias: Vec<f64>,
    /// Activation clip of this layer's input quantizer.
    #[serde(default = "default_clip")]
    pub act_clip: f64,
    /// Quantized weights that replace re-quantization of `weights`, used by
    /// models rebuilt from a chip readout. Cleared by any weight update.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinned: Option<QuantWeights>,
}

fn default_clip() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub act_bits: u32,
    pub weight_bits: u32,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            act_bits: 8,
            weight_bits: 8,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.act_bits) {
            return Err(Error::Config(format!("act_bits {} outside 1..=16", self.act_bits)));
        }
        if !(2..=16).contains(&self.weight_bits) {
            return Err(Error::Config(format!("weight_bits {} outside 2..=16", self.weight_bits)));
        }
        Ok(())
    }

    pub fn act_max(&self) -> u32 {
        (1u32 << self.act_bits) - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Float,
    Quantized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    /// Per-sample input shape `[c, h, w]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub quant: QuantConfig,
}

/// Quantizes weights symmetrically with `scale = max|w| / (2^(bits-1) - 1)`,
/// rounding half away from zero. An all-zero tensor gets scale 1.
pub fn quantize_weights(w: &[f64], bits: u32) -> Result<(Vec<i32>, f64)> {
    if !(2..=16).contains(&bits) {
        return Err(Error::Domain(format!("weight bits {bits} outside 2..=16")));
    }
    let qmax = ((1i64 << (bits - 1)) - 1) as f64;
    let max_abs = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !max_abs.is_finite() {
        return Err(Error::Numeric("non-finite weight".into()));
    }
    if max_abs == 0.0 {
        return Ok((vec![0; w.len()], 1.0));
    }
    let q = w
        .iter()
        .map(|v| (v * qmax / max_abs).round().clamp(-qmax, qmax) as i32)
        .collect();
    Ok((q, max_abs / qmax))
}

/// `round(clamp(x, 0, clip) / clip * (2^bits - 1))`, half away from zero.
pub fn quantize_acts(x: &[f64], bits: u32, clip: f64) -> Result<Vec<u32>> {
    if !(clip > 0.0 && clip.is_finite()) {
        return Err(Error::Domain(format!("activation clip {clip} must be positive")));
    }
    if !(1..=16).contains(&bits) {
        return Err(Error::Domain(format!("activation bits {bits} outside 1..=16")));
    }
    let m = ((1u32 << bits) - 1) as f64;
    Ok(x.iter().map(|v| quant_act(*v, clip, m) as u32).collect())
}

fn quant_act(v: f64, clip: f64, m: f64) -> f64 {
    (v.clamp(0.0, clip) / clip * m).round()
}

/// Source of the integer products `z = w_q . codes` of weighted layer `li`.
pub trait MacEngine {
    /// `codes` is `n_vec x fan_in` row-major (exact small integers); fills
    /// `out` (`n_vec x fan_out`).
    fn products(&self, li: usize, codes: &[f64], n_vec: usize, out: &mut [f64]) -> Result<()>;
}

/// Exact integer products against a set of quantized weights.
pub struct DigitalEngine<'a> {
    pub weights: &'a [QuantWeights],
    pub dims: Vec<(usize, usize)>,
}

impl MacEngine for DigitalEngine<'_> {
    fn products(&self, li: usize, codes: &[f64], n_vec: usize, out: &mut [f64]) -> Result<()> {
        let (rows, cols) = self.dims[li];
        let w: Vec<f64> = self.weights[li].w_q.iter().map(|v| *v as f64).collect();
        matmul_nt(codes, &w, n_vec, cols, rows, out);
        Ok(())
    }
}

/// `out[v][o] = sum_k a[v][k] * b[o][k]` with a fixed summation order.
fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, o: usize, out: &mut [f64]) {
    for v in 0..n {
        let av = &a[v * k..(v + 1) * k];
        let ov = &mut out[v * o..(v + 1) * o];
        for (j, slot) in ov.iter_mut().enumerate() {
            let bj = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in av.iter().zip(bj) {
                s += x * y;
            }
            *slot = s;
        }
    }
}

/// Per-layer state saved by the forward pass for backward.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Weighted {
        /// Input before quantization.
        input: Tensor,
        /// The values the products actually saw (dequantized codes in
        /// quantized mode, the raw input in float mode).
        effective_input: Tensor,
        /// Effective weights (dequantized in quantized mode).
        effective_weights: Vec<f64>,
        /// Upper end of the pass-through window, `None` in float mode.
        clip: Option<f64>,
    },
    Relu {
        mask: Vec<bool>,
    },
    MaxPool {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    AvgPool {
        input_shape: Vec<usize>,
    },
    Flatten {
        input_shape: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct Cache {
    pub layers: Vec<LayerCache>,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// One entry per layer; empty vectors for parameterless layers.
    pub layers: Vec<LayerGrads>,
    pub input: Tensor,
}

impl QuantizedModel {
    /// conv 1->8 3x3 -> relu -> maxpool 2 -> conv 8->16 3x3 -> relu ->
    /// maxpool 2 -> flatten -> dense 784->10, He-initialized from `seed`.
    pub fn desk_cnn(seed: u64, quant: QuantConfig) -> Result<Self> {
        let conv = |i, o| LayerKind::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        Self::from_kinds(
            vec![1, 28, 28],
            &[
                conv(1, 8),
                LayerKind::Relu,
                LayerKind::MaxPool { size: 2 },
                conv(8, 16),
                LayerKind::Relu,
                LayerKind::MaxPool { size: 2 },
                LayerKind::Flatten,
                LayerKind::Dense {
                    in_features: 784,
                    out_features: 10,
                },
            ],
            quant,
            seed,
        )
    }

    /// Builds a model with He-normal weights and zero biases. Every layer's
    /// weights come from its own labelled stream.
    pub fn from_kinds(input_shape: Vec<usize>, kinds: &[LayerKind], quant: QuantConfig, seed: u64) -> Result<Self> {
        quant.validate()?;
        let mut layers = Vec::with_capacity(kinds.len());
        for (i, kind) in kinds.iter().enumerate() {
            let (weights, bias) = match kind.weight_dims() {
                Some((rows, cols)) => {
                    let mut s = derive_stream(seed, format!("init/{i}").as_bytes());
                    let std = (2.0 / cols as f64).sqrt();
                    let w = (0..rows * cols)
                        .map(|_| sample_normal(&mut s, 0.0, std))
                        .collect::<Result<Vec<_>>>()?;
                    (w, vec![0.0; rows])
                }
                None => (Vec::new(), Vec::new()),
            };
            layers.push(Layer {
                kind: *kind,
                weights,
                bias,
                act_clip: 1.0,
                pinned: None,
            });
        }
        let m = QuantizedModel {
            input_shape,
            layers,
            quant,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.quant.validate()?;
        let mut shape = self.input_shape.clone();
        for (i, l) in self.layers.iter().enumerate() {
            shape = l.kind.output_shape(&shape).map_err(|e| match e {
                Error::Shape(m) => Error::Config(format!("layer {i}: {m}")),
                other => other,
            })?;
            if let Some((r, c)) = l.kind.weight_dims() {
                if l.weights.len() != r * c || l.bias.len() != r {
                    return Err(Error::Config(format!(
                        "layer {i}: {} weights / {} biases for a {r}x{c} layer",
                        l.weights.len(),
                        l.bias.len()
                    )));
                }
                if !(l.act_clip > 0.0 && l.act_clip.is_finite()) {
                    return Err(Error::Config(format!("layer {i}: act_clip must be positive")));
                }
            }
        }
        if shape.len() != 1 {
            return Err(Error::Config(format!("network output shape {shape:?} is not a vector")));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| l.kind.weight_dims())
            .map(|(r, _)| r)
            .unwrap_or(0)
    }

    /// Indices into `layers` of the conv/dense layers, in order.
    pub fn weighted_indices(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|i| self.layers[*i].kind.is_weighted()).collect()
    }

    pub fn weight_dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().filter_map(|l| l.kind.weight_dims()).collect()
    }

    /// Quantized weights of every weighted layer (pinned values win).
    pub fn quant_weights(&self) -> Result<Vec<QuantWeights>> {
        self.layers
            .iter()
            .filter(|l| l.kind.is_weighted())
            .map(|l| match &l.pinned {
                Some(p) => Ok(p.clone()),
                None => {
                    let (w_q, scale) = quantize_weights(&l.weights, self.quant.weight_bits)?;
                    Ok(QuantWeights { w_q, scale })
                }
            })
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape.len() != self.input_shape.len() + 1 || x.shape[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "input {:?} for a model expecting [n, {:?}]",
                x.shape, self.input_shape
            )));
        }
        Ok(())
    }

    /// Float forward without any quantization.
    pub fn forward_float(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        self.forward_with(x, Mode::Float, None)
    }

    /// Quantized forward with exact integer products (the pure digital
    /// network).
    pub fn forward_digital(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        let qw = self.quant_weights()?;
        let engine = DigitalEngine {
            weights: &qw,
            dims: self.weight_dims(),
        };
        self.forward_with(x, Mode::Quantized, Some((&qw, &engine)))
    }

    /// Forward pass; in quantized mode `engine` supplies the products and
    /// `qw` the weight scales.
    pub fn forward_with(
        &self,
        x: &Tensor,
        mode: Mode,
        engine: Option<(&[QuantWeights], &dyn MacEngine)>,
    ) -> Result<(Tensor, Cache)> {
        self.check_input(x)?;
        if mode == Mode::Quantized && engine.is_none() {
            return Err(Error::State("quantized forward needs an engine".into()));
        }
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut li = 0;
        for layer in &self.layers {
            let (next, cache) = match layer.kind {
                LayerKind::Conv2d { .. } | LayerKind::Dense { .. } => {
                    let r = weighted_forward(layer, li, &cur, mode, engine, self.quant)?;
                    li += 1;
                    r
                }
                LayerKind::Relu => {
                    let mask: Vec<bool> = cur.data.iter().map(|v| *v > 0.0).collect();
                    let data = cur.data.iter().map(|v| v.max(0.0)).collect();
                    (Tensor::new(cur.shape.clone(), data), LayerCache::Relu { mask })
                }
                LayerKind::MaxPool { size } => maxpool_forward(&cur, size),
                LayerKind::AvgPool { size } => avgpool_forward(&cur, size),
                LayerKind::Flatten => {
                    let n = cur.batch();
                    let shape = cur.shape.clone();
                    let per = cur.per_sample();
                    (
                        Tensor::new(vec![n, per], cur.data),
                        LayerCache::Flatten { input_shape: shape },
                    )
                }
            };
            caches.push(cache);
            cur = next;
        }
        if cur.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok((cur, Cache { layers: caches, mode }))
    }

    /// Backward pass from a gradient on the logits.
    pub fn backward_from_logits(&self, cache: &Cache, grad_logits: &Tensor, weight_grads: bool) -> Result<Gradients> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::State(format!(
                "cache has {} layers, model has {}",
                cache.layers.len(),
                self.layers.len()
            )));
        }
        let mut g = grad_logits.clone();
        let mut grads = vec![
            LayerGrads {
                weights: Vec::new(),
                bias: Vec::new()
            };
            self.layers.len()
        ];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            g = match (&layer.kind, &cache.layers[i]) {
                (kind @ (LayerKind::Conv2d { .. } | LayerKind::Dense { .. }), LayerCache::Weighted { .. }) => {
                    let (dx, lg) = weighted_backward(kind, &cache.layers[i], &g, weight_grads)?;
                    grads[i] = lg;
                    dx
                }
                (LayerKind::Relu, LayerCache::Relu { mask }) => {
                    let data = g.data.iter().zip(mask).map(|(v, m)| if *m { *v } else { 0.0 }).collect();
                    Tensor::new(g.shape.clone(), data)
                }
                (LayerKind::MaxPool { .. }, LayerCache::MaxPool { input_shape, argmax }) => {
                    let mut dx = Tensor::zeros(input_shape.clone());
                    for (o, &src) in argmax.iter().enumerate() {
                        dx.data[src] += g.data[o];
                    }
                    dx
                }
                (LayerKind::AvgPool { size }, LayerCache::AvgPool { input_shape }) => avgpool_backward(&g, input_shape, *size),
                (LayerKind::Flatten, LayerCache::Flatten { input_shape }) => Tensor::new(input_shape.clone(), g.data),
                _ => return Err(Error::State(format!("cache entry {i} does not match layer kind"))),
            };
        }
        Ok(Gradients { layers: grads, input: g })
    }

    /// Softmax cross-entropy loss and its gradients.
    pub fn backward(&self, cache: &Cache, logits: &Tensor, labels: &[usize]) -> Result<(f64, Gradients)> {
        let (loss, dz) = softmax_cross_entropy(logits, labels)?;
        Ok((loss, self.backward_from_logits(cache, &dz, true)?))
    }

    /// Model whose quantized weights are pinned to a readout.
    pub fn from_readout(arch: &QuantizedModel, readout: &[ReadoutLayer]) -> Result<Self> {
        let mut m = arch.clone();
        let idx = m.weighted_indices();
        if idx.len() != readout.len() {
            return Err(Error::Shape(format!(
                "readout has {} layers, model has {} weighted layers",
                readout.len(),
                idx.len()
            )));
        }
        for (&i, r) in idx.iter().zip(readout) {
            let l = &mut m.layers[i];
            if r.w_q.len() != l.weights.len() || r.bias.len() != l.bias.len() {
                return Err(Error::Shape(format!("readout layer {i} does not match the architecture")));
            }
            l.weights = r.w_q.iter().map(|q| *q as f64 * r.scale).collect();
            l.bias = r.bias.clone();
            l.act_clip = r.act_clip;
            l.pinned = Some(QuantWeights {
                w_q: r.w_q.clone(),
                scale: r.scale,
            });
        }
        m.quant.weight_bits = readout.first().map(|r| r.weight_bits).unwrap_or(m.quant.weight_bits);
        Ok(m)
    }
}

/// Integer weights, scale, bias and input clip of one programmed layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutLayer {
    pub rows: usize,
    pub cols: usize,
    pub weight_bits: u32,
    pub w_q: Vec<i32>,
    pub scale: f64,
    pub bias: Vec<f64>,
    pub act_clip: f64,
}

fn conv_geometry(kind: &LayerKind, in_shape: &[usize]) -> (usize, usize, usize, usize, usize, usize, usize, usize) {
    match *kind {
        LayerKind::Conv2d {
            in_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let (h, w) = (in_shape[1], in_shape[2]);
            let oh = (h + 2 * padding - kernel) / stride + 1;
            let ow = (w + 2 * padding - kernel) / stride + 1;
            (in_channels, h, w, kernel, stride, padding, oh, ow)
        }
        _ => unreachable!("conv geometry of a non-conv layer"),
    }
}

/// Patches of one sample: `oh*ow` rows of `c*k*k` values, zero padded.
fn im2col(x: &[f64], geo: (usize, usize, usize, usize, usize, usize, usize, usize), out: &mut [f64]) {
    let (c, h, w, k, s, p, oh, ow) = geo;
    let kk = c * k * k;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut out[(oy * ow + ox) * kk..(oy * ow + ox + 1) * kk];
            let mut idx = 0;
            for ch in 0..c {
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - p as isize;
                        row[idx] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            x[ch * h * w + iy as usize * w + ix as usize]
                        } else {
                            0.0
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], geo: (usize, usize, usize, usize, usize, usize, usize, usize), dx: &mut [f64]) {
    let (c, h, w, k, s, p, oh, ow) = geo;
    let kk = c * k * k;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * kk..(oy * ow + ox + 1) * kk];
            let mut idx = 0;
            for ch in 0..c {
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            dx[ch * h * w + iy as usize * w + ix as usize] += row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Input matrix (`n_vec x fan_in`) of a weighted layer.
fn layer_matrix(kind: &LayerKind, x: &Tensor) -> (Vec<f64>, usize) {
    match kind {
        LayerKind::Conv2d { .. } => {
            let geo = conv_geometry(kind, &x.shape[1..]);
            let (c, _, _, k, _, _, oh, ow) = geo;
            let kk = c * k * k;
            let l = oh * ow;
            let n = x.batch();
            let mut p = vec![0.0; n * l * kk];
            for i in 0..n {
                im2col(x.sample(i), geo, &mut p[i * l * kk..(i + 1) * l * kk]);
            }
            (p, n * l)
        }
        _ => (x.data.clone(), x.batch()),
    }
}

fn weighted_forward(
    layer: &Layer,
    li: usize,
    x: &Tensor,
    mode: Mode,
    engine: Option<(&[QuantWeights], &dyn MacEngine)>,
    quant: QuantConfig,
) -> Result<(Tensor, LayerCache)> {
    let (rows, cols) = layer.kind.weight_dims().expect("weighted layer");
    let out_shape = layer.kind.output_shape(&x.shape[1..])?;
    let n = x.batch();

    let (effective_input, effective_weights, mult, clip) = match (mode, engine) {
        (Mode::Quantized, Some((qw, _))) => {
            let m = quant.act_max() as f64;
            let sx = layer.act_clip / m;
            let eff: Vec<f64> = x.data.iter().map(|v| quant_act(*v, layer.act_clip, m)).collect();
            let q = &qw[li];
            let w_eff = q.w_q.iter().map(|v| *v as f64 * q.scale).collect();
            (Tensor::new(x.shape.clone(), eff), w_eff, q.scale * sx, Some(layer.act_clip))
        }
        _ => (x.clone(), layer.weights.clone(), 1.0, None),
    };
    // In quantized mode `effective_input` holds the codes at this point.
    let (mat, n_vec) = layer_matrix(&layer.kind, &effective_input);
    let mut z = vec![0.0; n_vec * rows];
    match (mode, engine) {
        (Mode::Quantized, Some((_, eng))) => eng.products(li, &mat, n_vec, &mut z)?,
        _ => matmul_nt(&mat, &layer.weights, n_vec, cols, rows, &mut z),
    }

    let per_out: usize = out_shape.iter().product();
    let positions = per_out / rows;
    let mut y = vec![0.0; n * per_out];
    for i in 0..n {
        for pos in 0..positions {
            let zrow = &z[(i * positions + pos) * rows..(i * positions + pos + 1) * rows];
            for (o, zv) in zrow.iter().enumerate() {
                y[i * per_out + o * positions + pos] = zv * mult + layer.bias[o];
            }
        }
    }
    let effective_input = match clip {
        Some(c) => {
            let sx = c / quant.act_max() as f64;
            Tensor::new(
                effective_input.shape.clone(),
                effective_input.data.iter().map(|q| q * sx).collect(),
            )
        }
        None => effective_input,
    };
    let mut shape = vec![n];
    shape.extend(out_shape);
    Ok((
        Tensor::new(shape, y),
        LayerCache::Weighted {
            input: x.clone(),
            effective_input,
            effective_weights,
            clip,
        },
    ))
}

fn weighted_backward(kind: &LayerKind, cache: &LayerCache, g: &Tensor, weight_grads: bool) -> Result<(Tensor, LayerGrads)> {
    let LayerCache::Weighted {
        input,
        effective_input,
        effective_weights,
        clip,
    } = cache
    else {
        unreachable!()
    };
    let (rows, cols) = kind.weight_dims().expect("weighted layer");
    let n = g.batch();
    let positions = g.per_sample() / rows;
    let n_vec = n * positions;
    // dY as an n_vec x rows matrix.
    let mut dy = vec![0.0; n_vec * rows];
    for i in 0..n {
        let gs = g.sample(i);
        for o in 0..rows {
            for pos in 0..positions {
                dy[(i * positions + pos) * rows + o] = gs[o * positions + pos];
            }
        }
    }

    let mut lg = LayerGrads {
        weights: Vec::new(),
        bias: Vec::new(),
    };
    if weight_grads {
        let (mat, _) = layer_matrix(kind, effective_input);
        let mut dw = vec![0.0; rows * cols];
        let mut db = vec![0.0; rows];
        for v in 0..n_vec {
            let dv = &dy[v * rows..(v + 1) * rows];
            let xv = &mat[v * cols..(v + 1) * cols];
            for (o, d) in dv.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                db[o] += d;
                for (wslot, xk) in dw[o * cols..(o + 1) * cols].iter_mut().zip(xv) {
                    *wslot += d * xk;
                }
            }
        }
        lg = LayerGrads { weights: dw, bias: db };
    }

    let mut dmat = vec![0.0; n_vec * cols];
    for v in 0..n_vec {
        let dv = &dy[v * rows..(v + 1) * rows];
        let out = &mut dmat[v * cols..(v + 1) * cols];
        for (o, d) in dv.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            for (slot, w) in out.iter_mut().zip(&effective_weights[o * cols..(o + 1) * cols]) {
                *slot += d * w;
            }
        }
    }
    let mut dx = Tensor::zeros(input.shape.clone());
    match kind {
        LayerKind::Conv2d { .. } => {
            let geo = conv_geometry(kind, &input.shape[1..]);
            let kk = cols;
            for i in 0..n {
                col2im(
                    &dmat[i * positions * kk..(i + 1) * positions * kk],
                    geo,
                    dx.sample_mut(i),
                );
            }
        }
        _ => dx.data = dmat,
    }
    if let Some(c) = clip {
        for (d, x) in dx.data.iter_mut().zip(&input.data) {
            if !(*x >= 0.0 && *x <= *c) {
                *d = 0.0;
            }
        }
    }
    Ok((dx, lg))
}

fn maxpool_forward(x: &Tensor, size: usize) -> (Tensor, LayerCache) {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = (h / size, w / size);
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * w + ox * size + dx;
                            if x.data[idx] > x.data[best] {
                                best = idx;
                            }
                        }
                    }
                    y.push(x.data[best]);
                    argmax.push(best);
                }
            }
        }
    }
    (
        Tensor::new(vec![n, c, oh, ow], y),
        LayerCache::MaxPool {
            input_shape: x.shape.clone(),
            argmax,
        },
    )
}

fn avgpool_forward(x: &Tensor, size: usize) -> (Tensor, LayerCache) {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = (h / size, w / size);
    let norm = (size * size) as f64;
    let mut y = Vec::with_capacity(n * c * oh * ow);
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..size {
                        for dx in 0..size {
                            s += x.data[base + (oy * size + dy) * w + ox * size + dx];
                        }
                    }
                    y.push(s / norm);
                }
            }
        }
    }
    (
        Tensor::new(vec![n, c, oh, ow], y),
        LayerCache::AvgPool {
            input_shape: x.shape.clone(),
        },
    )
}

fn avgpool_backward(g: &Tensor, input_shape: &[usize], size: usize) -> Tensor {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (oh, ow) = (h / size, w / size);
    let norm = (size * size) as f64;
    let mut dx = Tensor::zeros(input_shape.to_vec());
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g.data[((i * c + ch) * oh + oy) * ow + ox] / norm;
                    for dy in 0..size {
                        for dx_ in 0..size {
                            dx.data[base + (oy * size + dy) * w + ox * size + dx_] += gv;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Mean softmax cross-entropy over the batch and its logit gradient.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let n = logits.batch();
    if labels.len() != n || logits.shape.len() != 2 {
        return Err(Error::Shape(format!(
            "{} labels for logits {:?}",
            labels.len(),
            logits.shape
        )));
    }
    let k = logits.shape[1];
    let mut grad = Tensor::zeros(logits.shape.clone());
    let mut loss = 0.0;
    for i in 0..n {
        let row = logits.sample(i);
        if labels[i] >= k {
            return Err(Error::Shape(format!("label {} outside 0..{k}", labels[i])));
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += sum.ln() + m - row[labels[i]];
        let g = grad.sample_mut(i);
        for j in 0..k {
            g[j] = ((row[j] - m).exp() / sum - if j == labels[i] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Anything that maps an input batch to logits.
pub trait Classifier {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
}

/// The quantized digital network.
impl Classifier for QuantizedModel {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_digital(x)?.0)
    }
}

/// Float network view, used for warmup and calibration.
pub struct FloatView<'a>(pub &'a QuantizedModel);

impl Classifier for FloatView<'_> {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.0.forward_float(x)?.0)
    }
}

/// Top-1 accuracy in percent, evaluated in chunks of `chunk` samples.
pub fn accuracy(model: &dyn Classifier, data: &Dataset, chunk: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Shape("accuracy of an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for c in idx.chunks(chunk.max(1)) {
        let (x, y) = data.batch(c);
        let pred = model.logits(&x)?.argmax_rows();
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Relative gradient error of one layer: analytic weight, bias and input
/// gradients against central differences of `L = sum(r * y)` in float mode.
/// Returns the largest of the three `|a - n| / (|a| + |n|)` norm ratios.
pub fn gradient_check(kind: LayerKind, input_shape: &[usize], eps: f64, seed: u64) -> Result<f64> {
    let mut s = derive_stream(seed, b"gradient-check");
    let model = {
        let mut m = QuantizedModel {
            input_shape: input_shape.to_vec(),
            layers: vec![Layer {
                kind,
                weights: Vec::new(),
                bias: Vec::new(),
                act_clip: 1.0,
                pinned: None,
            }],
            quant: QuantConfig::default(),
        };
        if let Some((r, c)) = kind.weight_dims() {
            m.layers[0].weights = (0..r * c).map(|_| s.uniform() * 2.0 - 1.0).collect();
            m.layers[0].bias = (0..r).map(|_| s.uniform() * 2.0 - 1.0).collect();
        }
        m
    };
    let batch = 2;
    let mut shape = vec![batch];
    shape.extend_from_slice(input_shape);
    let n_in: usize = shape.iter().product();
    // Inputs bounded away from zero in magnitude keep relu off its kink.
    let x = Tensor::new(
        shape,
        (0..n_in)
            .map(|_| {
                let v = 0.1 + 0.9 * s.uniform();
                if s.uniform() < 0.5 {
                    -v
                } else {
                    v
                }
            })
            .collect(),
    );
    let (y, cache) = forward_layer_float(&model, &x)?;
    let r: Vec<f64> = (0..y.data.len()).map(|_| s.uniform() * 2.0 - 1.0).collect();
    let g = model.backward_from_logits(&cache, &Tensor::new(y.shape.clone(), r.clone()), true)?;

    let loss = |m: &QuantizedModel, x: &Tensor| -> Result<f64> {
        let (y, _) = forward_layer_float(m, x)?;
        Ok(y.data.iter().zip(&r).map(|(a, b)| a * b).sum())
    };
    let rel = |a: &[f64], n: &[f64]| -> f64 {
        let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|v| v * v).sum::<f64>().sqrt() + n.iter().map(|v| v * v).sum::<f64>().sqrt();
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    };

    let mut numeric_x = vec![0.0; x.data.len()];
    for i in 0..x.data.len() {
        let mut xp = x.clone();
        xp.data[i] += eps;
        let mut xm = x.clone();
        xm.data[i] -= eps;
        numeric_x[i] = (loss(&model, &xp)? - loss(&model, &xm)?) / (2.0 * eps);
    }
    let mut worst = rel(&g.input.data, &numeric_x);
    if kind.is_weighted() {
        for which in 0..2 {
            let len = if which == 0 {
                model.layers[0].weights.len()
            } else {
                model.layers[0].bias.len()
            };
            let mut numeric = vec![0.0; len];
            for i in 0..len {
                let mut mp = model.clone();
                let mut mm = model.clone();
                if which == 0 {
                    mp.layers[0].weights[i] += eps;
                    mm.layers[0].weights[i] -= eps;
                } else {
                    mp.layers[0].bias[i] += eps;
                    mm.layers[0].bias[i] -= eps;
                }
                numeric[i] = (loss(&mp, &x)? - loss(&mm, &x)?) / (2.0 * eps);
            }
            let analytic = if which == 0 {
                &g.layers[0].weights
            } else {
                &g.layers[0].bias
            };
            worst = worst.max(rel(analytic, &numeric));
        }
    }
    Ok(worst)
}

/// Float forward that accepts any output shape (single-layer checks).
fn forward_layer_float(m: &QuantizedModel, x: &Tensor) -> Result<(Tensor, Cache)> {
    let layer = &m.layers[0];
    let (y, c) = match layer.kind {
        LayerKind::Conv2d { .. } | LayerKind::Dense { .. } => weighted_forward(layer, 0, x, Mode::Float, None, m.quant)?,
        LayerKind::Relu => {
            let mask: Vec<bool> = x.data.iter().map(|v| *v > 0.0).collect();
            (
                Tensor::new(x.shape.clone(), x.data.iter().map(|v| v.max(0.0)).collect()),
                LayerCache::Relu { mask },
            )
        }
        LayerKind::MaxPool { size } => maxpool_forward(x, size),
        LayerKind::AvgPool { size } => avgpool_forward(x, size),
        LayerKind::Flatten => (
            Tensor::new(vec![x.batch(), x.per_sample()], x.data.clone()),
            LayerCache::Flatten {
                input_shape: x.shape.clone(),
            },
        ),
    };
    Ok((
        y,
        Cache {
            layers: vec![c],
            mode: Mode::Float,
        },
    ))
}

/// Optimizer state and counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub learning_rate: f64,
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epoch: usize,
    pub iteration: usize,
    pub loss_history: Vec<f64>,
    #[serde(default)]
    velocity: Vec<(Vec<f64>, Vec<f64>)>,
}

impl TrainState {
    pub fn new(learning_rate: f64, momentum: f64, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(learning_rate > 0.0 && learning_rate.is_finite()) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "need learning_rate > 0 and 0 <= momentum < 1, got {learning_rate} / {momentum}"
            )));
        }
        Ok(TrainState {
            learning_rate,
            momentum,
            weight_decay: 0.0,
            batch_size,
            epoch: 0,
            iteration: 0,
            loss_history: Vec::new(),
            velocity: Vec::new(),
        })
    }

    /// SGD with momentum: `v = mu v + g + wd w; w -= lr v`.
    pub fn step(&mut self, model: &mut QuantizedModel, grads: &Gradients) -> Result<()> {
        if self.velocity.len() != model.layers.len() {
            self.velocity = model
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect();
        }
        for ((layer, g), (vw, vb)) in model.layers.iter_mut().zip(&grads.layers).zip(&mut self.velocity) {
            if !layer.kind.is_weighted() {
                continue;
            }
            if g.weights.len() != layer.weights.len() || g.bias.len() != layer.bias.len() {
                return Err(Error::Shape("gradient shapes do not match the model".into()));
            }
            for ((w, gw), v) in layer.weights.iter_mut().zip(&g.weights).zip(vw.iter_mut()) {
                *v = self.momentum * *v + gw + self.weight_decay * *w;
                *w -= self.learning_rate * *v;
            }
            for ((b, gb), v) in layer.bias.iter_mut().zip(&g.bias).zip(vb.iter_mut()) {
                *v = self.momentum * *v + gb;
                *b -= self.learning_rate * *v;
            }
            layer.pinned = None;
        }
        self.iteration += 1;
        Ok(())
    }
}

/// Forward used by a training loop: returns logits and the cache.
pub type ForwardFn<'a> = dyn FnMut(&QuantizedModel, &Tensor) -> Result<(Tensor, Cache)> + 'a;
/// Called after every weight update.
pub type StepHook<'a> = dyn FnMut(&QuantizedModel, &TrainState) -> Result<()> + 'a;

/// One pass over `data` in a seeded shuffled order. Batch order for epoch
/// `e` comes from the stream labelled `epoch/e` of `seed`.
pub fn train_epoch(
    model: &mut QuantizedModel,
    data: &Dataset,
    state: &mut TrainState,
    seed: u64,
    forward: &mut ForwardFn<'_>,
    after_step: &mut StepHook<'_>,
) -> Result<f64> {
    let epoch_seed = derive_stream(seed, format!("epoch/{}", state.epoch).as_bytes()).next_u64();
    let order = batches(data.len(), state.batch_size, epoch_seed, true)?;
    let mut total = 0.0;
    for idx in &order {
        let (x, y) = data.batch(idx);
        let (logits, cache) = forward(model, &x)?;
        let (loss, grads) = model.backward(&cache, &logits, &y)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "loss diverged at epoch {} iteration {}",
                state.epoch, state.iteration
            )));
        }
        state.step(model, &grads)?;
        if model
            .layers
            .iter()
            .any(|l| l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()))
        {
            return Err(Error::Numeric(format!(
                "parameters overflowed at epoch {} iteration {}",
                state.epoch, state.iteration
            )));
        }
        state.loss_history.push(loss);
        total += loss;
        after_step(model, state)?;
    }
    state.epoch += 1;
    Ok(total / order.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Float epochs before activation clips are calibrated.
    pub warmup_epochs: usize,
    /// Quantization-aware epochs.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the rate after every epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub calibration_samples: usize,
    /// Percentile of a layer's input used as its activation clip.
    pub clip_percentile: f64,
    pub seed: u64,
    /// Train on at most this many samples (`None` = all).
    #[serde(default)]
    pub max_train_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_epochs: 1,
            epochs: 3,
            batch_size: 64,
            learning_rate: 0.02,
            lr_decay: 0.5,
            momentum: 0.9,
            weight_decay: 0.0,
            calibration_samples: 1000,
            clip_percentile: 99.9,
            seed: 1,
            max_train_samples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub loss_history: Vec<f64>,
    pub final_learning_rate: f64,
    pub act_clips: Vec<f64>,
}

/// Sets each weighted layer's clip to the given percentile of its float
/// input over the calibration samples. The first layer keeps clip 1.0
/// (pixels already live in `[0, 1]`).
pub fn calibrate_clips(model: &mut QuantizedModel, data: &Dataset, samples: usize, percentile: f64) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..samples.min(data.len())).collect();
    let (x, _) = data.batch(&idx);
    let (_, cache) = model.forward_float(&x)?;
    let mut clips = Vec::new();
    let mut first = true;
    for (i, c) in cache.layers.iter().enumerate() {
        if let LayerCache::Weighted { input, .. } = c {
            let clip = if first {
                1.0
            } else {
                let mut v = input.data.clone();
                v.sort_by(|a, b| a.total_cmp(b));
                let pos = ((percentile / 100.0) * (v.len() - 1) as f64).round() as usize;
                let p = v[pos.min(v.len() - 1)];
                if p > 0.0 {
                    p
                } else {
                    v.last().copied().filter(|m| *m > 0.0).unwrap_or(1.0)
                }
            };
            model.layers[i].act_clip = clip;
            clips.push(clip);
            first = false;
        }
    }
    Ok(clips)
}

/// Float warmup, clip calibration, then quantization-aware training with
/// the digital forward. Deterministic for a fixed config and dataset.
pub fn train_baseline(model: &mut QuantizedModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let data = match cfg.max_train_samples {
        Some(n) => data.head(n),
        None => data.clone(),
    };
    let mut state = TrainState::new(cfg.learning_rate, cfg.momentum, cfg.batch_size)?;
    state.weight_decay = cfg.weight_decay;
    let mut epoch_losses = Vec::new();
    let mut noop = |_: &QuantizedModel, _: &TrainState| Ok(());
    for _ in 0..cfg.warmup_epochs {
        let mut f = |m: &QuantizedModel, x: &Tensor| m.forward_float(x);
        epoch_losses.push(train_epoch(model, &data, &mut state, cfg.seed, &mut f, &mut noop)?);
        state.learning_rate *= cfg.lr_decay;
    }
    let act_clips = calibrate_clips(model, &data, cfg.calibration_samples, cfg.clip_percentile)?;
    let mut final_lr = state.learning_rate;
    for _ in 0..cfg.epochs {
        let mut f = |m: &QuantizedModel, x: &Tensor| m.forward_digital(x);
        final_lr = state.learning_rate;
        epoch_losses.push(train_epoch(model, &data, &mut state, cfg.seed, &mut f, &mut noop)?);
        state.learning_rate *= cfg.lr_decay;
    }
    Ok(TrainReport {
        epoch_losses,
        loss_history: state.loss_history,
        final_learning_rate: final_lr,
        act_clips,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: QuantizedModel,
    pub final_learning_rate: f64,
    #[serde(default)]
    pub train_seed: u64,
}

pub fn save_checkpoint(path: &std::path::Path, ckpt: &Checkpoint) -> Result<()> {
    let json = serde_json::to_string_pretty(ckpt)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "checkpoint format_version {} is not {CHECKPOINT_FORMAT_VERSION}",
            ckpt.format_version
        )));
    }
    ckpt.model.validate()?;
    Ok(ckpt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Evaluate on the eval set every this many iterations (0 = only at
    /// the start and the end).
    pub eval_interval: usize,
    #[serde(default)]
    pub max_train_samples: Option<usize>,
}

impl FinetuneConfig {
    /// Defaults: batch 200, one epoch, a tenth of the baseline's final rate.
    pub fn from_baseline(final_learning_rate: f64, seed: u64) -> Self {
        FinetuneConfig {
            epochs: 1,
            batch_size: 200,
            learning_rate: final_learning_rate * 0.1,
            momentum: 0.9,
            seed,
            eval_interval: 50,
            max_train_samples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    /// `(iteration, accuracy %)` on the eval set, starting at iteration 0.
    pub curve: Vec<(usize, f64)>,
    pub loss_history: Vec<f64>,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
}

/// Hybrid finetune: forward on the chip with its static offsets, backward
/// and the weight update in float, then reprogram the chip.
pub fn finetune_hybrid(
    chip: &mut ChipInstance,
    model: &mut QuantizedModel,
    data: &Dataset,
    eval: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    if !chip.is_programmed() {
        return Err(Error::State("finetune needs a programmed chip".into()));
    }
    let data = match cfg.max_train_samples {
        Some(n) => data.head(n),
        None => data.clone(),
    };
    let accuracy_before = accuracy(chip, eval, 500)?;
    let mut curve = vec![(0, accuracy_before)];
    let mut state = TrainState::new(cfg.learning_rate, cfg.momentum, cfg.batch_size)?;
    let chip_cell = std::cell::RefCell::new(chip);
    for _ in 0..cfg.epochs {
        let mut fwd = |_: &QuantizedModel, x: &Tensor| chip_cell.borrow().forward(x);
        let mut hook = |m: &QuantizedModel, s: &TrainState| -> Result<()> {
            let mut c = chip_cell.borrow_mut();
            c.program(m)?;
            if cfg.eval_interval > 0 && s.iteration % cfg.eval_interval == 0 {
                curve.push((s.iteration, accuracy(&**c, eval, 500)?));
            }
            Ok(())
        };
        train_epoch(model, &data, &mut state, cfg.seed, &mut fwd, &mut hook)?;
    }
    let chip = chip_cell.into_inner();
    let accuracy_after = accuracy(chip, eval, 500)?;
    if curve.last().map(|c| c.0) != Some(state.iteration) {
        curve.push((state.iteration, accuracy_after));
    }
    Ok(FinetuneReport {
        curve,
        loss_history: state.loss_history,
        accuracy_before,
        accuracy_after,
    })
}

/// Plain digital quantization-aware finetuning with the same loop, order
/// and optimizer as [`finetune_hybrid`].
pub fn finetune_digital(model: &mut QuantizedModel, data: &Dataset, cfg: &FinetuneConfig) -> Result<Vec<f64>> {
    let data = match cfg.max_train_samples {
        Some(n) => data.head(n),
        None => data.clone(),
    };
    let mut state = TrainState::new(cfg.learning_rate, cfg.momentum, cfg.batch_size)?;
    let mut noop = |_: &QuantizedModel, _: &TrainState| Ok(());
    for _ in 0..cfg.epochs {
        let mut f = |m: &QuantizedModel, x: &Tensor| m.forward_digital(x);
        train_epoch(model, &data, &mut state, cfg.seed, &mut f, &mut noop)?;
    }
    Ok(state.loss_history)
}

/// Seeded uniform tensor in `[lo, hi)`; a test and example helper.
pub fn random_tensor(shape: Vec<usize>, lo: f64, hi: f64, stream: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| lo + (hi - lo) * stream.uniform()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn weight_quantizer_examples() {
        let (q, s) = quantize_weights(&[-1.0, 0.0, 1.0], 2).unwrap();
        assert_eq!(q, vec![-1, 0, 1]);
        assert_eq!(s, 1.0);
        let (q, s) = quantize_weights(&[0.4, -0.2], 8).unwrap();
        assert_eq!(q, vec![127, -64]);
        assert_eq!(s, 0.4 / 127.0);
        let (q, s) = quantize_weights(&[0.0; 4], 2).unwrap();
        assert_eq!((q, s), (vec![0; 4], 1.0));
        assert!(quantize_weights(&[1.0], 1).is_err());
    }

    #[test]
    fn act_quantizer_examples() {
        assert_eq!(quantize_acts(&[0.0, 2.0, 1.0, 5.0, -1.0], 8, 2.0).unwrap(), vec![0, 255, 128, 255, 0]);
        assert!(quantize_acts(&[0.0], 8, 0.0).is_err());
        assert!(quantize_acts(&[0.0], 8, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn dequantized_weights_within_half_step(w in prop::collection::vec(-3.0f64..3.0, 1..40), bits in 2u32..9) {
            let (q, s) = quantize_weights(&w, bits).unwrap();
            for (v, qi) in w.iter().zip(&q) {
                prop_assert!((*qi as f64 * s - v).abs() <= s / 2.0 + 1e-12);
            }
        }

        #[test]
        fn weight_quantizer_idempotent(w in prop::collection::vec(-3.0f64..3.0, 1..40), bits in 2u32..9) {
            let (q, s) = quantize_weights(&w, bits).unwrap();
            let deq: Vec<f64> = q.iter().map(|v| *v as f64 * s).collect();
            let (q2, _) = quantize_weights(&deq, bits).unwrap();
            prop_assert_eq!(q, q2);
        }

        #[test]
        fn act_quantizer_monotone(mut x in prop::collection::vec(-1.0f64..3.0, 2..50), bits in 1u32..10, clip in 0.1f64..2.5) {
            x.sort_by(|a, b| a.total_cmp(b));
            let q = quantize_acts(&x, bits, clip).unwrap();
            prop_assert!(q.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(q.iter().all(|v| *v <= (1 << bits) - 1));
        }
    }

    fn dense_model(in_f: usize, out_f: usize, seed: u64) -> QuantizedModel {
        QuantizedModel::from_kinds(
            vec![in_f],
            &[LayerKind::Dense {
                in_features: in_f,
                out_features: out_f,
            }],
            QuantConfig {
                act_bits: 8,
                weight_bits: 4,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn dense_digital_matches_hand_matmul() {
        let mut m = dense_model(5, 3, 3);
        m.layers[0].act_clip = 1.5;
        m.layers[0].bias = vec![0.25, -0.5, 0.0];
        let mut s = RngStream::from_seed(8);
        let x = random_tensor(vec![4, 5], 0.0, 2.0, &mut s);
        let (y, _) = m.forward_digital(&x).unwrap();
        let (wq, sw) = quantize_weights(&m.layers[0].weights, 4).unwrap();
        let codes = quantize_acts(&x.data, 8, 1.5).unwrap();
        for n in 0..4 {
            for o in 0..3 {
                let z: i64 = (0..5).map(|k| wq[o * 5 + k] as i64 * codes[n * 5 + k] as i64).sum();
                let want = z as f64 * (sw * (1.5 / 255.0)) + m.layers[0].bias[o];
                assert_eq!(y.data[n * 3 + o], want);
            }
        }
    }

    #[test]
    fn batch_permutation_equivariance() {
        let m = QuantizedModel::desk_cnn(4, QuantConfig::default()).unwrap();
        let mut s = RngStream::from_seed(2);
        let x = random_tensor(vec![5, 1, 28, 28], 0.0, 1.0, &mut s);
        let (y, _) = m.forward_digital(&x).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let (yp, _) = m.forward_digital(&x.select(&perm)).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(yp.sample(i), y.sample(p));
        }
    }

    #[test]
    fn gradient_checks() {
        let conv = |stride, padding| LayerKind::Conv2d {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            stride,
            padding,
        };
        let cases: Vec<(LayerKind, Vec<usize>, f64)> = vec![
            (LayerKind::Dense { in_features: 7, out_features: 4 }, vec![7], 1e-4),
            (conv(2, 1), vec![2, 7, 6], 1e-4),
            (conv(1, 0), vec![2, 5, 5], 1e-4),
            (LayerKind::Relu, vec![3, 4, 4], 1e-6),
            (LayerKind::MaxPool { size: 2 }, vec![2, 6, 6], 1e-6),
            (LayerKind::AvgPool { size: 2 }, vec![2, 5, 4], 1e-6),
            (LayerKind::Flatten, vec![2, 3, 3], 1e-6),
        ];
        for (i, (kind, shape, tol)) in cases.into_iter().enumerate() {
            let err = gradient_check(kind, &shape, 1e-5, i as u64).unwrap();
            assert!(err < tol, "{kind:?}: {err}");
        }
    }

    #[test]
    fn confident_prediction_has_vanishing_gradient() {
        let mut m = dense_model(3, 2, 1);
        m.layers[0].weights = vec![0.0; 6];
        m.layers[0].bias = vec![60.0, -60.0];
        let x = Tensor::new(vec![2, 3], vec![0.3, 0.2, 0.1, 0.5, 0.6, 0.9]);
        let (logits, cache) = m.forward_float(&x).unwrap();
        let (loss, g) = m.backward(&cache, &logits, &[0, 0]).unwrap();
        assert!(loss < 1e-40);
        assert!(g.layers[0].weights.iter().all(|v| v.abs() < 1e-40));
    }

    #[test]
    fn ste_input_gradient_ignores_act_step() {
        let mut grads = Vec::new();
        for bits in [3, 8] {
            let mut m = dense_model(6, 4, 5);
            m.quant.act_bits = bits;
            m.layers[0].act_clip = 1.0;
            let x = Tensor::new(vec![1, 6], vec![0.1, 0.33, 0.5, 0.9, 0.0, 1.4]);
            let (_, cache) = m.forward_digital(&x).unwrap();
            let up = Tensor::new(vec![1, 4], vec![1.0, -2.0, 0.5, 0.25]);
            grads.push(m.backward_from_logits(&cache, &up, false).unwrap().input);
        }
        assert_eq!(grads[0], grads[1]);
        assert_eq!(grads[0].data[5], 0.0, "outside the clip window the gradient is zero");
        assert_ne!(grads[0].data[0], 0.0);
    }

    #[test]
    fn pinned_readout_reproduces_digital_logits() {
        let m = QuantizedModel::desk_cnn(9, QuantConfig::default()).unwrap();
        let qw = m.quant_weights().unwrap();
        let readout: Vec<ReadoutLayer> = m
            .weighted_indices()
            .iter()
            .zip(&qw)
            .map(|(&i, q)| {
                let (rows, cols) = m.layers[i].kind.weight_dims().unwrap();
                ReadoutLayer {
                    rows,
                    cols,
                    weight_bits: 2,
                    w_q: q.w_q.clone(),
                    scale: q.scale,
                    bias: m.layers[i].bias.clone(),
                    act_clip: m.layers[i].act_clip,
                }
            })
            .collect();
        let m1 = QuantizedModel::from_readout(&m, &readout).unwrap();
        let mut s = RngStream::from_seed(1);
        let x = random_tensor(vec![3, 1, 28, 28], 0.0, 1.0, &mut s);
        assert_eq!(m.forward_digital(&x).unwrap().0, m1.forward_digital(&x).unwrap().0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = QuantizedModel::desk_cnn(2, QuantConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let ck = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: m,
            final_learning_rate: 0.01,
            train_seed: 3,
        };
        save_checkpoint(&p, &ck).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), ck);
    }

    #[test]
    fn shape_errors() {
        let m = QuantizedModel::desk_cnn(2, QuantConfig::default()).unwrap();
        let x = Tensor::zeros(vec![1, 1, 27, 28]);
        assert!(matches!(m.forward_digital(&x), Err(Error::Shape(_))));
        let (logits, cache) = m.forward_float(&Tensor::zeros(vec![2, 1, 28, 28])).unwrap();
        assert!(m.backward(&cache, &logits, &[1]).is_err());
        let short = Cache {
            layers: cache.layers[..2].to_vec(),
            mode: Mode::Float,
        };
        assert!(matches!(m.backward(&short, &logits, &[1, 2]), Err(Error::State(_))));
    }

    fn toy_data(n: usize, seed: u64) -> Dataset {
        // Two classes separated by which half of a 4x4 image is bright.
        let mut s = RngStream::from_seed(seed);
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let label = (s.next_u64() & 1) as u8;
            for r in 0..4 {
                for _ in 0..4 {
                    let bright = (r < 2) == (label == 0);
                    let base = if bright { 150.0 } else { 30.0 };
                    pixels.push((base + 80.0 * s.uniform()) as u8);
                }
            }
            labels.push(label);
        }
        Dataset::from_parts(pixels, labels, [1, 4, 4], 2, crate::dataio::Split::Train).unwrap()
    }

    fn toy_model(seed: u64) -> QuantizedModel {
        QuantizedModel::from_kinds(
            vec![1, 4, 4],
            &[
                LayerKind::Conv2d {
                    in_channels: 1,
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerKind::Relu,
                LayerKind::AvgPool { size: 2 },
                LayerKind::Flatten,
                LayerKind::Dense {
                    in_features: 16,
                    out_features: 2,
                },
            ],
            QuantConfig {
                act_bits: 8,
                weight_bits: 4,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn baseline_training_is_deterministic_and_learns() {
        let data = toy_data(400, 1);
        let cfg = TrainConfig {
            warmup_epochs: 1,
            epochs: 2,
            batch_size: 20,
            learning_rate: 0.05,
            calibration_samples: 100,
            ..TrainConfig::default()
        };
        let mut a = toy_model(3);
        let ra = train_baseline(&mut a, &data, &cfg).unwrap();
        let mut b = toy_model(3);
        let rb = train_baseline(&mut b, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let first: f64 = ra.loss_history[..5].iter().sum();
        let last: f64 = ra.loss_history[ra.loss_history.len() - 5..].iter().sum();
        assert!(last < first);
        assert!(accuracy(&a, &data, 100).unwrap() > 95.0);
    }

    #[test]
    fn divergence_is_a_numeric_error() {
        let data = toy_data(100, 2);
        let cfg = TrainConfig {
            warmup_epochs: 1,
            epochs: 0,
            batch_size: 10,
            learning_rate: 1e300,
            momentum: 0.0,
            calibration_samples: 10,
            ..TrainConfig::default()
        };
        let mut m = toy_model(1);
        let r = train_baseline(&mut m, &data, &cfg);
        assert!(matches!(r, Err(Error::Numeric(_))), "{r:?}");
    }
}
