//! Chip instances: a seed plus converter configuration fixes every column
//! converter's static offsets; programmed weights can change, offsets never.
//!
//! Descriptor JSON (keys in this order):
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "chip_seed": 17,
//!   "rng_algorithm": "xoshiro256starstar/splitmix64/fnv1a64",
//!   "array": { "rows": 128, "cols": 128, "cell_bits": 2, "rows_per_access": 16,
//!              "allow_clipping": true,
//!              "adc": { "bits": 5, "psum_max": 48, "step_compression": 0.0 } },
//!   "pass_rate": { "p_low": 0.97, "p_high": 0.75, "shape_gamma": 1.5, "wl_param": 1.0 },
//!   "adc_kind": "sar",
//!   "sigma_scale": 1.0,
//!   "layers": [ { "rows": 8, "cols": 9, "weight_bits": 2 }, ... ]
//! }
//! ```
//!
//! `layers` is the weighted-layer footprint the chip was built for. The
//! converter of column `c` of sub-array `a` of layer `l` draws its offsets
//! from the stream labelled `adc/l/a/c` of `chip_seed`.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adcmodel::{sample_instance, sigma_profile, AdcInstance, AdcKind, AdcSpec, PassRateCurve, LEVEL_FRAC_BITS};
use crate::crossbar::{footprint, map_weights, ArrayConfig, CompiledLayer, MappedLayer};
use crate::error::{Error, Result};
use crate::nnquant::{Cache, Classifier, MacEngine, Mode, QuantWeights, QuantizedModel, ReadoutLayer, Tensor};
use crate::numstat::{derive_stream, ALGORITHM_ID};

pub const CHIP_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFootprint {
    /// Output features.
    pub rows: usize,
    /// Fan-in.
    pub cols: usize,
    pub weight_bits: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipDescriptor {
    pub format_version: u32,
    pub chip_seed: u64,
    pub rng_algorithm: String,
    pub array: ArrayConfig,
    pub pass_rate: PassRateCurve,
    pub adc_kind: AdcKind,
    /// Multiplies every offset sigma; 0 builds an offset-free chip.
    pub sigma_scale: f64,
    pub layers: Vec<LayerFootprint>,
}

impl ChipDescriptor {
    /// Descriptor sized for `model`'s weighted layers.
    pub fn for_model(
        model: &QuantizedModel,
        chip_seed: u64,
        array: ArrayConfig,
        pass_rate: PassRateCurve,
        adc_kind: AdcKind,
        sigma_scale: f64,
    ) -> Self {
        ChipDescriptor {
            format_version: CHIP_FORMAT_VERSION,
            chip_seed,
            rng_algorithm: ALGORITHM_ID.to_string(),
            array,
            pass_rate,
            adc_kind,
            sigma_scale,
            layers: model
                .weight_dims()
                .into_iter()
                .map(|(rows, cols)| LayerFootprint {
                    rows,
                    cols,
                    weight_bits: model.quant.weight_bits,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CHIP_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "chip format_version {} is not {CHIP_FORMAT_VERSION}",
                self.format_version
            )));
        }
        if self.rng_algorithm != ALGORITHM_ID {
            return Err(Error::Config(format!(
                "chip was described with rng '{}', this build provides '{ALGORITHM_ID}'",
                self.rng_algorithm
            )));
        }
        if !(self.sigma_scale >= 0.0 && self.sigma_scale.is_finite()) {
            return Err(Error::Config("sigma_scale must be finite and non-negative".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("chip descriptor has no layers".into()));
        }
        self.array.validate()?;
        self.pass_rate.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: ChipDescriptor = serde_json::from_str(text)?;
        d.validate()?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone)]
struct Programmed {
    model: QuantizedModel,
    weights: Vec<QuantWeights>,
    mapped: Vec<MappedLayer>,
    compiled: Vec<CompiledLayer>,
}

#[derive(Debug, Clone)]
pub struct ChipInstance {
    descriptor: ChipDescriptor,
    spec: Arc<AdcSpec>,
    /// `adcs[layer][array][column]`
    adcs: Vec<Vec<Vec<AdcInstance>>>,
    programmed: Option<Programmed>,
}

/// Builds a chip: every converter draws its static offsets from its own
/// labelled stream, so the table does not depend on construction order.
pub fn make_chip(descriptor: &ChipDescriptor) -> Result<ChipInstance> {
    descriptor.validate()?;
    let spec = Arc::new(descriptor.array.adc_spec()?);
    let profile = sigma_profile(&descriptor.pass_rate, &spec)?.scaled(descriptor.sigma_scale);
    let mut adcs = Vec::with_capacity(descriptor.layers.len());
    for (l, fp) in descriptor.layers.iter().enumerate() {
        let n_arrays = footprint(fp.rows, fp.cols, &descriptor.array, fp.weight_bits)?;
        let mut arrays = Vec::with_capacity(n_arrays);
        for a in 0..n_arrays {
            let cols = (0..descriptor.array.cols)
                .map(|c| {
                    let mut s = derive_stream(descriptor.chip_seed, format!("adc/{l}/{a}/{c}").as_bytes());
                    sample_instance(spec.clone(), &profile, descriptor.adc_kind, &mut s)
                })
                .collect::<Result<Vec<_>>>()?;
            arrays.push(cols);
        }
        adcs.push(arrays);
    }
    Ok(ChipInstance {
        descriptor: descriptor.clone(),
        spec,
        adcs,
        programmed: None,
    })
}

impl ChipInstance {
    pub fn descriptor(&self) -> &ChipDescriptor {
        &self.descriptor
    }

    pub fn adc_spec(&self) -> &AdcSpec {
        &self.spec
    }

    /// `adcs[layer][array][column]`
    pub fn adcs(&self) -> &[Vec<Vec<AdcInstance>>] {
        &self.adcs
    }

    pub fn is_programmed(&self) -> bool {
        self.programmed.is_some()
    }

    /// SHA-256 over every converter's offsets in table order.
    pub fn offset_hash(&self) -> String {
        let mut h = Sha256::new();
        for layer in &self.adcs {
            for arr in layer {
                for adc in arr {
                    for o in adc.offsets() {
                        h.update(o.to_bits().to_le_bytes());
                    }
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Quantizes `model`'s weights, maps them onto the sub-arrays and keeps
    /// a snapshot of the model for the digital periphery.
    pub fn program(&mut self, model: &QuantizedModel) -> Result<()> {
        let dims = model.weight_dims();
        if dims.len() != self.descriptor.layers.len() {
            return Err(Error::Mapping(format!(
                "model has {} weighted layers, chip was built for {}",
                dims.len(),
                self.descriptor.layers.len()
            )));
        }
        for (l, ((rows, cols), fp)) in dims.iter().zip(&self.descriptor.layers).enumerate() {
            if (*rows, *cols, model.quant.weight_bits) != (fp.rows, fp.cols, fp.weight_bits) {
                return Err(Error::Mapping(format!(
                    "layer {l} is {rows}x{cols} at {} bits, chip slot is {}x{} at {} bits",
                    model.quant.weight_bits, fp.rows, fp.cols, fp.weight_bits
                )));
            }
        }
        let weights = model.quant_weights()?;
        let max_psum = self.descriptor.array.max_psum();
        let mut mapped = Vec::with_capacity(dims.len());
        let mut compiled = Vec::with_capacity(dims.len());
        for (l, (q, (rows, cols))) in weights.iter().zip(&dims).enumerate() {
            let mut m = map_weights(&q.w_q, *rows, *cols, &self.descriptor.array, model.quant.weight_bits)?;
            m.dequant_scale = q.scale;
            compiled.push(CompiledLayer::new(&m, Some((&self.spec, &self.adcs[l])), max_psum)?);
            mapped.push(m);
        }
        self.programmed = Some(Programmed {
            model: model.clone(),
            weights,
            mapped,
            compiled,
        });
        Ok(())
    }

    /// The programmed integer weights, scales, biases and clips. Nothing
    /// about the converter offsets is exposed.
    pub fn readout(&self) -> Result<Vec<ReadoutLayer>> {
        let p = self.programmed()?;
        Ok(p
            .model
            .weighted_indices()
            .iter()
            .zip(&p.weights)
            .map(|(&i, q)| {
                let layer = &p.model.layers[i];
                let (rows, cols) = layer.kind.weight_dims().expect("weighted layer");
                ReadoutLayer {
                    rows,
                    cols,
                    weight_bits: p.model.quant.weight_bits,
                    w_q: q.w_q.clone(),
                    scale: q.scale,
                    bias: layer.bias.clone(),
                    act_clip: layer.act_clip,
                }
            })
            .collect())
    }

    /// The mapped sub-arrays of every programmed layer.
    pub fn mapped_layers(&self) -> Result<&[MappedLayer]> {
        Ok(&self.programmed()?.mapped)
    }

    /// The model snapshot taken by the last [`ChipInstance::program`].
    pub fn programmed_model(&self) -> Result<&QuantizedModel> {
        Ok(&self.programmed()?.model)
    }

    fn programmed(&self) -> Result<&Programmed> {
        self.programmed
            .as_ref()
            .ok_or_else(|| Error::State("chip has not been programmed".into()))
    }

    /// Whole-network forward: conv/dense layers run on the crossbars with
    /// the static offsets, everything else digitally. The cache holds the
    /// distorted activations for a software backward pass.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        let p = self.programmed()?;
        let engine = ChipEngine {
            compiled: &p.compiled,
            act_bits: p.model.quant.act_bits,
        };
        p.model.forward_with(x, Mode::Quantized, Some((&p.weights, &engine)))
    }
}

/// Free-function form of [`ChipInstance::forward`].
pub fn chip_forward(chip: &ChipInstance, x: &Tensor) -> Result<(Tensor, Cache)> {
    chip.forward(x)
}

impl Classifier for ChipInstance {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.0)
    }
}

struct ChipEngine<'a> {
    compiled: &'a [CompiledLayer],
    act_bits: u32,
}

impl MacEngine for ChipEngine<'_> {
    fn products(&self, li: usize, codes: &[f64], n_vec: usize, out: &mut [f64]) -> Result<()> {
        let layer = &self.compiled[li];
        let (k, o) = (layer.in_features(), layer.out_features());
        let unit = (1u64 << LEVEL_FRAC_BITS) as f64;
        let mut xu = vec![0u32; k];
        let mut acc = vec![0i64; o];
        for v in 0..n_vec {
            for (dst, src) in xu.iter_mut().zip(&codes[v * k..(v + 1) * k]) {
                *dst = *src as u32;
            }
            layer.run(&xu, self.act_bits, &mut acc);
            for (dst, a) in out[v * o..(v + 1) * o].iter_mut().zip(&acc) {
                *dst = *a as f64 / unit;
            }
        }
        Ok(())
    }
}
