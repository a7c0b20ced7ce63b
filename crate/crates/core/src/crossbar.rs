//! Weight mapping onto bit-sliced sub-arrays, bit-serial vector-matrix
//! products with per-column conversion, and shift-add reassembly.
//!
//! Signed weights are stored as `u = w + 2^(weight_bits-1)` and split into
//! `cell_bits`-wide slices, one physical column per slice. Physical column
//! `o * n_slices + s` holds slice `s` of output `o`. The shift is removed
//! digitally: for every access the periphery also counts the active input
//! rows, and `shift * count * 2^bit` is subtracted from each output of that
//! sub-array.
//!
//! Reassembled outputs are fixed-point integers in units of
//! `2^-LEVEL_FRAC_BITS` partial-sum counts.

use serde::{Deserialize, Serialize};

use crate::adcmodel::{AdcInstance, AdcParams, AdcSpec, LEVEL_FRAC_BITS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub rows: usize,
    pub cols: usize,
    pub cell_bits: u32,
    pub rows_per_access: usize,
    /// Permit partial sums above the converter's `psum_max` (they saturate).
    #[serde(default)]
    pub allow_clipping: bool,
    pub adc: AdcParams,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        ArrayConfig {
            rows: 128,
            cols: 128,
            cell_bits: 2,
            rows_per_access: 16,
            allow_clipping: true,
            adc: AdcParams {
                bits: 5,
                psum_max: 48,
                step_compression: 0.0,
            },
        }
    }
}

impl ArrayConfig {
    /// 5-bit converters whose 32 levels sit on the integer partial sums
    /// 0..=31, with 10 rows per access so no partial sum exceeds 30. An
    /// offset-free chip on this array is lossless, and a pass rate is the
    /// probability of resolving an exact count against its nearest
    /// threshold.
    pub fn integer_grid() -> Self {
        ArrayConfig {
            rows_per_access: 10,
            allow_clipping: false,
            adc: AdcParams {
                bits: 5,
                psum_max: 31,
                step_compression: 0.0,
            },
            ..ArrayConfig::default()
        }
    }

    /// Largest partial sum one access can produce.
    pub fn max_psum(&self) -> u32 {
        self.rows_per_access as u32 * ((1u32 << self.cell_bits) - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.rows_per_access == 0 {
            return Err(Error::Config("array dimensions must be positive".into()));
        }
        if self.rows_per_access > self.rows {
            return Err(Error::Config(format!(
                "rows_per_access {} exceeds rows {}",
                self.rows_per_access, self.rows
            )));
        }
        if !(1..=8).contains(&self.cell_bits) {
            return Err(Error::Config("cell_bits must be in 1..=8".into()));
        }
        if self.adc.psum_max < self.max_psum() && !self.allow_clipping {
            return Err(Error::Config(format!(
                "psum_max {} below the largest partial sum {} and clipping is disabled",
                self.adc.psum_max,
                self.max_psum()
            )));
        }
        Ok(())
    }

    pub fn adc_spec(&self) -> Result<AdcSpec> {
        self.validate()?;
        AdcSpec::new(self.adc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubArray {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Row-major `n_rows x n_cols` cell values in `[0, 2^cell_bits)`.
    pub cells: Vec<u8>,
    pub slice_significance: Vec<u32>,
    /// Output feature fed by each column.
    pub column_output: Vec<usize>,
    pub row_block: usize,
    pub col_block: usize,
    /// Input feature index of the first row.
    pub row_offset: usize,
    pub rows_per_access: usize,
}

impl SubArray {
    pub fn n_groups(&self) -> usize {
        self.n_rows.div_ceil(self.rows_per_access)
    }

    pub fn group_rows(&self, group: usize) -> std::ops::Range<usize> {
        let start = group * self.rows_per_access;
        start..(start + self.rows_per_access).min(self.n_rows)
    }

    pub fn cell(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.n_cols + col]
    }

    /// Exact column dot products of one access group with a binary input.
    pub fn vmm_exact(&self, group: usize, input_bits: &[u8]) -> Result<Vec<u32>> {
        let rows = self.group_rows(group);
        if input_bits.len() != rows.len() {
            return Err(Error::Shape(format!(
                "{} input bits for an access group of {} rows",
                input_bits.len(),
                rows.len()
            )));
        }
        let mut out = vec![0u32; self.n_cols];
        for (r, &bit) in rows.zip(input_bits) {
            if bit != 0 {
                let row = &self.cells[r * self.n_cols..(r + 1) * self.n_cols];
                for (o, &c) in out.iter_mut().zip(row) {
                    *o += c as u32;
                }
            }
        }
        Ok(out)
    }

    /// Column partial sums passed through one converter per column.
    pub fn vmm_chip(&self, group: usize, input_bits: &[u8], adcs: &[AdcInstance]) -> Result<Vec<u32>> {
        if adcs.len() != self.n_cols {
            return Err(Error::Shape(format!(
                "{} converters for {} columns",
                adcs.len(),
                self.n_cols
            )));
        }
        Ok(self
            .vmm_exact(group, input_bits)?
            .into_iter()
            .zip(adcs)
            .map(|(p, adc)| adc.convert(p as f64))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappedLayer {
    pub sub_arrays: Vec<SubArray>,
    pub in_features: usize,
    pub out_features: usize,
    pub weight_bits: u32,
    pub cell_bits: u32,
    pub n_slices: usize,
    pub row_blocks: usize,
    pub col_blocks: usize,
    /// `2^(weight_bits-1)`, removed digitally after accumulation.
    pub shift: i64,
    pub dequant_scale: f64,
}

/// Sub-array count a layer of this shape occupies.
pub fn footprint(out_features: usize, in_features: usize, cfg: &ArrayConfig, weight_bits: u32) -> Result<usize> {
    let (rb, cb, _) = blocks(out_features, in_features, cfg, weight_bits)?;
    Ok(rb * cb)
}

fn blocks(out_features: usize, in_features: usize, cfg: &ArrayConfig, weight_bits: u32) -> Result<(usize, usize, usize)> {
    cfg.validate()?;
    if weight_bits < 2 || weight_bits > 16 {
        return Err(Error::Mapping(format!("weight_bits {weight_bits} outside 2..=16")));
    }
    let n_slices = weight_bits.div_ceil(cfg.cell_bits) as usize;
    let outs_per_block = cfg.cols / n_slices;
    if outs_per_block == 0 {
        return Err(Error::Mapping(format!(
            "{n_slices} slices do not fit in {} columns",
            cfg.cols
        )));
    }
    Ok((
        in_features.div_ceil(cfg.rows),
        out_features.div_ceil(outs_per_block),
        outs_per_block,
    ))
}

/// Maps a row-major `out_features x in_features` signed weight matrix.
pub fn map_weights(
    w_q: &[i32],
    out_features: usize,
    in_features: usize,
    cfg: &ArrayConfig,
    weight_bits: u32,
) -> Result<MappedLayer> {
    if w_q.len() != out_features * in_features || out_features == 0 || in_features == 0 {
        return Err(Error::Mapping(format!(
            "{} weights for a {out_features}x{in_features} layer",
            w_q.len()
        )));
    }
    let (row_blocks, col_blocks, outs_per_block) = blocks(out_features, in_features, cfg, weight_bits)?;
    let n_slices = weight_bits.div_ceil(cfg.cell_bits) as usize;
    let shift = 1i64 << (weight_bits - 1);
    let (lo, hi) = (-shift, shift - 1);
    if let Some(bad) = w_q.iter().find(|w| (**w as i64) < lo || (**w as i64) > hi) {
        return Err(Error::Mapping(format!(
            "weight {bad} outside the {weight_bits}-bit signed range [{lo}, {hi}]"
        )));
    }
    let cell_mask = (1u32 << cfg.cell_bits) - 1;

    let mut sub_arrays = Vec::with_capacity(row_blocks * col_blocks);
    for rb in 0..row_blocks {
        let row_offset = rb * cfg.rows;
        let n_rows = cfg.rows.min(in_features - row_offset);
        for cb in 0..col_blocks {
            let o_start = cb * outs_per_block;
            let o_end = (o_start + outs_per_block).min(out_features);
            let n_cols = (o_end - o_start) * n_slices;
            let mut cells = vec![0u8; n_rows * n_cols];
            let mut slice_significance = Vec::with_capacity(n_cols);
            let mut column_output = Vec::with_capacity(n_cols);
            for o in o_start..o_end {
                for s in 0..n_slices {
                    slice_significance.push(1u32 << (cfg.cell_bits as usize * s));
                    column_output.push(o);
                }
            }
            for r in 0..n_rows {
                let i = row_offset + r;
                for o in o_start..o_end {
                    let u = (w_q[o * in_features + i] as i64 + shift) as u32;
                    for s in 0..n_slices {
                        let col = (o - o_start) * n_slices + s;
                        cells[r * n_cols + col] = ((u >> (cfg.cell_bits as usize * s)) & cell_mask) as u8;
                    }
                }
            }
            sub_arrays.push(SubArray {
                n_rows,
                n_cols,
                cells,
                slice_significance,
                column_output,
                row_block: rb,
                col_block: cb,
                row_offset,
                rows_per_access: cfg.rows_per_access,
            });
        }
    }
    Ok(MappedLayer {
        sub_arrays,
        in_features,
        out_features,
        weight_bits,
        cell_bits: cfg.cell_bits,
        n_slices,
        row_blocks,
        col_blocks,
        shift,
        dequant_scale: 1.0,
    })
}

impl MappedLayer {
    /// Signed weights recovered from the cells by undoing slicing and shift.
    pub fn reassembled_weights(&self) -> Vec<i32> {
        let mut w = vec![0i64; self.out_features * self.in_features];
        for sa in &self.sub_arrays {
            for r in 0..sa.n_rows {
                for c in 0..sa.n_cols {
                    let o = sa.column_output[c];
                    w[o * self.in_features + sa.row_offset + r] +=
                        sa.cell(r, c) as i64 * sa.slice_significance[c] as i64;
                }
            }
        }
        w.into_iter().map(|u| (u - self.shift) as i32).collect()
    }
}

/// Codes of one `(sub-array, access group, input bit)` access.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialTerm {
    pub array: usize,
    pub group: usize,
    pub bit: u32,
    pub codes: Vec<u32>,
    /// Active input rows in this access (drives the shift correction).
    pub active: u32,
}

/// Runs every access of a layer for one input vector. `adcs[a][c]` converts
/// column `c` of sub-array `a`; `None` keeps the exact partial sums.
pub fn collect_terms(
    layer: &MappedLayer,
    x: &[u32],
    input_bits: u32,
    adcs: Option<&[Vec<AdcInstance>]>,
) -> Result<Vec<PartialTerm>> {
    if x.len() != layer.in_features {
        return Err(Error::Shape(format!(
            "input of length {} for {} features",
            x.len(),
            layer.in_features
        )));
    }
    let mut terms = Vec::new();
    for (a, sa) in layer.sub_arrays.iter().enumerate() {
        for g in 0..sa.n_groups() {
            let rows = sa.group_rows(g);
            for bit in 0..input_bits {
                let bits: Vec<u8> = rows
                    .clone()
                    .map(|r| ((x[sa.row_offset + r] >> bit) & 1) as u8)
                    .collect();
                let codes = match adcs {
                    Some(adcs) => sa.vmm_chip(g, &bits, &adcs[a])?,
                    None => sa.vmm_exact(g, &bits)?,
                };
                terms.push(PartialTerm {
                    array: a,
                    group: g,
                    bit,
                    codes,
                    active: bits.iter().map(|b| *b as u32).sum(),
                });
            }
        }
    }
    Ok(terms)
}

/// Shift-add reassembly in fixed order (sub-array, group, bit). With `spec`
/// codes are mapped to the converter's reconstruction levels; without it
/// they are taken as exact partial sums.
pub fn accumulate(
    terms: &[PartialTerm],
    layer: &MappedLayer,
    spec: Option<&AdcSpec>,
    input_bits: u32,
) -> Result<Vec<i64>> {
    let mut seen = std::collections::BTreeMap::new();
    for (i, t) in terms.iter().enumerate() {
        if seen.insert((t.array, t.group, t.bit), i).is_some() {
            return Err(Error::IncompleteAccumulation(format!(
                "duplicate term (array {}, group {}, bit {})",
                t.array, t.group, t.bit
            )));
        }
    }
    let expected: usize = layer.sub_arrays.iter().map(|s| s.n_groups()).sum::<usize>() * input_bits as usize;
    for (a, sa) in layer.sub_arrays.iter().enumerate() {
        for g in 0..sa.n_groups() {
            for bit in 0..input_bits {
                if !seen.contains_key(&(a, g, bit)) {
                    return Err(Error::IncompleteAccumulation(format!(
                        "missing term (array {a}, group {g}, bit {bit})"
                    )));
                }
            }
        }
    }
    if seen.len() != expected {
        return Err(Error::IncompleteAccumulation(format!(
            "{} terms, expected {expected}",
            seen.len()
        )));
    }

    let frac = LEVEL_FRAC_BITS;
    let mut out = vec![0i64; layer.out_features];
    for &i in seen.values() {
        let t = &terms[i];
        let sa = &layer.sub_arrays[t.array];
        if t.codes.len() != sa.n_cols {
            return Err(Error::Shape(format!(
                "term has {} codes for {} columns",
                t.codes.len(),
                sa.n_cols
            )));
        }
        for (c, &code) in t.codes.iter().enumerate() {
            let level = match spec {
                Some(s) => *s.levels_fixed().get(code as usize).ok_or_else(|| {
                    Error::Shape(format!("code {code} beyond the converter range"))
                })?,
                None => (code as i64) << frac,
            };
            out[sa.column_output[c]] += (level * sa.slice_significance[c] as i64) << t.bit;
        }
        let correction = (layer.shift * t.active as i64) << (t.bit + frac);
        let mut last = usize::MAX;
        for &o in &sa.column_output {
            if o != last {
                out[o] -= correction;
                last = o;
            }
        }
    }
    Ok(out)
}

/// Precomputed execution form of a mapped layer: 8-row partial-sum tables
/// per access group and, for a chip, a code table per column converter.
#[derive(Debug, Clone)]
pub struct CompiledLayer {
    arrays: Vec<CompiledArray>,
    in_features: usize,
    out_features: usize,
    shift: i64,
}

fn spec_levels(adcs: Option<(&AdcSpec, &[Vec<AdcInstance>])>) -> Vec<i64> {
    adcs.map(|(spec, _)| spec.levels_fixed().to_vec()).unwrap_or_default()
}

#[derive(Debug, Clone)]
struct CompiledArray {
    row_offset: usize,
    n_cols: usize,
    significance: Vec<i64>,
    column_output: Vec<usize>,
    outputs: Vec<usize>,
    groups: Vec<CompiledGroup>,
    /// Fixed-point reconstruction level per column and partial sum,
    /// `level_table[c * stride + psum]`, present on a chip.
    level_table: Option<Vec<i64>>,
    stride: usize,
}

#[derive(Debug, Clone)]
struct CompiledGroup {
    first_row: usize,
    n_rows: usize,
    /// `tables[chunk][mask * n_cols + col]`: partial sum of up to 8 rows.
    tables: Vec<Vec<u16>>,
}

impl CompiledLayer {
    /// `adcs[a][c]` as in [`collect_terms`]; `None` is the exact path.
    pub fn new(layer: &MappedLayer, adcs: Option<(&AdcSpec, &[Vec<AdcInstance>])>, max_psum: u32) -> Result<Self> {
        let mut arrays = Vec::with_capacity(layer.sub_arrays.len());
        for (a, sa) in layer.sub_arrays.iter().enumerate() {
            let mut groups = Vec::with_capacity(sa.n_groups());
            for g in 0..sa.n_groups() {
                let rows = sa.group_rows(g);
                let n_rows = rows.len();
                let chunks = n_rows.div_ceil(8);
                let mut tables = Vec::with_capacity(chunks);
                for ch in 0..chunks {
                    let base = rows.start + ch * 8;
                    let width = 8.min(n_rows - ch * 8);
                    let mut t = vec![0u16; 256 * sa.n_cols];
                    for mask in 0..(1usize << width) {
                        for i in 0..width {
                            if mask & (1 << i) != 0 {
                                for c in 0..sa.n_cols {
                                    t[mask * sa.n_cols + c] += sa.cell(base + i, c) as u16;
                                }
                            }
                        }
                    }
                    tables.push(t);
                }
                groups.push(CompiledGroup {
                    first_row: rows.start,
                    n_rows,
                    tables,
                });
            }
            let code_tables = match adcs {
                Some((_, per_array)) => {
                    let cols = per_array.get(a).ok_or_else(|| {
                        Error::Shape(format!("no converters for sub-array {a}"))
                    })?;
                    if cols.len() < sa.n_cols {
                        return Err(Error::Shape(format!(
                            "{} converters for {} columns",
                            cols.len(),
                            sa.n_cols
                        )));
                    }
                    let levels = spec_levels(adcs);
                    let mut t = Vec::with_capacity(sa.n_cols * (max_psum as usize + 1));
                    for adc in &cols[..sa.n_cols] {
                        t.extend(adc.code_table(max_psum).iter().map(|code| levels[*code as usize]));
                    }
                    Some(t)
                }
                None => None,
            };
            let mut outputs = sa.column_output.clone();
            outputs.dedup();
            arrays.push(CompiledArray {
                row_offset: sa.row_offset,
                n_cols: sa.n_cols,
                significance: sa.slice_significance.iter().map(|s| *s as i64).collect(),
                column_output: sa.column_output.clone(),
                outputs,
                groups,
                level_table: code_tables,
                stride: max_psum as usize + 1,
            });
        }
        Ok(CompiledLayer {
            arrays,
            in_features: layer.in_features,
            out_features: layer.out_features,
            shift: layer.shift,
        })
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    /// Same result as `accumulate(collect_terms(..))` for one input vector.
    ///
    /// Accesses with no active row produce a partial sum of 0 on every
    /// column, so their codes depend only on the column converter; they are
    /// counted and added once per column at the end.
    pub fn run(&self, x: &[u32], input_bits: u32, out: &mut [i64]) {
        debug_assert_eq!(x.len(), self.in_features);
        out.iter_mut().for_each(|o| *o = 0);
        let frac = LEVEL_FRAC_BITS;
        let all_bits = (1i64 << input_bits) - 1;
        let mut col_acc: Vec<i64> = Vec::new();
        let mut psum: Vec<u32> = Vec::new();
        let mut planes: Vec<[u8; 32]> = Vec::new();
        for arr in &self.arrays {
            col_acc.clear();
            col_acc.resize(arr.n_cols, 0);
            psum.resize(arr.n_cols, 0);
            let mut active_acc = 0i64;
            let mut idle_weight = 0i64;
            for grp in &arr.groups {
                let chunks = grp.tables.len();
                let start = arr.row_offset + grp.first_row;
                let rows = &x[start..start + grp.n_rows];
                if rows.iter().all(|v| *v == 0) {
                    idle_weight += all_bits;
                    continue;
                }
                // planes[ch][bit]: bit-plane mask of chunk `ch`.
                planes.clear();
                for ch in 0..chunks {
                    let mut p = [0u8; 32];
                    for (i, v) in rows[ch * 8..(ch * 8 + 8).min(grp.n_rows)].iter().enumerate() {
                        let mut v = *v;
                        let mut bit = 0;
                        while v != 0 {
                            p[bit] |= ((v & 1) as u8) << i;
                            v >>= 1;
                            bit += 1;
                        }
                    }
                    planes.push(p);
                }
                for bit in 0..input_bits as usize {
                    let active: u32 = planes.iter().map(|p| p[bit].count_ones()).sum();
                    if active == 0 {
                        idle_weight += 1 << bit;
                        continue;
                    }
                    active_acc += (active as i64) << bit;
                    psum.iter_mut().for_each(|p| *p = 0);
                    for (ch, p) in planes.iter().enumerate() {
                        let m = p[bit] as usize;
                        if m == 0 {
                            continue;
                        }
                        let row = &grp.tables[ch][m * arr.n_cols..(m + 1) * arr.n_cols];
                        for (acc, v) in psum.iter_mut().zip(row) {
                            *acc += *v as u32;
                        }
                    }
                    match &arr.level_table {
                        Some(lt) => {
                            let top = arr.stride - 1;
                            for (c, (acc, p)) in col_acc.iter_mut().zip(&psum).enumerate() {
                                *acc += lt[c * arr.stride + (*p as usize).min(top)] << bit;
                            }
                        }
                        _ => {
                            for c in 0..arr.n_cols {
                                col_acc[c] += ((psum[c] as i64) << frac) << bit;
                            }
                        }
                    }
                }
            }
            if idle_weight != 0 {
                if let Some(lt) = &arr.level_table {
                    for (c, acc) in col_acc.iter_mut().enumerate() {
                        *acc += lt[c * arr.stride] * idle_weight;
                    }
                }
            }
            for c in 0..arr.n_cols {
                out[arr.column_output[c]] += col_acc[c] * arr.significance[c];
            }
            let correction = (self.shift * active_acc) << frac;
            for &o in &arr.outputs {
                out[o] -= correction;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::adcmodel::{sample_instance, sigma_profile, AdcKind, PassRateCurve};
    use crate::numstat::{derive_stream, RngStream};

    fn lossless_cfg() -> ArrayConfig {
        ArrayConfig {
            rows: 32,
            cols: 16,
            cell_bits: 2,
            rows_per_access: 8,
            allow_clipping: false,
            adc: AdcParams {
                bits: 5,
                psum_max: 31,
                step_compression: 0.0,
            },
        }
    }

    fn random_weights(rng: &mut RngStream, n: usize, bits: u32) -> Vec<i32> {
        let q = (1i64 << (bits - 1)) - 1;
        (0..n).map(|_| (rng.below((2 * q + 1) as u64) as i64 - q) as i32).collect()
    }

    fn random_inputs(rng: &mut RngStream, n: usize, bits: u32) -> Vec<u32> {
        (0..n).map(|_| rng.below(1 << bits) as u32).collect()
    }

    fn reference(w: &[i32], x: &[u32], out: usize, inp: usize) -> Vec<i64> {
        (0..out)
            .map(|o| (0..inp).map(|i| w[o * inp + i] as i64 * x[i] as i64).sum())
            .collect()
    }

    #[test]
    fn slice_digits() {
        let cfg = ArrayConfig { cols: 4, ..lossless_cfg() };
        // w = 5 with 4-bit weights: u = 13 = 3*4 + 1.
        let m = map_weights(&[5], 1, 1, &cfg, 4).unwrap();
        let sa = &m.sub_arrays[0];
        assert_eq!(sa.cells, vec![1, 3]);
        assert_eq!(sa.slice_significance, vec![1, 4]);

        let m = map_weights(&[1], 1, 1, &cfg, 2).unwrap();
        assert_eq!(m.sub_arrays[0].cells, vec![3]);
        assert_eq!(m.shift, 2);
    }

    #[test]
    fn mapping_errors() {
        let cfg = lossless_cfg();
        assert!(matches!(map_weights(&[2], 1, 1, &cfg, 2), Err(Error::Mapping(_))));
        assert!(matches!(map_weights(&[0, 1], 1, 1, &cfg, 2), Err(Error::Mapping(_))));
        let narrow = ArrayConfig { cols: 1, ..cfg };
        assert!(map_weights(&[1], 1, 1, &narrow, 8).is_err());
    }

    #[test]
    fn reassembly_round_trip() {
        let mut rng = RngStream::from_seed(8);
        for bits in [2, 3, 4, 8] {
            let w = random_weights(&mut rng, 64, bits);
            let m = map_weights(&w, 8, 8, &lossless_cfg(), bits).unwrap();
            assert_eq!(m.reassembled_weights(), w);
        }
    }

    #[test]
    fn exact_vmm() {
        let cfg = ArrayConfig { cols: 1, ..lossless_cfg() };
        // Cells [2, 3, 1] from w = u - 2 with 2-bit weights.
        let m = map_weights(&[0, 1, -1], 1, 3, &cfg, 2).unwrap();
        let sa = &m.sub_arrays[0];
        assert_eq!(sa.vmm_exact(0, &[0, 0, 0]).unwrap(), vec![0]);
        assert_eq!(sa.vmm_exact(0, &[1, 0, 1]).unwrap(), vec![3]);
        assert!(sa.vmm_exact(0, &[1, 0]).is_err());

        let mut rng = RngStream::from_seed(3);
        let cfg = ArrayConfig { rows: 32, cols: 16, rows_per_access: 32, allow_clipping: true, ..lossless_cfg() };
        let w = random_weights(&mut rng, 16 * 32, 2);
        let m = map_weights(&w, 16, 32, &cfg, 2).unwrap();
        let sa = &m.sub_arrays[0];
        let bits: Vec<u8> = (0..32).map(|_| rng.below(2) as u8).collect();
        let got = sa.vmm_exact(0, &bits).unwrap();
        for o in 0..16 {
            let want: u32 = (0..32).map(|i| bits[i] as u32 * (w[o * 32 + i] + 2) as u32).sum();
            assert_eq!(got[o], want);
        }
    }

    #[test]
    fn chip_vmm_saturates_and_repeats() {
        let spec = Arc::new(AdcSpec::uniform(5, 31).unwrap());
        let cfg = ArrayConfig {
            rows: 16,
            cols: 1,
            rows_per_access: 16,
            allow_clipping: true,
            ..lossless_cfg()
        };
        // u = 3 on 16 rows: 14 active rows give a true partial sum of 42.
        let m = map_weights(&[1; 16], 1, 16, &cfg, 2).unwrap();
        let sa = &m.sub_arrays[0];
        let adcs = vec![AdcInstance::ideal(spec.clone(), AdcKind::Flash)];
        let mut bits = vec![1u8; 14];
        bits.extend([0, 0]);
        assert_eq!(sa.vmm_exact(0, &bits).unwrap(), vec![42]);
        assert_eq!(sa.vmm_chip(0, &bits, &adcs).unwrap(), vec![31]);
        let bits = [1u8, 1, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        assert_eq!(sa.vmm_chip(0, &bits, &adcs).unwrap(), vec![9]);
        assert!(sa.vmm_chip(0, &bits, &[]).is_err());

        let prof = sigma_profile(&PassRateCurve::new(0.9, 0.7, 1.0, 1.0).unwrap(), &spec).unwrap();
        let noisy = vec![sample_instance(spec, &prof, AdcKind::Sar, &mut derive_stream(1, b"c")).unwrap()];
        assert_eq!(
            sa.vmm_chip(0, &bits, &noisy).unwrap(),
            sa.vmm_chip(0, &bits, &noisy).unwrap()
        );
    }

    #[test]
    fn accumulate_single_term() {
        let cfg = ArrayConfig { cols: 1, ..lossless_cfg() };
        let m = map_weights(&[1], 1, 1, &cfg, 2).unwrap();
        let terms = vec![PartialTerm {
            array: 0,
            group: 0,
            bit: 0,
            codes: vec![3],
            active: 1,
        }];
        let out = accumulate(&terms, &m, None, 1).unwrap();
        assert_eq!(out, vec![(3 - 2) << LEVEL_FRAC_BITS]);
        assert!(matches!(
            accumulate(&terms, &m, None, 2),
            Err(Error::IncompleteAccumulation(_))
        ));
        let dup = vec![terms[0].clone(), terms[0].clone()];
        assert!(accumulate(&dup, &m, None, 1).is_err());
    }

    #[test]
    fn exact_accumulation_matches_integer_layer() {
        let mut rng = RngStream::from_seed(21);
        let cfg = lossless_cfg();
        for _ in 0..20 {
            let (out_f, in_f) = (1 + rng.below(20) as usize, 1 + rng.below(80) as usize);
            let w = random_weights(&mut rng, out_f * in_f, 2);
            let x = random_inputs(&mut rng, in_f, 8);
            let m = map_weights(&w, out_f, in_f, &cfg, 2).unwrap();
            let mut terms = collect_terms(&m, &x, 8, None).unwrap();
            let want: Vec<i64> = reference(&w, &x, out_f, in_f).iter().map(|v| v << LEVEL_FRAC_BITS).collect();
            assert_eq!(accumulate(&terms, &m, None, 8).unwrap(), want);
            rng.shuffle(&mut terms);
            assert_eq!(accumulate(&terms, &m, None, 8).unwrap(), want);
        }
    }

    #[test]
    fn lossless_chip_path_is_exact() {
        let mut rng = RngStream::from_seed(5);
        let cfg = lossless_cfg();
        let spec = Arc::new(cfg.adc_spec().unwrap());
        for _ in 0..100 {
            let (out_f, in_f) = (1 + rng.below(24) as usize, 1 + rng.below(100) as usize);
            let bits = [2, 4][rng.below(2) as usize];
            let w = random_weights(&mut rng, out_f * in_f, bits);
            let x = random_inputs(&mut rng, in_f, 8);
            let m = map_weights(&w, out_f, in_f, &cfg, bits).unwrap();
            let adcs: Vec<Vec<AdcInstance>> = m
                .sub_arrays
                .iter()
                .map(|sa| (0..sa.n_cols).map(|_| AdcInstance::ideal(spec.clone(), AdcKind::Sar)).collect())
                .collect();
            let terms = collect_terms(&m, &x, 8, Some(&adcs)).unwrap();
            let want: Vec<i64> = reference(&w, &x, out_f, in_f).iter().map(|v| v << LEVEL_FRAC_BITS).collect();
            assert_eq!(accumulate(&terms, &m, Some(&spec), 8).unwrap(), want);
        }
    }

    #[test]
    fn compiled_kernel_matches_reference_path() {
        let mut rng = RngStream::from_seed(77);
        let cfg = ArrayConfig {
            rows: 40,
            cols: 12,
            rows_per_access: 16,
            ..ArrayConfig::default()
        };
        let spec = Arc::new(cfg.adc_spec().unwrap());
        let prof = sigma_profile(&PassRateCurve::new(0.95, 0.7, 1.0, 1.0).unwrap(), &spec).unwrap();
        for trial in 0..30 {
            let (out_f, in_f) = (1 + rng.below(15) as usize, 1 + rng.below(90) as usize);
            let bits = [2, 4, 8][rng.below(3) as usize];
            let kind = if trial % 2 == 0 { AdcKind::Flash } else { AdcKind::Sar };
            let w = random_weights(&mut rng, out_f * in_f, bits);
            let m = map_weights(&w, out_f, in_f, &cfg, bits).unwrap();
            let adcs: Vec<Vec<AdcInstance>> = m
                .sub_arrays
                .iter()
                .enumerate()
                .map(|(a, sa)| {
                    (0..sa.n_cols)
                        .map(|c| {
                            let mut s = derive_stream(trial, format!("{a}/{c}").as_bytes());
                            sample_instance(spec.clone(), &prof.scaled(2.0), kind, &mut s).unwrap()
                        })
                        .collect()
                })
                .collect();
            let exact = CompiledLayer::new(&m, None, cfg.max_psum()).unwrap();
            let chip = CompiledLayer::new(&m, Some((&spec, &adcs)), cfg.max_psum()).unwrap();
            let mut out = vec![0i64; out_f];
            for _ in 0..5 {
                let x = random_inputs(&mut rng, in_f, 8);
                let terms = collect_terms(&m, &x, 8, Some(&adcs)).unwrap();
                chip.run(&x, 8, &mut out);
                assert_eq!(out, accumulate(&terms, &m, Some(&spec), 8).unwrap());
                let terms = collect_terms(&m, &x, 8, None).unwrap();
                exact.run(&x, 8, &mut out);
                assert_eq!(out, accumulate(&terms, &m, None, 8).unwrap());
            }
        }
    }

    #[test]
    fn raising_psum_max_never_adds_code_errors() {
        let mut rng = RngStream::from_seed(13);
        let w = random_weights(&mut rng, 16 * 16, 2);
        let inputs: Vec<Vec<u8>> = (0..200)
            .map(|_| (0..16).map(|_| rng.below(2) as u8).collect())
            .collect();
        let mut prev_errors = usize::MAX;
        for bits in 3..=6u32 {
            let psum_max = (1u32 << bits) - 1;
            let cfg = ArrayConfig {
                rows: 16,
                cols: 16,
                rows_per_access: 16,
                allow_clipping: true,
                adc: AdcParams {
                    bits,
                    psum_max,
                    step_compression: 0.0,
                },
                ..lossless_cfg()
            };
            let spec = Arc::new(cfg.adc_spec().unwrap());
            let m = map_weights(&w, 16, 16, &cfg, 2).unwrap();
            let sa = &m.sub_arrays[0];
            let adcs: Vec<AdcInstance> = (0..16).map(|_| AdcInstance::ideal(spec.clone(), AdcKind::Flash)).collect();
            let mut errors = 0;
            for bits in &inputs {
                let exact = sa.vmm_exact(0, bits).unwrap();
                let codes = sa.vmm_chip(0, bits, &adcs).unwrap();
                errors += exact
                    .iter()
                    .zip(&codes)
                    .filter(|(p, c)| spec.levels()[**c as usize] != **p as f64)
                    .count();
            }
            assert!(errors <= prev_errors, "psum_max {psum_max}: {errors} > {prev_errors}");
            prev_errors = errors;
        }
        assert_eq!(prev_errors, 0);
    }
}
