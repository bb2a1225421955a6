//! Round-to-nearest group quantizer with per-block bitwidths.
//!
//! Groups are contiguous column runs inside a block; each group stores one
//! 16-bit scale and a zero code of the block's bitwidth. Scales are rounded
//! to binary16 before any use, so in-memory dequantization and the packed
//! format (see [`pack`]) agree bitwise. A block at 0 bits dequantizes to all
//! zeros (the block is pruned).

pub mod f16;
pub mod pack;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::layout::BlockPartition;
use crate::model::ModelBundle;
use crate::par::par_map_slice;
use crate::tensor::Tensor;
use crate::Result;

pub use f16::{f16_bits_to_f64, quantize_scale};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    /// Weights per scale group, along columns.
    pub group_size: usize,
    pub bit_min: u8,
    pub bit_max: u8,
    /// Symmetric grid (zero code pinned to mid-range) instead of asymmetric
    /// min-max. Asymmetric is the default.
    pub symmetric: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig { group_size: 128, bit_min: 1, bit_max: 8, symmetric: false }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bit_min > self.bit_max || self.bit_max > 8 {
            return Err(Error::config(format!(
                "need bit_min <= bit_max <= 8, got {}..{}",
                self.bit_min, self.bit_max
            )));
        }
        if self.group_size == 0 {
            return Err(Error::config("group_size must be positive".to_string()));
        }
        Ok(())
    }

    /// A bitwidth is storable if it is 0 (pruned) or within bounds.
    pub fn bits_ok(&self, b: u8) -> bool {
        b == 0 || (self.bit_min..=self.bit_max).contains(&b)
    }
}

/// One quantized group: codes in [0, 2^bits - 1], an f16 scale, and a zero
/// code. Dequantized value = scale * (code - zero).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupQuant {
    pub bits: u8,
    pub codes: Vec<u8>,
    /// Scale as f16 bits; use [`GroupQuant::scale`] for the numeric value.
    pub scale_bits: u16,
    pub zero: u8,
}

impl GroupQuant {
    pub fn scale(&self) -> f64 {
        f16_bits_to_f64(self.scale_bits)
    }

    pub fn dequant_into(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.codes.len());
        if self.bits == 0 {
            out.fill(0.0);
            return;
        }
        let s = self.scale();
        let z = self.zero as f64;
        for (o, &c) in out.iter_mut().zip(&self.codes) {
            *o = s * (c as f64 - z);
        }
    }

    pub fn dequant(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.codes.len()];
        self.dequant_into(&mut out);
        out
    }
}

fn rtn_once(values: &[f64], bits: u8, symmetric: bool) -> GroupQuant {
    debug_assert!(bits >= 1);
    let max_code = ((1u32 << bits) - 1) as f64;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }

    if hi == lo {
        // Constant group: represent the value exactly (up to f16 rounding of
        // its magnitude) with a single step, whatever the bitwidth.
        let v = hi;
        if v == 0.0 {
            return GroupQuant {
                bits,
                codes: vec![0; values.len()],
                scale_bits: quantize_scale(1.0),
                zero: 0,
            };
        }
        let scale_bits = quantize_scale(v.abs());
        let (zero, code) = if v > 0.0 { (0u8, 1u8) } else { (1u8, 0u8) };
        return GroupQuant { bits, codes: vec![code; values.len()], scale_bits, zero };
    }

    if symmetric && bits >= 2 {
        let max_abs = lo.abs().max(hi.abs());
        let half = (1u32 << (bits - 1)) as f64;
        let scale_bits = f16::quantize_scale_floor(max_abs / (half - 1.0));
        let scale = f16_bits_to_f64(scale_bits);
        let codes = values
            .iter()
            .map(|&v| ((v / scale).round() + half).clamp(0.0, max_code) as u8)
            .collect();
        return GroupQuant { bits, codes, scale_bits, zero: half as u8 };
    }

    // Floor-rounding the scale to f16 keeps it <= the raw step, which pins
    // the extreme values to the end codes; the group then re-quantizes to
    // itself exactly.
    let raw = (hi - lo) / max_code;
    let scale_bits = f16::quantize_scale_floor(raw);
    let scale = f16_bits_to_f64(scale_bits);
    let zero_raw = (-lo / scale).round();
    let (zero, codes): (f64, Vec<u8>) = if zero_raw < 0.0 {
        // Range entirely above zero: a b-bit zero code cannot anchor the
        // grid at the origin, so anchor at the minimum instead.
        let codes = values
            .iter()
            .map(|&v| ((v - lo) / scale).round().clamp(0.0, max_code) as u8)
            .collect();
        (0.0, codes)
    } else if zero_raw > max_code {
        // Entirely below zero: anchor at the maximum.
        let codes = values
            .iter()
            .map(|&v| (((v - hi) / scale).round() + max_code).clamp(0.0, max_code) as u8)
            .collect();
        (max_code, codes)
    } else {
        let codes = values
            .iter()
            .map(|&v| ((v / scale).round() + zero_raw).clamp(0.0, max_code) as u8)
            .collect();
        (zero_raw, codes)
    };
    GroupQuant { bits, codes, scale_bits, zero: zero as u8 }
}

/// Quantize one group of values at `bits`. Rounds half away from zero onto
/// an asymmetric min-max grid (or the symmetric variant when configured).
/// Re-quantizing the dequantized result at the same bitwidth reproduces it
/// exactly, making model-level quantization a projection.
///
/// The projection property holds case by case: zero-straddling ranges pin
/// their extremes to the end codes (floor-rounded scale), one-sided ranges
/// anchor at their min or max, and constants are represented exactly.
/// The symmetric variant does not carry the exactness guarantee.
pub fn rtn_quantize_group(values: &[f64], bits: u8, cfg: &QuantConfig) -> Result<GroupQuant> {
    if bits > 8 {
        return Err(Error::contract(format!("bits {bits} > 8")));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite input {bad} to quantizer")));
    }
    if bits == 0 {
        return Ok(GroupQuant {
            bits: 0,
            codes: vec![0; values.len()],
            scale_bits: quantize_scale(1.0),
            zero: 0,
        });
    }
    Ok(rtn_once(values, bits, cfg.symmetric))
}

/// Codes for one block: its bitwidth and groups in row-major order (each
/// in-block row is split into `cols / group_size` groups, left to right).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockCodes {
    pub bits: u8,
    pub groups: Vec<GroupQuant>,
}

/// Codes for every block of one site, in flat-id order.
#[derive(Debug, Clone)]
pub struct SiteCodes {
    pub site: usize,
    pub blocks: Vec<BlockCodes>,
}

/// A quantized weight set: dequantized tensors for every parameter
/// (non-quantizable ones pass through unchanged) plus the codes that
/// produced them.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub params: BTreeMap<String, Tensor>,
    pub sites: Vec<SiteCodes>,
    pub assignment: Vec<u8>,
}

impl crate::model::ParamLookup for QuantizedModel {
    fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }
}

/// Quantize-dequantize one rectangular region of `src` into `dst` at the
/// given bitwidth, returning the stored groups (empty when pruned).
pub fn quantize_region(
    src: &Tensor,
    dst: &mut [f64],
    cols: usize,
    row_start: usize,
    row_len: usize,
    col_start: usize,
    col_len: usize,
    bits: u8,
    cfg: &QuantConfig,
) -> Result<Vec<GroupQuant>> {
    let gs = cfg.group_size;
    if bits == 0 {
        // Pruned block: zero the region, no stored groups.
        for r in row_start..row_start + row_len {
            dst[r * cols + col_start..r * cols + col_start + col_len].fill(0.0);
        }
        return Ok(Vec::new());
    }
    let mut groups = Vec::with_capacity(row_len * (col_len / gs));
    let mut buf = vec![0.0; gs];
    for r in row_start..row_start + row_len {
        for g in 0..col_len / gs {
            let c0 = col_start + g * gs;
            buf.copy_from_slice(&src.data()[r * cols + c0..r * cols + c0 + gs]);
            let gq = rtn_quantize_group(&buf, bits, cfg)?;
            gq.dequant_into(&mut dst[r * cols + c0..r * cols + c0 + gs]);
            groups.push(gq);
        }
    }
    Ok(groups)
}

/// Quantize every block of the model at its assigned bitwidth.
/// Quantizing the result again at the same assignment reproduces it bitwise.
pub fn quantize_model(
    model: &ModelBundle,
    partition: &BlockPartition,
    assignment: &[u8],
    cfg: &QuantConfig,
) -> Result<QuantizedModel> {
    cfg.validate()?;
    if assignment.len() != partition.n_blocks {
        return Err(Error::contract(format!(
            "assignment length {} != block count {}",
            assignment.len(),
            partition.n_blocks
        )));
    }
    if let Some(&bad) = assignment.iter().find(|&&b| !cfg.bits_ok(b)) {
        return Err(Error::contract(format!(
            "bitwidth {bad} outside 0 or {}..={}",
            cfg.bit_min, cfg.bit_max
        )));
    }
    if partition.block_cols % cfg.group_size != 0 {
        return Err(Error::config(format!(
            "block_cols {} not a multiple of group_size {}",
            partition.block_cols, cfg.group_size
        )));
    }

    let site_results: Vec<Result<(String, Tensor, SiteCodes)>> =
        par_map_slice(&model.sites, |site| {
            let src = model.param(&site.name);
            let mut dst = src.data().to_vec();
            let grid = &partition.grids[site.id];
            let mut blocks = Vec::with_capacity(grid.grid_rows * grid.grid_cols);
            for flat in partition.site_blocks(site.id) {
                let r = partition.locate(flat);
                let groups = quantize_region(
                    src,
                    &mut dst,
                    site.cols,
                    r.row_start,
                    r.row_len,
                    r.col_start,
                    r.col_len,
                    assignment[flat],
                    cfg,
                )?;
                blocks.push(BlockCodes { bits: assignment[flat], groups });
            }
            let tensor = Tensor::new(vec![site.rows, site.cols], dst)?;
            Ok((site.name.clone(), tensor, SiteCodes { site: site.id, blocks }))
        });

    let mut params = model.params.clone();
    let mut sites = Vec::with_capacity(model.sites.len());
    for r in site_results {
        let (name, tensor, codes) = r?;
        params.insert(name, tensor);
        sites.push(codes);
    }
    Ok(QuantizedModel { params, sites, assignment: assignment.to_vec() })
}

/// Re-quantize a single block at a new bitwidth, updating the dequantized
/// tensor, the stored codes, and the assignment in place.
pub fn requantize_block(
    qm: &mut QuantizedModel,
    model: &ModelBundle,
    partition: &BlockPartition,
    flat: usize,
    bits: u8,
    cfg: &QuantConfig,
) -> Result<()> {
    if !cfg.bits_ok(bits) {
        return Err(Error::contract(format!("bitwidth {bits} out of range")));
    }
    let r = partition.locate(flat);
    let site = &model.sites[r.site];
    let src = model.param(&site.name);
    let dst_tensor = qm.params.get_mut(&site.name).expect("site tensor present");
    let groups = {
        let dst = dst_tensor.data_mut();
        quantize_region(
            src, dst, site.cols, r.row_start, r.row_len, r.col_start, r.col_len, bits, cfg,
        )?
    };
    let local = flat - partition.grids[r.site].first_block;
    qm.sites[r.site].blocks[local] = BlockCodes { bits, groups };
    qm.assignment[flat] = bits;
    Ok(())
}

/// Average storage cost per quantizable weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveBits {
    /// Code bits only: the budget-constrained quantity.
    pub weight_bits_avg: f64,
    /// Plus per-group scale (16) and zero (bits) and the per-block bitwidth
    /// byte. Byte padding in the packed stream is not counted here.
    pub total_bits_avg: f64,
}

pub fn effective_bits(
    assignment: &[u8],
    partition: &BlockPartition,
    cfg: &QuantConfig,
) -> EffectiveBits {
    let mut weight_bits = 0f64;
    let mut meta_bits = 0f64;
    for (flat, &b) in assignment.iter().enumerate() {
        let m = partition.block_elems[flat] as f64;
        weight_bits += b as f64 * m;
        meta_bits += 8.0; // block bitwidth byte
        if b > 0 {
            let groups = m / cfg.group_size as f64;
            meta_bits += groups * (16.0 + b as f64);
        }
    }
    let n = partition.total_weights as f64;
    EffectiveBits {
        weight_bits_avg: weight_bits / n,
        total_bits_avg: (weight_bits + meta_bits) / n,
    }
}
