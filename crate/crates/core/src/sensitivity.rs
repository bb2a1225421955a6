//! Weight-sensitivity estimators.
//!
//! The central quantity is the first-order loss change of perturbing a
//! component, with gradients taken at the *quantized* model rather than the
//! full-precision one. `true_component_sensitivity` is the ground-truth
//! restoration oracle the estimators are ranked against;
//! `fp_baseline_metric` is the conventional full-precision-gradient metric
//! kept purely as a comparison baseline.

use std::collections::BTreeMap;

use crate::error::Error;
use crate::layout::BlockPartition;
use crate::model::{eval_loss, traced_loss, ModelBundle, ParamLookup};
use crate::quant::{quantize_model, requantize_block, QuantConfig, QuantizedModel};
use crate::tensor::kernels as k;
use crate::tensor::tape::{grad_with_nodes, GradMap};
use crate::tensor::Tensor;
use crate::Result;

/// A weight component: either one decoder layer's quantizable sites or an
/// explicit set of blocks.
#[derive(Debug, Clone)]
pub enum Component {
    Layer(usize),
    Blocks(Vec<usize>),
}

/// What to restore a component to in the ground-truth probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Restore {
    Bits(u8),
    FullPrecision,
}

/// Per-iteration sensitivity state: element maps per site plus block-level
/// up/down surrogates.
#[derive(Debug, Clone)]
pub struct SensitivitySnapshot {
    pub iteration: usize,
    pub batch_id: u64,
    pub site_sens: BTreeMap<String, Tensor>,
    pub s_up: Vec<f64>,
    pub s_down: Vec<f64>,
}

fn component_blocks(
    model: &ModelBundle,
    partition: &BlockPartition,
    component: &Component,
) -> Vec<usize> {
    match component {
        Component::Blocks(b) => b.clone(),
        Component::Layer(layer) => model
            .sites
            .iter()
            .filter(|s| s.layer == *layer)
            .flat_map(|s| partition.site_blocks(s.id))
            .collect(),
    }
}

/// Ground truth: |L(w^Q with the component restored) - L(w^Q)| on a batch.
/// Restoring to the component's current bits is a no-op and returns 0.
pub fn true_component_sensitivity(
    model: &ModelBundle,
    qm: &QuantizedModel,
    partition: &BlockPartition,
    cfg: &QuantConfig,
    component: &Component,
    restore: Restore,
    batch: &[&[u32]],
) -> Result<f64> {
    let base = eval_loss(&model.spec, qm, batch)?;
    let mut probe = qm.clone();
    let blocks = component_blocks(model, partition, component);
    match restore {
        Restore::Bits(bits) => {
            for flat in blocks {
                requantize_block(&mut probe, model, partition, flat, bits, cfg)?;
            }
        }
        Restore::FullPrecision => {
            for flat in blocks {
                let r = partition.locate(flat);
                let site = &model.sites[r.site];
                let src = model.param(&site.name);
                let dst = probe.params.get_mut(&site.name).expect("site tensor");
                for row in r.row_start..r.row_start + r.row_len {
                    let a = row * site.cols + r.col_start;
                    let b = a + r.col_len;
                    dst.data_mut()[a..b].copy_from_slice(&src.data()[a..b]);
                }
            }
        }
    }
    let restored = eval_loss(&model.spec, &probe, batch)?;
    Ok((restored - base).abs())
}

/// First-order estimate around the quantized model (gradient at w^Q dotted
/// with the restoration direction), reported as a magnitude.
pub fn first_order_sensitivity(
    grads_at_q: &GradMap,
    model: &ModelBundle,
    qm: &QuantizedModel,
    partition: &BlockPartition,
    component: &Component,
) -> Result<f64> {
    let mut acc = 0.0;
    for flat in component_blocks(model, partition, component) {
        let r = partition.locate(flat);
        let site = &model.sites[r.site];
        let g = grads_at_q
            .get(&site.name)
            .ok_or_else(|| Error::Lookup(format!("no gradient for {}", site.name)))?;
        let w = model.param(&site.name);
        let wq = &qm.params[&site.name];
        for row in r.row_start..r.row_start + r.row_len {
            let a = row * site.cols + r.col_start;
            let b = a + r.col_len;
            for j in a..b {
                acc += g.data()[j] * (w.data()[j] - wq.data()[j]);
            }
        }
    }
    Ok(acc.abs())
}

/// Full-precision baseline metric: sum of |g| * |dw| with gradients taken at
/// the unquantized model. Exists as the ranking baseline only.
pub fn fp_baseline_metric(
    grads_at_full: &GradMap,
    model: &ModelBundle,
    qm: &QuantizedModel,
    partition: &BlockPartition,
    component: &Component,
) -> Result<f64> {
    let mut acc = 0.0;
    for flat in component_blocks(model, partition, component) {
        let r = partition.locate(flat);
        let site = &model.sites[r.site];
        let g = grads_at_full
            .get(&site.name)
            .ok_or_else(|| Error::Lookup(format!("no gradient for {}", site.name)))?;
        let w = model.param(&site.name);
        let wq = &qm.params[&site.name];
        for row in r.row_start..r.row_start + r.row_len {
            let a = row * site.cols + r.col_start;
            let b = a + r.col_len;
            for j in a..b {
                acc += g.data()[j].abs() * (w.data()[j] - wq.data()[j]).abs();
            }
        }
    }
    Ok(acc)
}

/// Factorized element sensitivity of one linear site:
/// S = (sum over positions of |g_out| outer |x_in|), elementwise times |dW|.
pub fn factorized_site_sens(g_out: &Tensor, x_in: &Tensor, dw: &Tensor) -> Tensor {
    let (t, d_out) = (g_out.rows(), g_out.cols());
    let d_in = x_in.cols();
    debug_assert_eq!(x_in.rows(), t);
    debug_assert_eq!(dw.shape(), &[d_out, d_in]);
    let abs_g: Vec<f64> = g_out.data().iter().map(|v| v.abs()).collect();
    let abs_x: Vec<f64> = x_in.data().iter().map(|v| v.abs()).collect();
    // |G|^T |X|: accumulates the per-token outer products in one matmul.
    let gt = k::transpose(&abs_g, t, d_out);
    let mut acc = k::matmul(&gt, &abs_x, d_out, t, d_in);
    for (a, w) in acc.iter_mut().zip(dw.data()) {
        *a *= w.abs();
    }
    Tensor::new(vec![d_out, d_in], acc).expect("sens shape")
}

/// Element sensitivity for every quantizable site, accumulated over the
/// batch: per position |output gradient| x |input activation| x |W - W^Q|.
pub fn element_sensitivity(
    model: &ModelBundle,
    qm: &QuantizedModel,
    batch: &[&[u32]],
) -> Result<BTreeMap<String, Tensor>> {
    let run = traced_loss(&model.spec, qm, batch)?;
    let (_, bw) = grad_with_nodes(&run.tape, run.loss_node, &[])?;
    let mut out = BTreeMap::new();
    for site in &model.sites {
        let w = model.param(&site.name);
        let wq = &qm.params[&site.name];
        let dw_data: Vec<f64> = w.data().iter().zip(wq.data()).map(|(a, b)| a - b).collect();
        let dw = Tensor::new(vec![site.rows, site.cols], dw_data)?;
        let mut acc = Tensor::zeros(vec![site.rows, site.cols]);
        for seq_io in &run.site_io {
            let (x_node, y_node) = seq_io[site.id];
            let g_out = bw
                .node_grad(y_node)
                .ok_or_else(|| Error::contract(format!("no output grad for {}", site.name)))?;
            let x_in = run.tape.value(x_node);
            let s = factorized_site_sens(g_out, x_in, &dw);
            for (a, v) in acc.data_mut().iter_mut().zip(s.data()) {
                *a += v;
            }
        }
        out.insert(site.name.clone(), acc);
    }
    Ok(out)
}

/// Block-level surrogate marginal gains/losses for one-bit moves.
///
/// `s_up[i]` estimates the loss reduction from raising block i one bit: the
/// gradient dotted with the step from the quantized weights back toward full
/// precision (signed aggregation). `s_down[i]` estimates the loss increase
/// from lowering: the quantization-step fraction 2^-b times the l1 norm of
/// gradient x quantized weight.
///
/// Blocks already at `bit_max` get s_up = -inf (never raised); blocks at
/// `bit_min` get s_down = +inf (never lowered).
pub fn block_updown(
    grads_at_q: &GradMap,
    model: &ModelBundle,
    qm: &QuantizedModel,
    partition: &BlockPartition,
    assignment: &[u8],
    cfg: &QuantConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if assignment.len() != partition.n_blocks {
        return Err(Error::contract("assignment length != block count".to_string()));
    }
    let mut s_up = vec![0.0; partition.n_blocks];
    let mut s_down = vec![0.0; partition.n_blocks];
    for site in &model.sites {
        let g = grads_at_q
            .get(&site.name)
            .ok_or_else(|| Error::Lookup(format!("no gradient for {}", site.name)))?;
        let w = model.param(&site.name);
        let wq = &qm.params[&site.name];
        for flat in partition.site_blocks(site.id) {
            let r = partition.locate(flat);
            let mut up = 0.0;
            let mut down_l1 = 0.0;
            for row in r.row_start..r.row_start + r.row_len {
                let a = row * site.cols + r.col_start;
                let b = a + r.col_len;
                for j in a..b {
                    up += g.data()[j] * (wq.data()[j] - w.data()[j]);
                    down_l1 += (g.data()[j] * wq.data()[j]).abs();
                }
            }
            let bits = assignment[flat];
            s_up[flat] = if bits >= cfg.bit_max { f64::NEG_INFINITY } else { up };
            s_down[flat] = if bits <= cfg.bit_min {
                f64::INFINITY
            } else {
                down_l1 / 2f64.powi(bits as i32)
            };
        }
    }
    Ok((s_up, s_down))
}

/// l1-aggregated variant of the raise surrogate, kept for the signed-vs-l1
/// ranking comparison.
pub fn block_up_l1(
    grads_at_q: &GradMap,
    model: &ModelBundle,
    qm: &QuantizedModel,
    partition: &BlockPartition,
    assignment: &[u8],
    cfg: &QuantConfig,
) -> Result<Vec<f64>> {
    let mut s_up = vec![0.0; partition.n_blocks];
    for site in &model.sites {
        let g = grads_at_q
            .get(&site.name)
            .ok_or_else(|| Error::Lookup(format!("no gradient for {}", site.name)))?;
        let w = model.param(&site.name);
        let wq = &qm.params[&site.name];
        for flat in partition.site_blocks(site.id) {
            let r = partition.locate(flat);
            let mut acc = 0.0;
            for row in r.row_start..r.row_start + r.row_len {
                let a = row * site.cols + r.col_start;
                let b = a + r.col_len;
                for j in a..b {
                    acc += (g.data()[j] * (wq.data()[j] - w.data()[j])).abs();
                }
            }
            s_up[flat] = if assignment[flat] >= cfg.bit_max { f64::NEG_INFINITY } else { acc };
        }
    }
    Ok(s_up)
}

/// Gradients of the batch loss for every quantizable site of `params`.
pub fn site_grads<P: ParamLookup>(
    model: &ModelBundle,
    params: &P,
    batch: &[&[u32]],
) -> Result<GradMap> {
    let run = traced_loss(&model.spec, params, batch)?;
    let names: Vec<&str> = model.sites.iter().map(|s| s.name.as_str()).collect();
    let (grads, _) = grad_with_nodes(&run.tape, run.loss_node, &names)?;
    Ok(grads)
}

/// Convenience: quantize at a uniform bitwidth.
pub fn quantize_uniform(
    model: &ModelBundle,
    partition: &BlockPartition,
    bits: u8,
    cfg: &QuantConfig,
) -> Result<QuantizedModel> {
    quantize_model(model, partition, &vec![bits; partition.n_blocks], cfg)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    pearson(&ra, &rb)
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &id in &idx[i..=j] {
            ranks[id] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}
