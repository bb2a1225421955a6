//! Forward passes for the toy decoder.
//!
//! Two implementations share the same numeric kernels and accumulation
//! order, so their losses agree bitwise:
//!
//! - `eval_loss` / `eval_loss_capture` / `eval_loss_resume`: allocation-lean
//!   evaluation without a tape, with an optional residual-stream cache so a
//!   caller re-evaluating after a single-layer weight change can skip the
//!   unchanged prefix.
//! - `traced_loss`: records a tape for gradients and keeps, per quantizable
//!   site, the node ids of the layer input and output activations (needed by
//!   the factorized element sensitivity).
//!
//! Sequence losses are combined as `sum * (1/n)` in both paths.

use std::collections::BTreeMap;

use super::{param_name, ModelSpec, ParamLookup, ProjKind};
use crate::error::Error;
use crate::tensor::kernels as k;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::Result;

fn fetch<'a, P: ParamLookup>(params: &'a P, name: &str) -> Result<&'a Tensor> {
    params
        .tensor(name)
        .ok_or_else(|| Error::Lookup(format!("missing parameter {name}")))
}

fn check_tokens(spec: &ModelSpec, tokens: &[u32]) -> Result<()> {
    if tokens.len() < 2 {
        return Err(Error::Input(format!(
            "sequence needs at least 2 tokens for next-token loss, got {}",
            tokens.len()
        )));
    }
    if tokens.len() > spec.seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds seq_len {}",
            tokens.len(),
            spec.seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= spec.vocab) {
        return Err(Error::Input(format!("token id {bad} >= vocab {}", spec.vocab)));
    }
    Ok(())
}

/// Residual-stream snapshots: `boundaries[seq][0]` is the embedding output,
/// `boundaries[seq][l + 1]` the stream after layer `l`.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub boundaries: Vec<Vec<Vec<f64>>>,
}

fn embed<P: ParamLookup>(spec: &ModelSpec, params: &P, tokens: &[u32]) -> Result<Vec<f64>> {
    let emb = fetch(params, "embedding")?;
    let d = spec.d_model;
    let mut x = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        x.extend_from_slice(emb.row(t as usize));
    }
    Ok(x)
}

/// One decoder layer, in place on the residual stream.
fn run_layer<P: ParamLookup>(
    spec: &ModelSpec,
    params: &P,
    layer: usize,
    x: &mut [f64],
    t: usize,
) -> Result<()> {
    let d = spec.d_model;
    let dh = spec.d_head;
    let scale = 1.0 / (dh as f64).sqrt();

    // Attention block.
    let gain_attn = fetch(params, &format!("layer{layer}.norm_attn"))?;
    let (h, _) = k::rms_norm(x, gain_attn.data(), t, d);
    let wq = fetch(params, &param_name(layer, ProjKind::Q))?;
    let wk = fetch(params, &param_name(layer, ProjKind::K))?;
    let wv = fetch(params, &param_name(layer, ProjKind::V))?;
    let q = k::matmul_nt(&h, wq.data(), t, d, d);
    let kk = k::matmul_nt(&h, wk.data(), t, d, d);
    let v = k::matmul_nt(&h, wv.data(), t, d, d);

    let mut ctx = vec![0.0; t * d];
    let mut qh = vec![0.0; t * dh];
    let mut kh = vec![0.0; t * dh];
    let mut vh = vec![0.0; t * dh];
    for head in 0..spec.n_heads {
        let off = head * dh;
        for i in 0..t {
            qh[i * dh..(i + 1) * dh].copy_from_slice(&q[i * d + off..i * d + off + dh]);
            kh[i * dh..(i + 1) * dh].copy_from_slice(&kk[i * d + off..i * d + off + dh]);
            vh[i * dh..(i + 1) * dh].copy_from_slice(&v[i * d + off..i * d + off + dh]);
        }
        let mut scores = k::matmul_nt(&qh, &kh, t, dh, t);
        for s in scores.iter_mut() {
            *s *= scale;
        }
        k::causal_mask_inplace(&mut scores, t);
        k::softmax_rows_inplace(&mut scores, t, t);
        let ctx_h = k::matmul(&scores, &vh, t, t, dh);
        for i in 0..t {
            ctx[i * d + off..i * d + off + dh].copy_from_slice(&ctx_h[i * dh..(i + 1) * dh]);
        }
    }
    let wo = fetch(params, &param_name(layer, ProjKind::O))?;
    let attn_out = k::matmul_nt(&ctx, wo.data(), t, d, d);
    for (xi, ai) in x.iter_mut().zip(&attn_out) {
        *xi += ai;
    }

    // MLP block (SwiGLU).
    let gain_mlp = fetch(params, &format!("layer{layer}.norm_mlp"))?;
    let (h2, _) = k::rms_norm(x, gain_mlp.data(), t, d);
    let wup = fetch(params, &param_name(layer, ProjKind::Up))?;
    let wgate = fetch(params, &param_name(layer, ProjKind::Gate))?;
    let f = spec.d_ff;
    let up = k::matmul_nt(&h2, wup.data(), t, d, f);
    let gate = k::matmul_nt(&h2, wgate.data(), t, d, f);
    let mut act = vec![0.0; t * f];
    for i in 0..t * f {
        act[i] = k::silu(gate[i]) * up[i];
    }
    let wdown = fetch(params, &param_name(layer, ProjKind::Down))?;
    let mlp_out = k::matmul_nt(&act, wdown.data(), t, f, d);
    for (xi, mi) in x.iter_mut().zip(&mlp_out) {
        *xi += mi;
    }
    Ok(())
}

fn finish<P: ParamLookup>(
    spec: &ModelSpec,
    params: &P,
    x: &[f64],
    tokens: &[u32],
) -> Result<f64> {
    let t = tokens.len();
    let d = spec.d_model;
    let gain = fetch(params, "final_norm")?;
    let (hn, _) = k::rms_norm(x, gain.data(), t, d);
    let head = fetch(params, "head")?;
    let logits = k::matmul_nt(&hn, head.data(), t, d, spec.vocab);
    let (loss, _) = k::mean_cross_entropy(&logits, spec.vocab, &tokens[1..]);
    Ok(loss)
}

fn eval_seq<P: ParamLookup>(
    spec: &ModelSpec,
    params: &P,
    tokens: &[u32],
    capture: Option<&mut Vec<Vec<f64>>>,
) -> Result<f64> {
    check_tokens(spec, tokens)?;
    let t = tokens.len();
    let mut x = embed(spec, params, tokens)?;
    let mut boundaries = capture;
    if let Some(b) = boundaries.as_deref_mut() {
        b.push(x.clone());
    }
    for layer in 0..spec.n_layers {
        run_layer(spec, params, layer, &mut x, t)?;
        if let Some(b) = boundaries.as_deref_mut() {
            b.push(x.clone());
        }
    }
    finish(spec, params, &x, tokens)
}

/// Mean next-token cross entropy of a batch. Deterministic: two calls with
/// identical inputs return identical bits.
pub fn eval_loss<P: ParamLookup>(spec: &ModelSpec, params: &P, batch: &[&[u32]]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch".to_string()));
    }
    let mut total = 0.0;
    for tokens in batch {
        total += eval_seq(spec, params, tokens, None)?;
    }
    Ok(total * (1.0 / batch.len() as f64))
}

/// Like [`eval_loss`] but also returns residual-stream snapshots at every
/// layer boundary for later resumption.
pub fn eval_loss_capture<P: ParamLookup>(
    spec: &ModelSpec,
    params: &P,
    batch: &[&[u32]],
) -> Result<(f64, LayerCache)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch".to_string()));
    }
    let mut cache = LayerCache { boundaries: Vec::with_capacity(batch.len()) };
    let mut total = 0.0;
    for tokens in batch {
        let mut b = Vec::with_capacity(spec.n_layers + 1);
        total += eval_seq(spec, params, tokens, Some(&mut b))?;
        cache.boundaries.push(b);
    }
    Ok((total * (1.0 / batch.len() as f64), cache))
}

/// Re-evaluate the batch starting from the cached stream before
/// `start_layer`. Only valid when parameters of layers < `start_layer` (and
/// the embedding) are unchanged since the cache was captured.
pub fn eval_loss_resume<P: ParamLookup>(
    spec: &ModelSpec,
    params: &P,
    batch: &[&[u32]],
    cache: &LayerCache,
    start_layer: usize,
) -> Result<f64> {
    if batch.len() != cache.boundaries.len() {
        return Err(Error::contract(format!(
            "cache holds {} sequences, batch has {}",
            cache.boundaries.len(),
            batch.len()
        )));
    }
    if start_layer > spec.n_layers {
        return Err(Error::contract(format!("start layer {start_layer} out of range")));
    }
    let mut total = 0.0;
    for (tokens, bounds) in batch.iter().zip(&cache.boundaries) {
        check_tokens(spec, tokens)?;
        let t = tokens.len();
        let mut x = bounds[start_layer].clone();
        for layer in start_layer..spec.n_layers {
            run_layer(spec, params, layer, &mut x, t)?;
        }
        total += finish(spec, params, &x, tokens)?;
    }
    Ok(total * (1.0 / batch.len() as f64))
}

/// Result of a recorded forward pass.
pub struct TracedRun {
    pub tape: Tape,
    pub loss_node: NodeId,
    pub loss: f64,
    /// `site_io[seq][site_id]` = (input activation node, output node) of the
    /// linear site in that sequence's forward.
    pub site_io: Vec<Vec<(NodeId, NodeId)>>,
}

/// Record the batch forward on a fresh tape. Gradients for all parameters
/// are then available via [`crate::tensor::tape::grad`].
pub fn traced_loss<P: ParamLookup>(
    spec: &ModelSpec,
    params: &P,
    batch: &[&[u32]],
) -> Result<TracedRun> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch".to_string()));
    }
    let mut tape = Tape::new();
    let dh = spec.d_head;
    let scale = 1.0 / (dh as f64).sqrt();

    // Register each parameter leaf once; transposed weights are shared by
    // every sequence on this tape.
    struct Leaves {
        plain: BTreeMap<String, NodeId>,
        transposed: BTreeMap<String, NodeId>,
    }
    let mut leaves = Leaves { plain: BTreeMap::new(), transposed: BTreeMap::new() };
    fn reg<P: ParamLookup>(
        leaves: &mut Leaves,
        tape: &mut Tape,
        params: &P,
        name: &str,
    ) -> Result<NodeId> {
        if let Some(&id) = leaves.plain.get(name) {
            return Ok(id);
        }
        let t = fetch(params, name)?;
        let id = tape.param(name, t);
        leaves.plain.insert(name.to_string(), id);
        Ok(id)
    }
    fn reg_t<P: ParamLookup>(
        leaves: &mut Leaves,
        tape: &mut Tape,
        params: &P,
        name: &str,
    ) -> Result<NodeId> {
        if let Some(&id) = leaves.transposed.get(name) {
            return Ok(id);
        }
        let p = reg(leaves, tape, params, name)?;
        let tt = tape.transpose(p);
        leaves.transposed.insert(name.to_string(), tt);
        Ok(tt)
    }

    let emb_node = reg(&mut leaves, &mut tape, params, "embedding")?;
    let mut seq_losses = Vec::with_capacity(batch.len());
    let mut site_io: Vec<Vec<(NodeId, NodeId)>> = Vec::with_capacity(batch.len());

    for tokens in batch {
        check_tokens(spec, tokens)?;
        let mut io: Vec<(NodeId, NodeId)> = Vec::with_capacity(spec.n_layers * 7);
        let mut x = tape.embedding_gather(emb_node, tokens)?;
        for layer in 0..spec.n_layers {
            let gain_attn = reg(&mut leaves, &mut tape, params, &format!("layer{layer}.norm_attn"))?;
            let h = tape.rms_norm(x, gain_attn)?;
            let wqt = reg_t(&mut leaves, &mut tape, params, &param_name(layer, ProjKind::Q))?;
            let wkt = reg_t(&mut leaves, &mut tape, params, &param_name(layer, ProjKind::K))?;
            let wvt = reg_t(&mut leaves, &mut tape, params, &param_name(layer, ProjKind::V))?;
            let q = tape.matmul(h, wqt)?;
            let kk = tape.matmul(h, wkt)?;
            let v = tape.matmul(h, wvt)?;
            let mut heads = Vec::with_capacity(spec.n_heads);
            for head in 0..spec.n_heads {
                let off = head * dh;
                let qh = tape.col_slice(q, off, dh)?;
                let kh = tape.col_slice(kk, off, dh)?;
                let vh = tape.col_slice(v, off, dh)?;
                let kht = tape.transpose(kh);
                let scores = tape.matmul(qh, kht)?;
                let scaled = tape.scalar_mul(scores, scale);
                let masked = tape.causal_mask(scaled)?;
                let p = tape.row_softmax(masked);
                let ctx_h = tape.matmul(p, vh)?;
                heads.push(ctx_h);
            }
            let ctx = tape.col_concat(&heads)?;
            let wot = reg_t(&mut leaves, &mut tape, params, &param_name(layer, ProjKind::O))?;
            let attn_out = tape.matmul(ctx, wot)?;
            let x1 = tape.add(x, attn_out)?;

            let gain_mlp = reg(&mut leaves, &mut tape, params, &format!("layer{layer}.norm_mlp"))?;
            let h2 = tape.rms_norm(x1, gain_mlp)?;
            let wupt = reg_t(&mut leaves, &mut tape, params, &param_name(layer, ProjKind::Up))?;
            let wgatet = reg_t(&mut leaves, &mut tape, params, &param_name(layer, ProjKind::Gate))?;
            let up = tape.matmul(h2, wupt)?;
            let gate = tape.matmul(h2, wgatet)?;
            let sg = tape.silu(gate);
            let act = tape.mul(sg, up)?;
            let wdownt = reg_t(&mut leaves, &mut tape, params, &param_name(layer, ProjKind::Down))?;
            let mlp_out = tape.matmul(act, wdownt)?;
            x = tape.add(x1, mlp_out)?;

            // Site order must match ModelBundle::sites (q,k,v,o,up,gate,down).
            io.push((h, q));
            io.push((h, kk));
            io.push((h, v));
            io.push((ctx, attn_out));
            io.push((h2, up));
            io.push((h2, gate));
            io.push((act, mlp_out));
        }
        let final_gain = reg(&mut leaves, &mut tape, params, "final_norm")?;
        let hn = tape.rms_norm(x, final_gain)?;
        let head_t = reg_t(&mut leaves, &mut tape, params, "head")?;
        let logits = tape.matmul(hn, head_t)?;
        let loss = tape.mean_cross_entropy(logits, &tokens[1..])?;
        seq_losses.push(loss);
        site_io.push(io);
    }

    let mut acc = seq_losses[0];
    for &l in &seq_losses[1..] {
        acc = tape.add(acc, l)?;
    }
    let loss_node = tape.scalar_mul(acc, 1.0 / batch.len() as f64);
    let loss = tape.value(loss_node).item();
    Ok(TracedRun { tape, loss_node, loss, site_io })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelSpec};
    use crate::rng::Rng;

    fn small_spec() -> ModelSpec {
        ModelSpec {
            vocab: 17,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_head: 4,
            d_ff: 12,
            seq_len: 10,
            seed: 3,
        }
    }

    fn random_batch(spec: &ModelSpec, n: usize, seed: u64) -> Vec<Vec<u32>> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| (0..spec.seq_len).map(|_| rng.next_below(spec.vocab) as u32).collect())
            .collect()
    }

    #[test]
    fn eval_and_traced_agree_bitwise() {
        let spec = small_spec();
        let m = build_model(&spec).unwrap();
        let batch = random_batch(&spec, 3, 42);
        let views: Vec<&[u32]> = batch.iter().map(|s| s.as_slice()).collect();
        let e = eval_loss(&spec, &m, &views).unwrap();
        let t = traced_loss(&spec, &m, &views).unwrap();
        assert_eq!(e.to_bits(), t.loss.to_bits());
    }

    #[test]
    fn resume_from_cache_matches_full_eval() {
        let spec = small_spec();
        let m = build_model(&spec).unwrap();
        let batch = random_batch(&spec, 2, 9);
        let views: Vec<&[u32]> = batch.iter().map(|s| s.as_slice()).collect();
        let (full, cache) = eval_loss_capture(&spec, &m, &views).unwrap();
        for start in 0..=spec.n_layers {
            let resumed = eval_loss_resume(&spec, &m, &views, &cache, start).unwrap();
            assert_eq!(full.to_bits(), resumed.to_bits(), "start layer {start}");
        }
    }

    #[test]
    fn untrained_loss_near_ln_vocab() {
        let spec = ModelSpec::default();
        let m = build_model(&spec).unwrap();
        let batch = random_batch(&spec, 4, 5);
        let views: Vec<&[u32]> = batch.iter().map(|s| s.as_slice()).collect();
        let loss = eval_loss(&spec, &m, &views).unwrap();
        let uniform = (spec.vocab as f64).ln();
        assert!(
            (loss - uniform).abs() / uniform < 0.05,
            "untrained loss {loss} vs ln(vocab) {uniform}"
        );
    }

    #[test]
    fn token_out_of_range_rejected() {
        let spec = small_spec();
        let m = build_model(&spec).unwrap();
        let bad = vec![vec![0u32, 17, 1]];
        let views: Vec<&[u32]> = bad.iter().map(|s| s.as_slice()).collect();
        assert!(matches!(eval_loss(&spec, &m, &views), Err(Error::Input(_))));
    }

    #[test]
    fn overlong_sequence_rejected() {
        let spec = small_spec();
        let m = build_model(&spec).unwrap();
        let long = vec![vec![0u32; spec.seq_len + 1]];
        let views: Vec<&[u32]> = long.iter().map(|s| s.as_slice()).collect();
        assert!(eval_loss(&spec, &m, &views).is_err());
    }

    #[test]
    fn identical_inputs_identical_bits() {
        let spec = small_spec();
        let m = build_model(&spec).unwrap();
        let batch = random_batch(&spec, 2, 1);
        let views: Vec<&[u32]> = batch.iter().map(|s| s.as_slice()).collect();
        let a = eval_loss(&spec, &m, &views).unwrap();
        let b = eval_loss(&spec, &m, &views).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
