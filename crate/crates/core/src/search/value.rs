//! Cached quantized-loss value function for greedy search on the toy model.
//!
//! Classic greedy evaluates thousands of single-block candidates against a
//! fixed base assignment. This implementation keeps the base model quantized
//! once per iteration together with its residual-stream cache; a candidate
//! that differs in one block then costs one block requantization plus a
//! forward pass resumed from the changed site's layer.

use std::sync::atomic::{AtomicUsize, Ordering};

use super::ValueFn;
use crate::layout::BlockPartition;
use crate::model::{
    eval_loss, eval_loss_capture, eval_loss_resume, LayerCache, ModelBundle, Overlay,
};
use crate::quant::{quantize_model, quantize_region, requantize_block, QuantConfig, QuantizedModel};
use crate::Result;

pub struct QuantLossFn<'a> {
    model: &'a ModelBundle,
    partition: &'a BlockPartition,
    cfg: &'a QuantConfig,
    batch: Vec<&'a [u32]>,
    base: Vec<u8>,
    base_qm: QuantizedModel,
    cache: LayerCache,
    base_loss: f64,
    evals: AtomicUsize,
}

impl<'a> QuantLossFn<'a> {
    pub fn new(
        model: &'a ModelBundle,
        partition: &'a BlockPartition,
        cfg: &'a QuantConfig,
        batch: Vec<&'a [u32]>,
        init: &[u8],
    ) -> Result<Self> {
        let base_qm = quantize_model(model, partition, init, cfg)?;
        let (base_loss, cache) = eval_loss_capture(&model.spec, &base_qm, &batch)?;
        Ok(QuantLossFn {
            model,
            partition,
            cfg,
            batch,
            base: init.to_vec(),
            base_qm,
            cache,
            base_loss,
            evals: AtomicUsize::new(0),
        })
    }

    pub fn base_loss(&self) -> f64 {
        self.base_loss
    }

    pub fn evaluations(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }

    fn eval_patched(&self, flat: usize, bits: u8) -> f64 {
        let r = self.partition.locate(flat);
        let site = &self.model.sites[r.site];
        let mut patched = self.base_qm.params[&site.name].clone();
        quantize_region(
            self.model.param(&site.name),
            patched.data_mut(),
            site.cols,
            r.row_start,
            r.row_len,
            r.col_start,
            r.col_len,
            bits,
            self.cfg,
        )
        .expect("candidate requantization");
        let overlay = Overlay { base: &self.base_qm, name: &site.name, tensor: &patched };
        eval_loss_resume(&self.model.spec, &overlay, &self.batch, &self.cache, site.layer)
            .expect("candidate evaluation")
    }
}

impl ValueFn for QuantLossFn<'_> {
    fn begin_iteration(&mut self, base: &[u8]) {
        for flat in 0..self.partition.n_blocks {
            if self.base[flat] != base[flat] {
                requantize_block(
                    &mut self.base_qm,
                    self.model,
                    self.partition,
                    flat,
                    base[flat],
                    self.cfg,
                )
                .expect("base requantization");
            }
        }
        self.base = base.to_vec();
        let (loss, cache) =
            eval_loss_capture(&self.model.spec, &self.base_qm, &self.batch)
                .expect("base evaluation");
        self.base_loss = loss;
        self.cache = cache;
    }

    fn eval(&self, b: &[u8]) -> f64 {
        self.evals.fetch_add(1, Ordering::Relaxed);
        let diffs: Vec<usize> =
            (0..b.len()).filter(|&i| b[i] != self.base[i]).collect();
        match diffs.len() {
            0 => self.base_loss,
            1 => self.eval_patched(diffs[0], b[diffs[0]]),
            _ => {
                let qm = quantize_model(self.model, self.partition, b, self.cfg)
                    .expect("full quantization");
                eval_loss(&self.model.spec, &qm, &self.batch).expect("full evaluation")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::partition_weights;
    use crate::model::{build_model, ModelSpec};
    use crate::rng::Rng;

    #[test]
    fn patched_eval_matches_full_requantization() {
        let spec = ModelSpec {
            vocab: 32,
            d_model: 16,
            n_layers: 3,
            n_heads: 2,
            d_head: 8,
            d_ff: 32,
            seq_len: 12,
            seed: 2,
        };
        let model = build_model(&spec).unwrap();
        let part = partition_weights(&model, 8, 8, 8).unwrap();
        let cfg = QuantConfig { group_size: 8, ..QuantConfig::default() };
        let mut rng = Rng::new(4);
        let batch: Vec<Vec<u32>> = (0..2)
            .map(|_| (0..12).map(|_| rng.next_below(32) as u32).collect())
            .collect();
        let views: Vec<&[u32]> = batch.iter().map(|s| s.as_slice()).collect();

        let base = vec![2u8; part.n_blocks];
        let f = QuantLossFn::new(&model, &part, &cfg, views.clone(), &base).unwrap();

        for flat in [0usize, 7, part.n_blocks / 2, part.n_blocks - 1] {
            let mut probe = base.clone();
            probe[flat] = 5;
            let fast = f.eval(&probe);
            let qm = quantize_model(&model, &part, &probe, &cfg).unwrap();
            let slow = eval_loss(&spec, &qm, &views).unwrap();
            assert_eq!(fast.to_bits(), slow.to_bits(), "block {flat}");
        }
        // Unchanged assignment returns the cached base loss.
        assert_eq!(f.eval(&base).to_bits(), f.base_loss().to_bits());
        assert_eq!(f.evaluations(), 5);
    }

    #[test]
    fn begin_iteration_moves_the_base() {
        let spec = ModelSpec {
            vocab: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_head: 4,
            d_ff: 16,
            seq_len: 8,
            seed: 3,
        };
        let model = build_model(&spec).unwrap();
        let part = partition_weights(&model, 4, 4, 4).unwrap();
        let cfg = QuantConfig { group_size: 4, ..QuantConfig::default() };
        let mut rng = Rng::new(9);
        let batch: Vec<Vec<u32>> =
            (0..2).map(|_| (0..8).map(|_| rng.next_below(16) as u32).collect()).collect();
        let views: Vec<&[u32]> = batch.iter().map(|s| s.as_slice()).collect();

        let base = vec![1u8; part.n_blocks];
        let mut f = QuantLossFn::new(&model, &part, &cfg, views.clone(), &base).unwrap();
        let mut next = base.clone();
        next[3] = 2;
        next[10] = 2;
        f.begin_iteration(&next);
        let qm = quantize_model(&model, &part, &next, &cfg).unwrap();
        let want = eval_loss(&spec, &qm, &views).unwrap();
        assert_eq!(f.base_loss().to_bits(), want.to_bits());
    }
}
