//! Plain SGD pretraining on the synthetic corpus.

use super::forward::{eval_loss, traced_loss};
use super::ModelBundle;
use crate::error::Error;
use crate::rng::Rng;
use crate::tensor::tape::grad;
use crate::Result;

const LABEL_BATCH: u64 = 0x7072_6574_7261_0001;
const LABEL_PROBE: u64 = 0x7072_6574_7261_0002;

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 2000, lr: 0.15, batch_size: 8, seq_len: 64, seed: 13 }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainStats {
    /// Loss on a fixed probe batch before any update.
    pub probe_loss_before: f64,
    /// Loss on the same probe batch after the final update.
    pub probe_loss_after: f64,
    pub steps_run: usize,
}

fn sample_batch<'a>(
    corpus: &'a [u32],
    n: usize,
    seq_len: usize,
    rng: &mut Rng,
) -> Vec<&'a [u32]> {
    let max_start = corpus.len() - seq_len;
    (0..n)
        .map(|_| {
            let s = rng.next_below(max_start + 1);
            &corpus[s..s + seq_len]
        })
        .collect()
}

/// SGD with a fixed, seeded batch schedule. Returns the updated bundle and
/// probe losses; errors if a batch loss goes non-finite.
pub fn pretrain(
    bundle: &ModelBundle,
    corpus: &[u32],
    cfg: &PretrainConfig,
) -> Result<(ModelBundle, PretrainStats)> {
    if cfg.seq_len < 2 || cfg.seq_len > bundle.spec.seq_len {
        return Err(Error::config(format!(
            "pretrain seq_len {} out of range 2..={}",
            cfg.seq_len, bundle.spec.seq_len
        )));
    }
    if corpus.len() < cfg.seq_len + 1 {
        return Err(Error::config("corpus shorter than one training sequence".to_string()));
    }
    let mut model = bundle.clone();
    let names: Vec<String> = model.params.keys().cloned().collect();
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();

    let mut probe_rng = Rng::derive(cfg.seed, LABEL_PROBE);
    let probe: Vec<&[u32]> =
        sample_batch(corpus, cfg.batch_size.max(4), cfg.seq_len, &mut probe_rng);
    let probe_loss_before = eval_loss(&model.spec, &model, &probe)?;

    let mut rng = Rng::derive(cfg.seed, LABEL_BATCH);
    for step in 0..cfg.steps {
        let batch = sample_batch(corpus, cfg.batch_size, cfg.seq_len, &mut rng);
        let run = traced_loss(&model.spec, &model, &batch)?;
        if !run.loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss {} at step {step}", run.loss)));
        }
        let grads = grad(&run.tape, run.loss_node, &name_refs)?;
        for (name, g) in &grads {
            let p = model.params.get_mut(name).expect("trained param");
            for (w, gi) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= cfg.lr * gi;
            }
        }
    }

    let probe_loss_after = eval_loss(&model.spec, &model, &probe)?;
    Ok((model, PretrainStats { probe_loss_before, probe_loss_after, steps_run: cfg.steps }))
}
