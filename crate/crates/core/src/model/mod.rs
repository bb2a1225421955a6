//! Deterministic toy decoder transformer: architecture spec, parameter
//! bundle, synthetic corpus, pretraining, forward/loss evaluation, and the
//! channel-coupling graph that constrains reordering.

pub mod checkpoint;
pub mod corpus;
pub mod coupling;
pub mod forward;
pub mod pretrain;

pub use corpus::{make_calibration, make_corpus, CalibrationSet};
pub use coupling::{coupling_graph, Axis, CouplingGroup, GroupKind, GroupMember};
pub use forward::{
    eval_loss, eval_loss_capture, eval_loss_resume, traced_loss, LayerCache, TracedRun,
};
pub use pretrain::{pretrain, PretrainConfig, PretrainStats};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Result;

/// Architecture description. Two equal specs always build bitwise-identical
/// bundles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            vocab: 256,
            d_model: 64,
            n_layers: 8,
            n_heads: 4,
            d_head: 16,
            d_ff: 128,
            seq_len: 64,
            seed: 7,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("seq_len", self.seq_len),
        ] {
            if v < 1 {
                return Err(Error::config(format!("{what} must be >= 1, got {v}")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_head * self.n_heads != self.d_model {
            return Err(Error::config(format!(
                "d_head {} * n_heads {} != d_model {}",
                self.d_head, self.n_heads, self.d_model
            )));
        }
        Ok(())
    }
}

/// Which projection a quantizable site is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjKind {
    Q,
    K,
    V,
    O,
    Up,
    Gate,
    Down,
}

impl ProjKind {
    pub const ALL: [ProjKind; 7] = [
        ProjKind::Q,
        ProjKind::K,
        ProjKind::V,
        ProjKind::O,
        ProjKind::Up,
        ProjKind::Gate,
        ProjKind::Down,
    ];

    pub fn suffix(&self) -> &'static str {
        match self {
            ProjKind::Q => "q",
            ProjKind::K => "k",
            ProjKind::V => "v",
            ProjKind::O => "o",
            ProjKind::Up => "up",
            ProjKind::Gate => "gate",
            ProjKind::Down => "down",
        }
    }
}

/// One quantizable weight matrix. Ids are dense, 0..S-1, stable for a spec.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearSite {
    pub id: usize,
    pub name: String,
    pub layer: usize,
    pub proj: ProjKind,
    /// Output channels.
    pub rows: usize,
    /// Input channels.
    pub cols: usize,
}

/// Parameter lookup abstraction so a forward pass can run against the raw
/// bundle, a quantized parameter set, or a one-site override without copying
/// the whole model.
pub trait ParamLookup {
    fn tensor(&self, name: &str) -> Option<&Tensor>;
}

impl ParamLookup for BTreeMap<String, Tensor> {
    fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

/// A parameter set with exactly one tensor replaced.
pub struct Overlay<'a, P: ParamLookup> {
    pub base: &'a P,
    pub name: &'a str,
    pub tensor: &'a Tensor,
}

impl<P: ParamLookup> ParamLookup for Overlay<'_, P> {
    fn tensor(&self, name: &str) -> Option<&Tensor> {
        if name == self.name {
            Some(self.tensor)
        } else {
            self.base.tensor(name)
        }
    }
}

/// Toy decoder parameters plus the list of quantizable linear sites.
/// Embedding, head, and norm gains are never quantized.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub spec: ModelSpec,
    pub params: BTreeMap<String, Tensor>,
    pub sites: Vec<LinearSite>,
}

impl ParamLookup for ModelBundle {
    fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }
}

pub fn param_name(layer: usize, proj: ProjKind) -> String {
    format!("layer{layer}.{}", proj.suffix())
}

impl ModelBundle {
    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    /// Names of every trainable parameter, in map order.
    pub fn param_names(&self) -> Vec<&str> {
        self.params.keys().map(|s| s.as_str()).collect()
    }

    /// FNV-1a over all parameter bytes; used in determinism tests.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, t) in &self.params {
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            for v in t.data() {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Rebuild a bundle around externally loaded parameters (e.g. a checkpoint),
/// validating that every expected tensor is present with the right shape.
pub fn bundle_from_params(
    spec: &ModelSpec,
    params: BTreeMap<String, Tensor>,
) -> Result<ModelBundle> {
    let reference = build_model(spec)?;
    for (name, t) in &reference.params {
        let got = params
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("checkpoint missing parameter {name}")))?;
        if got.shape() != t.shape() {
            return Err(Error::shape(format!(
                "checkpoint parameter {name} has shape {:?}, expected {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if params.len() != reference.params.len() {
        return Err(Error::contract(format!(
            "checkpoint has {} tensors, spec implies {}",
            params.len(),
            reference.params.len()
        )));
    }
    Ok(ModelBundle { spec: spec.clone(), params, sites: reference.sites })
}

/// Dimensions of a projection kind for a spec.
pub fn proj_dims(spec: &ModelSpec, proj: ProjKind) -> (usize, usize) {
    let d = spec.d_model;
    let f = spec.d_ff;
    match proj {
        ProjKind::Q | ProjKind::K | ProjKind::V | ProjKind::O => (d, d),
        ProjKind::Up | ProjKind::Gate => (f, d),
        ProjKind::Down => (d, f),
    }
}

/// Build a bundle with seeded scaled-normal init. Deterministic in the spec.
pub fn build_model(spec: &ModelSpec) -> Result<ModelBundle> {
    spec.validate()?;
    let mut rng = Rng::derive(spec.seed, 0x6d6f64656c); // "model"
    let mut params = BTreeMap::new();

    let normal_tensor = |rng: &mut Rng, rows: usize, cols: usize, std: f64| {
        let data: Vec<f64> = (0..rows * cols).map(|_| std * rng.next_normal()).collect();
        Tensor::new(vec![rows, cols], data).expect("init shape")
    };

    // Small embedding/head init keeps initial logits near zero, so the
    // untrained loss sits near ln(vocab).
    params.insert(
        "embedding".to_string(),
        normal_tensor(&mut rng, spec.vocab, spec.d_model, 0.02),
    );

    let mut sites = Vec::new();
    for layer in 0..spec.n_layers {
        for proj in ProjKind::ALL {
            let (rows, cols) = proj_dims(spec, proj);
            let std = 1.0 / (cols as f64).sqrt();
            let name = param_name(layer, proj);
            params.insert(name.clone(), normal_tensor(&mut rng, rows, cols, std));
            sites.push(LinearSite { id: sites.len(), name, layer, proj, rows, cols });
        }
        params.insert(
            format!("layer{layer}.norm_attn"),
            Tensor::new(vec![spec.d_model], vec![1.0; spec.d_model])?,
        );
        params.insert(
            format!("layer{layer}.norm_mlp"),
            Tensor::new(vec![spec.d_model], vec![1.0; spec.d_model])?,
        );
    }
    params.insert(
        "final_norm".to_string(),
        Tensor::new(vec![spec.d_model], vec![1.0; spec.d_model])?,
    );
    params.insert("head".to_string(), normal_tensor(&mut rng, spec.vocab, spec.d_model, 0.02));

    Ok(ModelBundle { spec: spec.clone(), params, sites })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_has_56_sites() {
        let m = build_model(&ModelSpec::default()).unwrap();
        assert_eq!(m.sites.len(), 56); // 8 layers x 7 projections
        for (i, s) in m.sites.iter().enumerate() {
            assert_eq!(s.id, i);
            assert_eq!(m.params[&s.name].shape(), &[s.rows, s.cols]);
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let spec = ModelSpec { d_model: 65, ..ModelSpec::default() };
        assert!(build_model(&spec).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_model(&ModelSpec::default()).unwrap();
        let b = build_model(&ModelSpec::default()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = build_model(&ModelSpec { seed: 8, ..ModelSpec::default() }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn non_quantizable_params_not_in_sites() {
        let m = build_model(&ModelSpec::default()).unwrap();
        for s in &m.sites {
            assert!(!s.name.contains("norm"));
            assert_ne!(s.name, "embedding");
            assert_ne!(s.name, "head");
        }
    }
}
