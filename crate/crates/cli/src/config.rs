//! Run configuration: JSON file merged with command-line overrides.
//! Unknown JSON keys are rejected so typos never silently fall back to
//! defaults; an empty (or absent) file means all defaults.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use scalebits::model::ModelSpec;
use scalebits::quant::QuantConfig;
use scalebits::search::SearchConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // Model architecture.
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Defaults to d_model / n_heads when omitted.
    pub d_head: Option<usize>,
    pub d_ff: usize,
    pub seq_len: usize,
    pub model_seed: u64,

    // Corpus and calibration. A corpus file (raw bytes as tokens, needs
    // vocab = 256) replaces the synthetic stream when given.
    pub corpus_file: Option<String>,
    pub corpus_len: usize,
    pub corpus_seed: u64,
    pub n_calib: usize,
    pub calib_seed: u64,

    // Pretraining.
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub pretrain_seed: u64,

    // Quantizer.
    pub group_size: usize,
    pub bit_min: u8,
    pub bit_max: u8,
    pub symmetric: bool,

    // Layout.
    pub block_rows: usize,
    pub block_cols: usize,
    pub reorder: bool,

    // Sensitivity snapshot (reordering scores).
    pub snapshot_batch: usize,
    pub snapshot_seed: u64,

    // Search.
    pub budget: f64,
    pub budget_sweep: Vec<f64>,
    pub gamma0: f64,
    pub gamma_t: f64,
    pub search_batch: usize,
    pub search_seed: u64,
    pub max_iters: usize,
    pub adaptive_grads: bool,
    pub signed_up: bool,

    // Output.
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            vocab: 256,
            d_model: 64,
            n_layers: 8,
            n_heads: 4,
            d_head: None,
            d_ff: 128,
            seq_len: 64,
            model_seed: 7,
            corpus_file: None,
            corpus_len: 40_000,
            corpus_seed: 11,
            n_calib: 128,
            calib_seed: 5,
            pretrain_steps: 2000,
            pretrain_lr: 2.0,
            pretrain_batch: 4,
            pretrain_seed: 13,
            group_size: 32,
            bit_min: 1,
            bit_max: 8,
            symmetric: false,
            block_rows: 16,
            block_cols: 32,
            reorder: true,
            snapshot_batch: 16,
            snapshot_seed: 23,
            budget: 2.5,
            budget_sweep: Vec::new(),
            gamma0: 0.05,
            gamma_t: 0.02,
            search_batch: 8,
            search_seed: 17,
            max_iters: 200,
            adaptive_grads: true,
            signed_up: true,
            out_dir: "out".to_string(),
        }
    }
}

/// Command-line overrides; every flag mirrors a config key.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long, global = true)]
    pub vocab: Option<usize>,
    #[arg(long, global = true)]
    pub d_model: Option<usize>,
    #[arg(long, global = true)]
    pub n_layers: Option<usize>,
    #[arg(long, global = true)]
    pub n_heads: Option<usize>,
    #[arg(long, global = true)]
    pub d_head: Option<usize>,
    #[arg(long, global = true)]
    pub d_ff: Option<usize>,
    #[arg(long, global = true)]
    pub seq_len: Option<usize>,
    #[arg(long, global = true)]
    pub model_seed: Option<u64>,
    #[arg(long, global = true)]
    pub corpus_file: Option<String>,
    #[arg(long, global = true)]
    pub corpus_len: Option<usize>,
    #[arg(long, global = true)]
    pub corpus_seed: Option<u64>,
    #[arg(long, global = true)]
    pub n_calib: Option<usize>,
    #[arg(long, global = true)]
    pub calib_seed: Option<u64>,
    #[arg(long, global = true)]
    pub pretrain_steps: Option<usize>,
    #[arg(long, global = true)]
    pub pretrain_lr: Option<f64>,
    #[arg(long, global = true)]
    pub pretrain_batch: Option<usize>,
    #[arg(long, global = true)]
    pub pretrain_seed: Option<u64>,
    #[arg(long, global = true)]
    pub group_size: Option<usize>,
    #[arg(long, global = true)]
    pub bit_min: Option<u8>,
    #[arg(long, global = true)]
    pub bit_max: Option<u8>,
    #[arg(long, global = true)]
    pub symmetric: Option<bool>,
    #[arg(long, global = true)]
    pub block_rows: Option<usize>,
    #[arg(long, global = true)]
    pub block_cols: Option<usize>,
    #[arg(long, global = true)]
    pub reorder: Option<bool>,
    #[arg(long, global = true)]
    pub snapshot_batch: Option<usize>,
    #[arg(long, global = true)]
    pub snapshot_seed: Option<u64>,
    #[arg(long, global = true)]
    pub budget: Option<f64>,
    /// Comma-separated budget list for `sweep`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub budget_sweep: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub gamma0: Option<f64>,
    #[arg(long, global = true)]
    pub gamma_t: Option<f64>,
    #[arg(long, global = true)]
    pub search_batch: Option<usize>,
    #[arg(long, global = true)]
    pub search_seed: Option<u64>,
    #[arg(long, global = true)]
    pub max_iters: Option<usize>,
    #[arg(long, global = true)]
    pub adaptive_grads: Option<bool>,
    #[arg(long, global = true)]
    pub signed_up: Option<bool>,
    #[arg(long, global = true)]
    pub out_dir: Option<String>,
}

macro_rules! apply {
    ($cfg:ident, $ov:ident, $($field:ident),+ $(,)?) => {
        $(if let Some(v) = $ov.$field.clone() { $cfg.$field = v; })+
    };
}

impl RunConfig {
    /// Parse the file (empty file = defaults), then apply flag overrides.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let raw = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                if raw.trim().is_empty() {
                    RunConfig::default()
                } else {
                    serde_json::from_str(&raw)
                        .with_context(|| format!("parsing config {}", p.display()))?
                }
            }
        };
        apply!(
            cfg, ov, vocab, d_model, n_layers, n_heads, d_ff, seq_len, model_seed, corpus_len,
            corpus_seed, n_calib, calib_seed, pretrain_steps, pretrain_lr, pretrain_batch,
            pretrain_seed, group_size, bit_min, bit_max, symmetric, block_rows, block_cols,
            reorder, snapshot_batch, snapshot_seed, budget, budget_sweep, gamma0, gamma_t,
            search_batch, search_seed, max_iters, adaptive_grads, signed_up, out_dir
        );
        if let Some(dh) = ov.d_head {
            cfg.d_head = Some(dh);
        }
        if let Some(f) = &ov.corpus_file {
            cfg.corpus_file = Some(f.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec().validate()?;
        self.quant_config().validate()?;
        if self.gamma_t > self.gamma0 {
            bail!("gamma_t {} exceeds gamma0 {}", self.gamma_t, self.gamma0);
        }
        for &b in std::iter::once(&self.budget).chain(&self.budget_sweep) {
            if b < self.bit_min as f64 || b > self.bit_max as f64 {
                bail!("budget {b} outside [{}, {}]", self.bit_min, self.bit_max);
            }
        }
        if self.block_cols % self.group_size != 0 {
            bail!("block_cols {} not a multiple of group_size {}", self.block_cols, self.group_size);
        }
        if self.corpus_file.is_some() && self.vocab != 256 {
            bail!("a byte corpus file needs vocab = 256, got {}", self.vocab);
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            vocab: self.vocab,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_head: self.d_head.unwrap_or(self.d_model / self.n_heads.max(1)),
            d_ff: self.d_ff,
            seq_len: self.seq_len,
            seed: self.model_seed,
        }
    }

    pub fn quant_config(&self) -> QuantConfig {
        QuantConfig {
            group_size: self.group_size,
            bit_min: self.bit_min,
            bit_max: self.bit_max,
            symmetric: self.symmetric,
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            gamma0: self.gamma0,
            gamma_t: self.gamma_t,
            batch_size: self.search_batch,
            max_iters: self.max_iters,
            seed: self.search_seed,
            adaptive_grads: self.adaptive_grads,
            signed_up: self.signed_up,
        }
    }
}
