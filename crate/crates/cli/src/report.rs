//! Run report assembly and figure-data emission.

use std::collections::BTreeMap;
use std::fs;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use scalebits::export;
use scalebits::model::CalibrationSet;
use scalebits::rng::Rng;
use scalebits::sensitivity::{
    element_sensitivity, first_order_sensitivity, quantize_uniform, site_grads, Component,
};
use scalebits::tensor::Tensor;

use crate::config::RunConfig;
use crate::pipeline::{bits_by_layer_and_proj, effective_pair, Paths, SearchOutputs};

/// Everything a run produced, in one JSON document. Every number here is
/// recomputable from the serialized artifacts alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub n_blocks: usize,
    pub effective_weight_bits: f64,
    pub effective_total_bits: f64,
    pub loss_full_precision: f64,
    pub loss_uniform_warm: f64,
    pub loss_final: f64,
    pub loss_packed_reeval: f64,
    pub per_layer_bits: Vec<f64>,
    pub per_proj_bits: BTreeMap<String, f64>,
    /// Estimated layer sensitivity at the warm-start uniform model.
    pub layer_sens_uniform: Vec<f64>,
    /// Estimated layer sensitivity at the final mixed-precision model.
    pub layer_sens_final: Vec<f64>,
    pub trace_iterations: usize,
    pub trace_accepted: usize,
    pub trace_rejected: usize,
}

impl RunReport {
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        cfg: &RunConfig,
        calibration: &CalibrationSet,
        out: &SearchOutputs,
        loss_full: f64,
        loss_warm: f64,
        loss_final: f64,
        loss_packed: f64,
    ) -> Result<RunReport> {
        let qcfg = cfg.quant_config();
        let warm = (cfg.budget.floor() as u8).clamp(cfg.bit_min, cfg.bit_max);
        let (w_bits, t_bits) = effective_pair(cfg, &out.partition, &out.assignment);
        let (per_layer_bits, per_proj_bits) =
            bits_by_layer_and_proj(&out.reordered, &out.partition, &out.assignment);

        // Layer sensitivity before/after, estimated first-order around each
        // quantized model on a fixed snapshot batch.
        let mut rng = Rng::derive(cfg.snapshot_seed, 0x7265_706f_7274);
        let ids = calibration.sample_ids(cfg.snapshot_batch, &mut rng);
        let batch = calibration.batch(&ids);
        let warm_q = quantize_uniform(&out.reordered, &out.partition, warm, &qcfg)?;
        let grads_warm = site_grads(&out.reordered, &warm_q, &batch)?;
        let grads_final = site_grads(&out.reordered, &out.quantized, &batch)?;
        let mut layer_sens_uniform = Vec::with_capacity(cfg.n_layers);
        let mut layer_sens_final = Vec::with_capacity(cfg.n_layers);
        for layer in 0..cfg.n_layers {
            layer_sens_uniform.push(first_order_sensitivity(
                &grads_warm,
                &out.reordered,
                &warm_q,
                &out.partition,
                &Component::Layer(layer),
            )?);
            layer_sens_final.push(first_order_sensitivity(
                &grads_final,
                &out.reordered,
                &out.quantized,
                &out.partition,
                &Component::Layer(layer),
            )?);
        }

        let accepted = out.trace.records.iter().filter(|r| r.accepted).count();
        Ok(RunReport {
            config: cfg.clone(),
            n_blocks: out.partition.n_blocks,
            effective_weight_bits: w_bits,
            effective_total_bits: t_bits,
            loss_full_precision: loss_full,
            loss_uniform_warm: loss_warm,
            loss_final,
            loss_packed_reeval: loss_packed,
            per_layer_bits,
            per_proj_bits,
            layer_sens_uniform,
            layer_sens_final,
            trace_iterations: out.trace.records.len(),
            trace_accepted: accepted,
            trace_rejected: out.trace.records.len() - accepted,
        })
    }
}

/// Write report.json, the figure CSVs, and per-site heatmaps.
pub fn emit_report_files(
    cfg: &RunConfig,
    paths: &Paths,
    report: &RunReport,
    out: &SearchOutputs,
) -> Result<()> {
    let f = fs::File::create(paths.report())?;
    serde_json::to_writer_pretty(f, report).context("writing report.json")?;

    let mut layer_csv = String::from("layer,avg_bits,sens_uniform,sens_final\n");
    for layer in 0..cfg.n_layers {
        layer_csv.push_str(&format!(
            "{layer},{},{},{}\n",
            report.per_layer_bits[layer],
            report.layer_sens_uniform[layer],
            report.layer_sens_final[layer]
        ));
    }
    fs::write(paths.dir.join("layer_bits.csv"), layer_csv)?;

    let mut proj_csv = String::from("proj,avg_bits\n");
    for (proj, bits) in &report.per_proj_bits {
        proj_csv.push_str(&format!("{proj},{bits}\n"));
    }
    fs::write(paths.dir.join("proj_bits.csv"), proj_csv)?;

    emit_heatmaps(cfg, paths, out).context("writing heatmaps")?;
    Ok(())
}

/// Per-site heatmaps: element sensitivity of the (reordered) warm-start
/// model, and the block bit-allocation grid; each as PGM plus a CSV twin.
pub fn emit_heatmaps(cfg: &RunConfig, paths: &Paths, out: &SearchOutputs) -> Result<()> {
    let dir = paths.heatmaps();
    fs::create_dir_all(&dir)?;
    let qcfg = cfg.quant_config();
    let warm = (cfg.budget.floor() as u8).clamp(cfg.bit_min, cfg.bit_max);
    // Built lazily: sensitivity needs one traced backward pass.
    let warm_q = quantize_uniform(&out.reordered, &out.partition, warm, &qcfg)?;
    let built = crate::pipeline::stage_build(cfg)?;
    let mut rng = Rng::derive(cfg.snapshot_seed, 0x6865_6174);
    let ids = built.calibration.sample_ids(cfg.snapshot_batch, &mut rng);
    let batch = built.calibration.batch(&ids);
    let sens = element_sensitivity(&out.reordered, &warm_q, &batch)?;

    for site in &out.reordered.sites {
        let tag = format!("site{:02}_{}", site.id, site.name.replace('.', "_"));
        let s = &sens[&site.name];
        let px = export::sensitivity_pixels(s);
        let f = fs::File::create(dir.join(format!("{tag}_sens.pgm")))?;
        export::write_pgm(f, s.cols(), s.rows(), &px)?;
        let f = fs::File::create(dir.join(format!("{tag}_sens.csv")))?;
        export::write_matrix_csv(f, s)?;

        let (bits, gw, gh) = export::site_bits_grid(&out.partition, &out.assignment, site.id);
        let px = export::bits_pixels(&bits, cfg.bit_max);
        let f = fs::File::create(dir.join(format!("{tag}_bits.pgm")))?;
        export::write_pgm(f, gw, gh, &px)?;
        let grid = Tensor::new(vec![gh, gw], bits.iter().map(|&b| b as f64).collect())
            .expect("grid shape");
        let f = fs::File::create(dir.join(format!("{tag}_bits.csv")))?;
        export::write_matrix_csv(f, &grid)?;
    }
    Ok(())
}
