//! Pipeline stages and artifact management.
//!
//! Every stage writes an individually addressable artifact so later
//! subcommands (sweeps, ablations, report regeneration) can reuse upstream
//! results instead of re-running them. All artifacts are deterministic
//! functions of the config.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};

use scalebits::export;
use scalebits::layout::{
    apply_permutations, compute_permutations, partition_weights, BlockPartition, PermutationSet,
};
use scalebits::model::{
    bundle_from_params, build_model, checkpoint, eval_loss, make_calibration, make_corpus,
    pretrain, CalibrationSet, ModelBundle, PretrainConfig, PretrainStats,
};
use scalebits::quant::{
    effective_bits, pack::dequant_packed, pack::load_packed, pack::pack_model, pack::save_packed,
    quantize_model, QuantizedModel,
};
use scalebits::rng::Rng;
use scalebits::search::{scalable_greedy, SearchTrace};
use scalebits::sensitivity::{element_sensitivity, quantize_uniform};

use crate::config::RunConfig;
use crate::report::{emit_report_files, RunReport};

pub struct Paths {
    pub dir: PathBuf,
}

impl Paths {
    pub fn new(dir: &str) -> Self {
        Paths { dir: PathBuf::from(dir) }
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.json")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }
    pub fn reordered(&self) -> PathBuf {
        self.dir.join("reordered.bin")
    }
    pub fn permutations(&self) -> PathBuf {
        self.dir.join("permutations.json")
    }
    pub fn trace(&self) -> PathBuf {
        self.dir.join("trace.jsonl")
    }
    pub fn assignment(&self) -> PathBuf {
        self.dir.join("assignment.csv")
    }
    pub fn packed(&self) -> PathBuf {
        self.dir.join("packed.sbit")
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.json")
    }
    pub fn sweep(&self) -> PathBuf {
        self.dir.join("sweep.csv")
    }
    pub fn snapshot(&self) -> PathBuf {
        self.dir.join("snapshot.csv")
    }
    pub fn heatmaps(&self) -> PathBuf {
        self.dir.join("heatmaps")
    }
}

pub struct BuildOutputs {
    pub model: ModelBundle,
    pub corpus: Vec<u32>,
    pub calibration: CalibrationSet,
}

pub fn stage_build(cfg: &RunConfig) -> Result<BuildOutputs> {
    let spec = cfg.model_spec();
    let model = build_model(&spec).context("stage build: model")?;
    let corpus = match &cfg.corpus_file {
        Some(path) => {
            // Raw bytes as tokens over the 256-symbol vocabulary.
            let bytes = fs::read(path).with_context(|| format!("stage build: reading {path}"))?;
            bytes.into_iter().map(u32::from).collect()
        }
        None => {
            make_corpus(cfg.vocab, cfg.corpus_len, cfg.corpus_seed).context("stage build: corpus")?
        }
    };
    let calibration = make_calibration(&corpus, cfg.n_calib, cfg.seq_len, cfg.calib_seed)
        .context("stage build: calibration")?;
    Ok(BuildOutputs { model, corpus, calibration })
}

pub fn stage_pretrain(
    cfg: &RunConfig,
    paths: &Paths,
    built: &BuildOutputs,
) -> Result<(ModelBundle, PretrainStats)> {
    let pcfg = PretrainConfig {
        steps: cfg.pretrain_steps,
        lr: cfg.pretrain_lr,
        batch_size: cfg.pretrain_batch,
        seq_len: cfg.seq_len,
        seed: cfg.pretrain_seed,
    };
    let (trained, stats) =
        pretrain(&built.model, &built.corpus, &pcfg).context("stage pretrain")?;
    fs::create_dir_all(&paths.dir)?;
    checkpoint::save_checkpoint(&paths.checkpoint(), &trained.params)
        .context("stage pretrain: checkpoint")?;
    Ok((trained, stats))
}

/// Load the pretrained model saved by `stage_pretrain`.
pub fn load_trained(cfg: &RunConfig, paths: &Paths) -> Result<ModelBundle> {
    let params = checkpoint::load_checkpoint(&paths.checkpoint())
        .with_context(|| format!("loading {}", paths.checkpoint().display()))?;
    Ok(bundle_from_params(&cfg.model_spec(), params)?)
}

pub struct SearchOutputs {
    pub reordered: ModelBundle,
    pub partition: BlockPartition,
    pub assignment: Vec<u8>,
    pub trace: SearchTrace,
    pub quantized: QuantizedModel,
}

/// Warm-start snapshot, reordering, partitioning, search, and packing.
pub fn run_search_stages(
    cfg: &RunConfig,
    paths: &Paths,
    trained: &ModelBundle,
    calibration: &CalibrationSet,
) -> Result<SearchOutputs> {
    let qcfg = cfg.quant_config();
    let warm = (cfg.budget.floor() as u8).clamp(cfg.bit_min, cfg.bit_max);

    // Sensitivity snapshot at the warm-start quantized model, then
    // bi-directional reordering (a one-time preprocessing step).
    let perms = if cfg.reorder {
        let partition = partition_weights(trained, cfg.block_rows, cfg.block_cols, cfg.group_size)
            .context("stage snapshot: partition")?;
        let warm_q = quantize_uniform(trained, &partition, warm, &qcfg)
            .context("stage snapshot: quantize")?;
        let mut rng = Rng::derive(cfg.snapshot_seed, 0x736e_6170);
        let ids = calibration.sample_ids(cfg.snapshot_batch, &mut rng);
        let batch = calibration.batch(&ids);
        let sens =
            element_sensitivity(trained, &warm_q, &batch).context("stage snapshot: sensitivity")?;
        compute_permutations(trained, &sens).context("stage reorder: permutations")?
    } else {
        let groups = scalebits::model::coupling_graph(trained);
        PermutationSet::identity(&groups)
    };
    let reordered = apply_permutations(trained, &perms).context("stage reorder: apply")?;

    fs::create_dir_all(&paths.dir)?;
    let f = fs::File::create(paths.permutations())?;
    export::write_permutations_json(f, &perms).context("stage reorder: sidecar")?;
    checkpoint::save_checkpoint(&paths.reordered(), &reordered.params)
        .context("stage reorder: checkpoint")?;

    let partition = partition_weights(&reordered, cfg.block_rows, cfg.block_cols, cfg.group_size)
        .context("stage partition")?;

    // Warm-start block surrogates, exported for inspection.
    {
        let warm_assign = vec![warm; partition.n_blocks];
        let warm_q = quantize_uniform(&reordered, &partition, warm, &qcfg)
            .context("stage snapshot: warm quantize")?;
        let mut rng = Rng::derive(cfg.snapshot_seed, 0x7570_646f_776e);
        let ids = calibration.sample_ids(cfg.snapshot_batch, &mut rng);
        let batch = calibration.batch(&ids);
        let grads = scalebits::sensitivity::site_grads(&reordered, &warm_q, &batch)
            .context("stage snapshot: gradients")?;
        let (s_up, s_down) = scalebits::sensitivity::block_updown(
            &grads, &reordered, &warm_q, &partition, &warm_assign, &qcfg,
        )
        .context("stage snapshot: surrogates")?;
        let snap = scalebits::sensitivity::SensitivitySnapshot {
            iteration: 0,
            batch_id: 0,
            site_sens: Default::default(),
            s_up,
            s_down,
        };
        let f = fs::File::create(paths.snapshot())?;
        export::write_snapshot_csv(f, &snap, &warm_assign).context("stage snapshot: csv")?;
    }

    let (assignment, trace) = scalable_greedy(
        &reordered,
        &partition,
        calibration,
        cfg.budget,
        &qcfg,
        &cfg.search_config(),
    )
    .context("stage search")?;
    let f = fs::File::create(paths.trace())?;
    export::write_trace_jsonl(f, &trace).context("stage search: trace")?;
    let f = fs::File::create(paths.assignment())?;
    export::write_assignment_csv(f, &partition, &assignment)
        .context("stage search: assignment")?;

    let quantized = quantize_model(&reordered, &partition, &assignment, &qcfg)
        .context("stage pack: quantize")?;
    let packed = pack_model(&quantized, &partition).context("stage pack")?;
    save_packed(&paths.packed(), &packed).context("stage pack: write")?;

    Ok(SearchOutputs { reordered, partition, assignment, trace, quantized })
}

/// Evaluate losses and write the report plus figure files.
pub fn stage_evaluate_and_report(
    cfg: &RunConfig,
    paths: &Paths,
    calibration: &CalibrationSet,
    out: &SearchOutputs,
) -> Result<RunReport> {
    let spec = cfg.model_spec();
    let qcfg = cfg.quant_config();
    let warm = (cfg.budget.floor() as u8).clamp(cfg.bit_min, cfg.bit_max);
    let all = calibration.all();

    let loss_full = eval_loss(&spec, &out.reordered, &all).context("stage evaluate: fp loss")?;
    let warm_q = quantize_uniform(&out.reordered, &out.partition, warm, &qcfg)
        .context("stage evaluate: warm quantize")?;
    let loss_warm = eval_loss(&spec, &warm_q, &all).context("stage evaluate: warm loss")?;
    let loss_final =
        eval_loss(&spec, &out.quantized, &all).context("stage evaluate: final loss")?;

    // Independent re-evaluation straight from the packed artifact.
    let packed = load_packed(&paths.packed()).context("stage evaluate: load packed")?;
    let mut packed_params = out.reordered.params.clone();
    for (site, pt) in out.reordered.sites.iter().zip(&packed) {
        packed_params.insert(site.name.clone(), dequant_packed(pt)?);
    }
    let loss_packed =
        eval_loss(&spec, &packed_params, &all).context("stage evaluate: packed loss")?;

    let report = RunReport::assemble(
        cfg,
        calibration,
        out,
        loss_full,
        loss_warm,
        loss_final,
        loss_packed,
    )
    .context("stage report: assemble")?;
    emit_report_files(cfg, paths, &report, out).context("stage report: emit")?;
    Ok(report)
}

pub fn write_config_echo(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    fs::create_dir_all(&paths.dir)?;
    let f = fs::File::create(paths.config())?;
    serde_json::to_writer_pretty(f, cfg).context("writing config echo")?;
    Ok(())
}

/// Budget sweep: pretrain once, then run the search stages per budget in a
/// sub-directory. Writes (budget, loss) rows to sweep.csv.
pub fn run_sweep(cfg: &RunConfig, budgets: &[f64]) -> Result<Vec<(f64, f64)>> {
    let paths = Paths::new(&cfg.out_dir);
    fs::create_dir_all(&paths.dir)?;
    write_config_echo(cfg, &paths)?;
    let built = stage_build(cfg)?;
    let (trained, _) = stage_pretrain(cfg, &paths, &built)?;

    let mut rows = Vec::new();
    for &budget in budgets {
        let mut sub = cfg.clone();
        sub.budget = budget;
        sub.out_dir = paths.dir.join(format!("sweep_b{budget}")).display().to_string();
        let sub_paths = Paths::new(&sub.out_dir);
        fs::create_dir_all(&sub_paths.dir)?;
        write_config_echo(&sub, &sub_paths)?;
        let out = run_search_stages(&sub, &sub_paths, &trained, &built.calibration)?;
        let report = stage_evaluate_and_report(&sub, &sub_paths, &built.calibration, &out)?;
        rows.push((budget, report.loss_final));
    }
    let mut csv = String::from("budget,loss\n");
    for (b, l) in &rows {
        csv.push_str(&format!("{b},{l}\n"));
    }
    fs::write(paths.sweep(), csv)?;
    Ok(rows)
}

/// Recompute the report purely from stored artifacts (no search).
pub fn regenerate_report(cfg: &RunConfig, paths: &Paths) -> Result<RunReport> {
    let spec = cfg.model_spec();
    let built = stage_build(cfg)?;
    let reordered_params = checkpoint::load_checkpoint(&paths.reordered())
        .with_context(|| format!("loading {}", paths.reordered().display()))?;
    let reordered = bundle_from_params(&spec, reordered_params)?;
    // Validate the sidecar parses even though the reordered checkpoint
    // already carries the permuted weights.
    let _perms = export::read_permutations_json(fs::File::open(paths.permutations())?)?;
    let partition = partition_weights(&reordered, cfg.block_rows, cfg.block_cols, cfg.group_size)?;

    let packed = load_packed(&paths.packed())?;
    let mut assignment = vec![0u8; partition.n_blocks];
    for (site, pt) in reordered.sites.iter().zip(&packed) {
        for (local, flat) in partition.site_blocks(site.id).enumerate() {
            assignment[flat] = pt.block_bits[local];
        }
    }
    let trace_raw = fs::read_to_string(paths.trace())?;
    let records: Vec<scalebits::search::TraceRecord> = trace_raw
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()
        .context("parsing trace.jsonl")?;
    let trace = SearchTrace {
        records,
        final_assignment: assignment.clone(),
        budget_bits: scalebits::search::budget_weight_bits(cfg.budget, partition.total_weights),
        converged_early: false,
        saturated: false,
        wall_secs: 0.0,
    };
    let quantized = quantize_model(&reordered, &partition, &assignment, &cfg.quant_config())?;
    let out = SearchOutputs { reordered, partition, assignment, trace, quantized };
    stage_evaluate_and_report(cfg, paths, &built.calibration, &out)
}

/// Per-layer and per-projection element-weighted average bits.
pub fn bits_by_layer_and_proj(
    model: &ModelBundle,
    partition: &BlockPartition,
    assignment: &[u8],
) -> (Vec<f64>, BTreeMap<String, f64>) {
    let n_layers = model.spec.n_layers;
    let mut layer_bits = vec![0u64; n_layers];
    let mut layer_elems = vec![0u64; n_layers];
    let mut proj_bits: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for site in &model.sites {
        for flat in partition.site_blocks(site.id) {
            let m = partition.block_elems[flat] as u64;
            let bits = assignment[flat] as u64 * m;
            layer_bits[site.layer] += bits;
            layer_elems[site.layer] += m;
            let e = proj_bits.entry(site.proj.suffix().to_string()).or_insert((0, 0));
            e.0 += bits;
            e.1 += m;
        }
    }
    let per_layer = layer_bits
        .iter()
        .zip(&layer_elems)
        .map(|(&b, &m)| b as f64 / m as f64)
        .collect();
    let per_proj = proj_bits
        .into_iter()
        .map(|(k, (b, m))| (k, b as f64 / m as f64))
        .collect();
    (per_layer, per_proj)
}

/// Effective-bits pair for one assignment.
pub fn effective_pair(
    cfg: &RunConfig,
    partition: &BlockPartition,
    assignment: &[u8],
) -> (f64, f64) {
    let eb = effective_bits(assignment, partition, &cfg.quant_config());
    (eb.weight_bits_avg, eb.total_bits_avg)
}

/// Path of the trained checkpoint, for commands that need it to exist.
pub fn require_checkpoint(paths: &Paths) -> Result<&Paths> {
    if !paths.checkpoint().exists() {
        anyhow::bail!(
            "no checkpoint at {}; run `scalebits pretrain` first",
            paths.checkpoint().display()
        );
    }
    Ok(paths)
}
