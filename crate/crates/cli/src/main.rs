//! Command-line driver for the mixed-precision quantization lab.

mod config;
mod pipeline;
mod report;
mod selftest;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use scalebits::layout::partition_weights;
use scalebits::model::eval_loss;
use scalebits::quant::pack::{pack_model, save_packed};
use scalebits::quant::quantize_model;
use scalebits::search::oracle::lattice_probe;
use scalebits::sensitivity::quantize_uniform;

use config::{Overrides, RunConfig};
use pipeline::Paths;

#[derive(Parser)]
#[command(
    name = "scalebits",
    about = "Block-wise mixed-precision quantization lab: pretrain a toy decoder, reorder channels by sensitivity, search per-block bitwidths under a budget, pack and evaluate."
)]
struct Cli {
    /// JSON config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the toy model and corpus, pretrain, and save the checkpoint.
    Pretrain,
    /// Uniform-precision quantization of the pretrained checkpoint.
    Quantize {
        /// Uniform bitwidth; defaults to floor(budget).
        #[arg(long)]
        bits: Option<u8>,
    },
    /// Full pipeline: pretrain (or reuse checkpoint), reorder, search, pack,
    /// evaluate, report.
    Search,
    /// Run the search at several budgets and emit a (budget, loss) table.
    Sweep,
    /// Regenerate report.json and figure CSVs from stored artifacts.
    Report,
    /// Monotonicity / diminishing-returns probes on layer-wise assignments.
    Probe {
        #[arg(long, default_value_t = 5)]
        chains: usize,
        #[arg(long, default_value_t = 8)]
        chain_len: usize,
        #[arg(long, default_value_t = 2)]
        bit_lo: u8,
        #[arg(long, default_value_t = 4)]
        bit_hi: u8,
    },
    /// Quick oracle suites: kernels, gradients, greedy bound, packing.
    Selftest,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let paths = Paths::new(&cfg.out_dir);
    match cli.command {
        Command::Pretrain => cmd_pretrain(&cfg, &paths),
        Command::Quantize { bits } => cmd_quantize(&cfg, &paths, bits),
        Command::Search => cmd_search(&cfg, &paths),
        Command::Sweep => cmd_sweep(&cfg),
        Command::Report => cmd_report(&cfg, &paths),
        Command::Probe { chains, chain_len, bit_lo, bit_hi } => {
            cmd_probe(&cfg, &paths, chains, chain_len, bit_lo, bit_hi)
        }
        Command::Selftest => selftest::run(),
    }
}

fn cmd_pretrain(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    pipeline::write_config_echo(cfg, paths)?;
    let built = pipeline::stage_build(cfg)?;
    let (_, stats) = pipeline::stage_pretrain(cfg, paths, &built)?;
    println!(
        "pretrained {} steps: probe loss {:.4} -> {:.4}",
        stats.steps_run, stats.probe_loss_before, stats.probe_loss_after
    );
    println!("checkpoint: {}", paths.checkpoint().display());
    Ok(())
}

fn cmd_quantize(cfg: &RunConfig, paths: &Paths, bits: Option<u8>) -> Result<()> {
    pipeline::require_checkpoint(paths)?;
    let trained = pipeline::load_trained(cfg, paths)?;
    let built = pipeline::stage_build(cfg)?;
    let bits = bits.unwrap_or((cfg.budget.floor() as u8).clamp(cfg.bit_min, cfg.bit_max));
    if bits != 0 && !(cfg.bit_min..=cfg.bit_max).contains(&bits) {
        bail!("bits {bits} outside 0 or {}..={}", cfg.bit_min, cfg.bit_max);
    }
    let partition = partition_weights(&trained, cfg.block_rows, cfg.block_cols, cfg.group_size)?;
    let qcfg = cfg.quant_config();
    let qm = quantize_uniform(&trained, &partition, bits, &qcfg)?;
    let packed = pack_model(&qm, &partition)?;
    save_packed(&paths.packed(), &packed)?;
    let all = built.calibration.all();
    let spec = cfg.model_spec();
    let loss_fp = eval_loss(&spec, &trained, &all)?;
    let loss_q = eval_loss(&spec, &qm, &all)?;
    let (w, t) = pipeline::effective_pair(cfg, &partition, &qm.assignment);
    println!("uniform {bits}-bit: loss {loss_q:.6} (full precision {loss_fp:.6})");
    println!("effective bits: weight {w:.4}, total {t:.4}");
    println!("packed: {}", paths.packed().display());
    Ok(())
}

fn cmd_search(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    pipeline::write_config_echo(cfg, paths)?;
    let built = pipeline::stage_build(cfg)?;
    let trained = if paths.checkpoint().exists() {
        pipeline::load_trained(cfg, paths)?
    } else {
        pipeline::stage_pretrain(cfg, paths, &built)?.0
    };
    let out = pipeline::run_search_stages(cfg, paths, &trained, &built.calibration)?;
    let report = pipeline::stage_evaluate_and_report(cfg, paths, &built.calibration, &out)?;
    println!(
        "budget {:.2}: loss {:.6} (uniform warm {:.6}, full precision {:.6})",
        cfg.budget, report.loss_final, report.loss_uniform_warm, report.loss_full_precision
    );
    println!(
        "effective bits: weight {:.4}, total {:.4}; {} iterations ({} accepted), search {:.1}s{}",
        report.effective_weight_bits,
        report.effective_total_bits,
        report.trace_iterations,
        report.trace_accepted,
        out.trace.wall_secs,
        if out.trace.saturated { " (saturated)" } else { "" }
    );
    println!("report: {}", paths.report().display());
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let budgets = if cfg.budget_sweep.is_empty() {
        vec![2.0, 2.5, 3.0, 3.5, 4.0]
    } else {
        cfg.budget_sweep.clone()
    };
    let rows = pipeline::run_sweep(cfg, &budgets)?;
    for (b, l) in &rows {
        println!("budget {b:.2}: loss {l:.6}");
    }
    println!("sweep table: {}", Paths::new(&cfg.out_dir).sweep().display());
    Ok(())
}

fn cmd_report(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    for p in [paths.reordered(), paths.permutations(), paths.packed(), paths.trace()] {
        if !p.exists() {
            bail!("missing artifact {}; run `scalebits search` first", p.display());
        }
    }
    let report = pipeline::regenerate_report(cfg, paths)?;
    println!(
        "regenerated report: loss {:.6}, weight bits {:.4}",
        report.loss_final, report.effective_weight_bits
    );
    println!("report: {}", paths.report().display());
    Ok(())
}

fn cmd_probe(
    cfg: &RunConfig,
    paths: &Paths,
    chains: usize,
    chain_len: usize,
    bit_lo: u8,
    bit_hi: u8,
) -> Result<()> {
    if bit_lo < cfg.bit_min || bit_hi > cfg.bit_max || bit_lo >= bit_hi {
        bail!("probe range {bit_lo}..{bit_hi} outside {}..{}", cfg.bit_min, cfg.bit_max);
    }
    let built = pipeline::stage_build(cfg)?;
    let trained = if paths.checkpoint().exists() {
        pipeline::load_trained(cfg, paths)?
    } else {
        pipeline::write_config_echo(cfg, paths)?;
        pipeline::stage_pretrain(cfg, paths, &built)?.0
    };
    let spec = cfg.model_spec();
    let qcfg = cfg.quant_config();
    let partition = partition_weights(&trained, cfg.block_rows, cfg.block_cols, cfg.group_size)?;
    let all = built.calibration.all();

    // Layer-wise precision vectors: expand to per-block assignments, then
    // probe the negated full-calibration loss.
    let layer_of_block: Vec<usize> = (0..partition.n_blocks)
        .map(|f| trained.sites[partition.locate(f).site].layer)
        .collect();
    let value = |layer_bits: &[u8]| -> f64 {
        let assignment: Vec<u8> =
            layer_of_block.iter().map(|&l| layer_bits[l]).collect();
        let qm = quantize_model(&trained, &partition, &assignment, &qcfg)
            .expect("probe quantization");
        -eval_loss(&spec, &qm, &all).expect("probe evaluation")
    };
    let report = lattice_probe(&value, cfg.n_layers, bit_lo, bit_hi, chains, chain_len, cfg.search_seed, 0.0)?;

    let mut csv = String::from("chain,step,f,marginal\n");
    for (ci, chain) in report.chains.iter().enumerate() {
        for (si, (f, m)) in chain.f_values.iter().zip(&chain.marginals).enumerate() {
            csv.push_str(&format!("{ci},{si},{f},{m}\n"));
        }
    }
    std::fs::create_dir_all(&paths.dir)?;
    std::fs::write(paths.dir.join("probe.csv"), csv).context("writing probe.csv")?;

    println!(
        "monotonicity violations: {}/{} ({:.1}%)",
        report.mono_violations,
        report.mono_checks,
        100.0 * report.mono_fraction()
    );
    println!(
        "diminishing-returns violations: {}/{} ({:.1}%)",
        report.dr_violations,
        report.dr_checks,
        100.0 * report.dr_fraction()
    );
    println!("probe table: {}", paths.dir.join("probe.csv").display());
    Ok(())
}
