//! Quick oracle suites runnable from the CLI: one pass/fail line each.

use anyhow::Result;

use scalebits::layout::partition_weights;
use scalebits::model::{build_model, eval_loss, traced_loss, ModelSpec};
use scalebits::quant::pack::{pack_tensor, unpack_tensor};
use scalebits::quant::{quantize_model, rtn_quantize_group, BlockCodes, QuantConfig};
use scalebits::rng::Rng;
use scalebits::search::oracle::{coverage_instance, exhaustive_oracle};
use scalebits::search::classic_greedy;
use scalebits::tensor::fd::{finite_diff_check, ParamMap};
use scalebits::tensor::tape::grad;

fn tiny_spec() -> ModelSpec {
    ModelSpec {
        vocab: 24,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_head: 8,
        d_ff: 24,
        seq_len: 10,
        seed: 5,
    }
}

fn check_gradients() -> Result<(bool, String)> {
    let spec = tiny_spec();
    let model = build_model(&spec)?;
    let mut rng = Rng::new(3);
    let batch: Vec<Vec<u32>> = (0..2)
        .map(|_| (0..spec.seq_len).map(|_| rng.next_below(spec.vocab) as u32).collect())
        .collect();
    let views: Vec<&[u32]> = batch.iter().map(|s| s.as_slice()).collect();
    let run = traced_loss(&spec, &model, &views)?;
    let names: Vec<&str> = model.params.keys().map(|s| s.as_str()).collect();
    let grads = grad(&run.tape, run.loss_node, &names)?;

    let params: ParamMap = model.params.clone();
    let mut coords = Vec::new();
    let name_list: Vec<String> = model.params.keys().cloned().collect();
    for i in 0..32 {
        let name = name_list[i % name_list.len()].clone();
        let len = model.params[&name].numel();
        coords.push((name, (i * 37) % len));
    }
    let spec2 = spec.clone();
    let f = move |p: &ParamMap| -> scalebits::Result<f64> {
        let bundle = scalebits::model::bundle_from_params(&spec2, p.clone())?;
        eval_loss(&bundle.spec, &bundle, &views)
    };
    let err = finite_diff_check(f, &params, &grads, &coords, 1e-4)?;
    Ok((err <= 1e-4, format!("max rel err {err:.2e} over 32 coordinates")))
}

fn check_greedy_bound() -> Result<(bool, String)> {
    let bound = 1.0 - (-1.0f64).exp();
    let mut worst: f64 = f64::INFINITY;
    for seed in 0..10 {
        let f = coverage_instance(4, 6, seed);
        let mut g = |b: &[u8]| f(b);
        let greedy = classic_greedy(&mut g, &[1; 4], 1.25, 0, 3);
        let (_, opt_loss, _) = exhaustive_oracle(&f, 4, &[0, 1, 2, 3], &[1; 4], 1.25)?;
        let ratio = -f(&greedy.assignment) / -opt_loss;
        worst = worst.min(ratio);
    }
    Ok((worst >= bound, format!("worst greedy/OPT ratio {worst:.4} vs bound {bound:.4}")))
}

fn check_pack_roundtrip() -> Result<(bool, String)> {
    let mut rng = Rng::new(9);
    let cfg = QuantConfig { group_size: 8, ..QuantConfig::default() };
    for trial in 0..200 {
        let bits = (trial % 9) as u8;
        let rows = 1 + rng.next_below(6);
        let groups_per_row = 1 + rng.next_below(3);
        let cols = 8 * groups_per_row;
        let mut blocks = Vec::new();
        let mut all_groups = Vec::new();
        for _ in 0..rows * groups_per_row {
            let vals: Vec<f64> = (0..8).map(|_| 4.0 * rng.next_normal()).collect();
            all_groups.push(rtn_quantize_group(&vals, bits, &cfg)?);
        }
        blocks.push(BlockCodes {
            bits,
            groups: if bits == 0 { Vec::new() } else { all_groups.clone() },
        });
        let pt = pack_tensor(rows, cols, rows, cols, 8, &blocks)?;
        let back = unpack_tensor(&pt)?;
        if back != blocks {
            return Ok((false, format!("roundtrip mismatch at trial {trial}")));
        }
    }
    Ok((true, "200 fuzzed tensors round-tripped exactly".to_string()))
}

fn check_quantizer_projection() -> Result<(bool, String)> {
    let spec = tiny_spec();
    let model = build_model(&spec)?;
    let part = partition_weights(&model, 8, 8, 8)?;
    let cfg = QuantConfig { group_size: 8, ..QuantConfig::default() };
    let mut rng = Rng::new(1);
    let assignment: Vec<u8> = (0..part.n_blocks).map(|_| 1 + rng.next_below(8) as u8).collect();
    let q1 = quantize_model(&model, &part, &assignment, &cfg)?;
    let bundle = scalebits::model::bundle_from_params(&spec, q1.params.clone())?;
    let q2 = quantize_model(&bundle, &part, &assignment, &cfg)?;
    let ok = q1.params.iter().all(|(n, t)| t.data() == q2.params[n].data());
    Ok((ok, "quantize twice == quantize once".to_string()))
}

pub fn run() -> Result<()> {
    let checks: Vec<(&str, fn() -> Result<(bool, String)>)> = vec![
        ("gradient-vs-finite-difference", check_gradients),
        ("greedy-approximation-bound", check_greedy_bound),
        ("pack-roundtrip-fuzz", check_pack_roundtrip),
        ("quantizer-projection", check_quantizer_projection),
    ];
    let mut failures = 0;
    for (name, f) in checks {
        match f() {
            Ok((ok, detail)) => {
                println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
                if !ok {
                    failures += 1;
                }
            }
            Err(e) => {
                println!("FAIL {name}: {e:#}");
                failures += 1;
            }
        }
    }
    if failures > 0 {
        anyhow::bail!("{failures} selftest check(s) failed");
    }
    Ok(())
}
