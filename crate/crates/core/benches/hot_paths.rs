//! Criterion benches for the data-parallel hot paths.
//!
//! Bench ids carry the compiled mode, so runs with and without the
//! `parallel` feature land in separate groups:
//!
//!   cargo bench -p scalebits
//!   cargo bench -p scalebits --no-default-features
//!
//! and the saved baselines can be compared directly.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use scalebits::layout::partition_weights;
use scalebits::model::{build_model, eval_loss, ModelSpec};
use scalebits::par::parallel_enabled;
use scalebits::quant::{quantize_model, QuantConfig};
use scalebits::rng::Rng;
use scalebits::search::{classic_greedy, QuantLossFn};

fn mode() -> &'static str {
    if parallel_enabled() {
        "parallel"
    } else {
        "sequential"
    }
}

fn bench_quantize_model(c: &mut Criterion) {
    let spec = ModelSpec::default();
    let model = build_model(&spec).unwrap();
    let part = partition_weights(&model, 16, 32, 32).unwrap();
    let cfg = QuantConfig { group_size: 32, ..QuantConfig::default() };
    let mut rng = Rng::new(1);
    let assignment: Vec<u8> = (0..part.n_blocks).map(|_| 1 + rng.next_below(8) as u8).collect();
    c.bench_function(&format!("quantize_model_640_blocks/{}", mode()), |b| {
        b.iter(|| quantize_model(&model, &part, &assignment, &cfg).unwrap())
    });
}

fn bench_batch_loss(c: &mut Criterion) {
    let spec = ModelSpec::default();
    let model = build_model(&spec).unwrap();
    let mut rng = Rng::new(2);
    let batch: Vec<Vec<u32>> = (0..8)
        .map(|_| (0..spec.seq_len).map(|_| rng.next_below(spec.vocab) as u32).collect())
        .collect();
    let views: Vec<&[u32]> = batch.iter().map(|s| s.as_slice()).collect();
    c.bench_function(&format!("eval_loss_8x64/{}", mode()), |b| {
        b.iter(|| eval_loss(&spec, &model, &views).unwrap())
    });
}

fn bench_candidate_sweep(c: &mut Criterion) {
    // One classic-greedy iteration: the candidate evaluations fan out in
    // parallel over blocks.
    let spec = ModelSpec { n_layers: 2, ..ModelSpec::default() };
    let model = build_model(&spec).unwrap();
    let part = partition_weights(&model, 32, 64, 32).unwrap();
    let cfg = QuantConfig { group_size: 32, ..QuantConfig::default() };
    let mut rng = Rng::new(3);
    let batch: Vec<Vec<u32>> = (0..2)
        .map(|_| (0..32).map(|_| rng.next_below(spec.vocab) as u32).collect())
        .collect();
    let views: Vec<&[u32]> = batch.iter().map(|s| s.as_slice()).collect();
    let start = vec![2u8; part.n_blocks];
    c.bench_function(&format!("greedy_candidate_sweep_{}_blocks/{}", part.n_blocks, mode()), |b| {
        b.iter_batched(
            || QuantLossFn::new(&model, &part, &cfg, views.clone(), &start).unwrap(),
            |mut vf| {
                // Budget one block-bit above the start: exactly one raise,
                // i.e. a single full candidate sweep.
                let step = 1.0 / part.n_blocks as f64;
                classic_greedy(&mut vf, &part.block_elems, 2.0 + step, 2, 8)
            },
            BatchSize::LargeInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_quantize_model, bench_batch_loss, bench_candidate_sweep
}
criterion_main!(benches);
