//! Trace-level properties of the scalable search on a small model:
//! feasibility at every accepted state, nonincreasing accepted batch loss in
//! the balanced phase, byte-identical traces across identical runs, and the
//! integer-budget degenerate cases.

use scalebits::export::write_trace_jsonl;
use scalebits::layout::partition_weights;
use scalebits::model::{build_model, make_calibration, make_corpus, ModelSpec};
use scalebits::quant::QuantConfig;
use scalebits::search::{scalable_greedy, Phase, SearchConfig};

fn setup() -> (ModelSpec, scalebits::model::ModelBundle, scalebits::model::CalibrationSet) {
    let spec = ModelSpec {
        vocab: 32,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_head: 8,
        d_ff: 32,
        seq_len: 16,
        seed: 9,
    };
    let model = build_model(&spec).unwrap();
    let corpus = make_corpus(spec.vocab, 6000, 4).unwrap();
    let cal = make_calibration(&corpus, 24, 16, 2).unwrap();
    (spec, model, cal)
}

#[test]
fn accepted_balanced_steps_never_increase_batch_loss() {
    let (_, model, cal) = setup();
    let part = partition_weights(&model, 8, 8, 8).unwrap();
    let qcfg = QuantConfig { group_size: 8, ..QuantConfig::default() };
    let scfg = SearchConfig { seed: 5, max_iters: 40, batch_size: 4, ..SearchConfig::default() };
    let (_, trace) = scalable_greedy(&model, &part, &cal, 2.5, &qcfg, &scfg).unwrap();
    assert!(!trace.records.is_empty());
    for rec in &trace.records {
        assert!(rec.bits_total <= trace.budget_bits, "iteration {} infeasible", rec.t);
        if rec.phase == Phase::Balanced && rec.accepted {
            assert!(
                rec.loss_after <= rec.loss_before,
                "accepted balanced step raised batch loss at t={}",
                rec.t
            );
        }
    }
    // k never increases along the trace.
    for w in trace.records.windows(2) {
        assert!(w[1].k <= w[0].k);
    }
}

#[test]
fn identical_runs_serialize_identical_traces() {
    let (_, model, cal) = setup();
    let part = partition_weights(&model, 8, 8, 8).unwrap();
    let qcfg = QuantConfig { group_size: 8, ..QuantConfig::default() };
    let scfg = SearchConfig { seed: 5, max_iters: 25, batch_size: 4, ..SearchConfig::default() };
    let (a1, t1) = scalable_greedy(&model, &part, &cal, 2.5, &qcfg, &scfg).unwrap();
    let (a2, t2) = scalable_greedy(&model, &part, &cal, 2.5, &qcfg, &scfg).unwrap();
    assert_eq!(a1, a2);
    let mut b1 = Vec::new();
    let mut b2 = Vec::new();
    write_trace_jsonl(&mut b1, &t1).unwrap();
    write_trace_jsonl(&mut b2, &t2).unwrap();
    assert_eq!(b1, b2, "traces differ between identical runs");
}

#[test]
fn budget_at_bit_max_saturates_without_balanced_phase() {
    let (_, model, cal) = setup();
    let part = partition_weights(&model, 8, 8, 8).unwrap();
    let qcfg = QuantConfig { group_size: 8, ..QuantConfig::default() };
    let scfg = SearchConfig { seed: 5, max_iters: 40, batch_size: 4, ..SearchConfig::default() };
    let (b, trace) = scalable_greedy(&model, &part, &cal, 8.0, &qcfg, &scfg).unwrap();
    assert!(b.iter().all(|&x| x == 8));
    assert!(trace.records.iter().all(|r| r.phase != Phase::Balanced || !r.accepted || r.loss_after <= r.loss_before));
    assert!(trace.converged_early);
    assert!(trace.saturated);
}

#[test]
fn integer_budget_runs_balanced_only() {
    let (_, model, cal) = setup();
    let part = partition_weights(&model, 8, 8, 8).unwrap();
    let qcfg = QuantConfig { group_size: 8, ..QuantConfig::default() };
    // gamma0 large enough that k = N: warm start is already at budget.
    let scfg = SearchConfig {
        seed: 5,
        max_iters: 15,
        batch_size: 4,
        gamma0: 1.0,
        gamma_t: 0.02,
        ..SearchConfig::default()
    };
    let (b, trace) = scalable_greedy(&model, &part, &cal, 3.0, &qcfg, &scfg).unwrap();
    assert!(trace.records.iter().all(|r| r.phase == Phase::Balanced));
    let avg = part.weighted_avg_bits(&b);
    assert!(avg <= 3.0 + 1e-12);
}

#[test]
fn frozen_gradients_mode_runs() {
    let (_, model, cal) = setup();
    let part = partition_weights(&model, 8, 8, 8).unwrap();
    let qcfg = QuantConfig { group_size: 8, ..QuantConfig::default() };
    let scfg = SearchConfig {
        seed: 6,
        max_iters: 20,
        batch_size: 4,
        adaptive_grads: false,
        ..SearchConfig::default()
    };
    let (b, trace) = scalable_greedy(&model, &part, &cal, 2.5, &qcfg, &scfg).unwrap();
    assert!(!trace.records.is_empty());
    assert!(part.weighted_avg_bits(&b) <= 2.5 + 1e-12);
}
