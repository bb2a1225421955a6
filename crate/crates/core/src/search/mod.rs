//! Bitwidth search under a global bit budget.
//!
//! `classic_greedy` is the textbook one-bit-at-a-time search: exact loss
//! evaluations, quadratic cost, usable at desk scale and as the fidelity
//! oracle. `scalable_greedy` replaces the exact marginals with the
//! sensitivity surrogates and applies batched two-sided updates with an
//! acceptance check and k-halving.

pub mod oracle;
pub mod value;

pub use value::QuantLossFn;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::layout::BlockPartition;
use crate::model::{eval_loss, CalibrationSet, ModelBundle};
use crate::quant::{quantize_model, requantize_block, QuantConfig};
use crate::rng::Rng;
use crate::sensitivity::{block_up_l1, block_updown, site_grads};
use crate::Result;

/// Loss of a bitwidth assignment (lower is better). `begin_iteration` lets
/// stateful implementations cache work for the upcoming candidate sweep.
pub trait ValueFn: Sync {
    fn eval(&self, b: &[u8]) -> f64;
    fn begin_iteration(&mut self, _base: &[u8]) {}
}

impl<F: Fn(&[u8]) -> f64 + Sync> ValueFn for F {
    fn eval(&self, b: &[u8]) -> f64 {
        self(b)
    }
}

/// Integer weight-bit budget for an element-weighted average target.
pub fn budget_weight_bits(budget_avg: f64, total_weights: usize) -> u64 {
    (budget_avg * total_weights as f64 + 1e-9).floor() as u64
}

#[derive(Debug, Clone)]
pub struct ClassicGreedyResult {
    pub assignment: Vec<u8>,
    /// Loss after each accepted raise.
    pub values: Vec<f64>,
    /// True when the search stopped because every block hit `bit_max`.
    pub saturated: bool,
    pub evaluations: usize,
}

/// Classic greedy search: starting from `start_bits` everywhere, repeatedly
/// add one bit to the block with the largest loss decrease (ties to the
/// lowest index) while the element-weighted average stays within budget.
/// Only raises that keep the budget exact are considered, so the returned
/// assignment is always feasible.
pub fn classic_greedy(
    value: &mut impl ValueFn,
    sizes: &[usize],
    budget_avg: f64,
    start_bits: u8,
    bit_max: u8,
) -> ClassicGreedyResult {
    let n = sizes.len();
    let total_weights: usize = sizes.iter().sum();
    let budget_bits = budget_weight_bits(budget_avg, total_weights);
    let mut b = vec![start_bits; n];
    let mut current: u64 = sizes.iter().map(|&m| start_bits as u64 * m as u64).sum();
    let mut values = Vec::new();
    let mut evaluations = 0usize;
    let mut saturated = false;

    loop {
        if current >= budget_bits {
            break;
        }
        let candidates: Vec<usize> = (0..n)
            .filter(|&i| b[i] < bit_max && current + sizes[i] as u64 <= budget_bits)
            .collect();
        if candidates.is_empty() {
            saturated = b.iter().all(|&bi| bi >= bit_max);
            break;
        }
        value.begin_iteration(&b);
        let losses = crate::par::par_map_slice(&candidates, |&i| {
            let mut probe = b.clone();
            probe[i] += 1;
            value.eval(&probe)
        });
        evaluations += losses.len();
        let mut best = 0usize;
        for j in 1..losses.len() {
            if losses[j] < losses[best] {
                best = j;
            }
        }
        let winner = candidates[best];
        b[winner] += 1;
        current += sizes[winner] as u64;
        values.push(losses[best]);
    }
    ClassicGreedyResult { assignment: b, values, saturated, evaluations }
}

/// Which update rule a scalable-greedy iteration used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Expand,
    Balanced,
}

/// Proposed assignment change for one iteration.
#[derive(Debug, Clone)]
pub struct StepProposal {
    pub phase: Phase,
    pub raised: Vec<usize>,
    pub lowered: Vec<usize>,
}

impl StepProposal {
    pub fn is_empty(&self) -> bool {
        self.raised.is_empty() && self.lowered.is_empty()
    }
}

fn sort_desc_by_score(ids: &mut [usize], score: &[f64]) {
    ids.sort_by(|&a, &b| {
        score[b].partial_cmp(&score[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
}

fn sort_asc_by_score(ids: &mut [usize], score: &[f64]) {
    ids.sort_by(|&a, &b| {
        score[a].partial_cmp(&score[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
}

/// One relaxed greedy step.
///
/// Under budget: raise the top-k blocks by `s_up`, capped by eligibility and
/// by the remaining weight-bit headroom in whole blocks. At budget: raise
/// the top floor(k/2) by `s_up` and lower the bottom floor(k/2) by `s_down`,
/// with the two sets disjoint (raised blocks are excluded from the lowering
/// pool), truncated to equal count, and guarded so the net weight-bit change
/// is never positive. Ineligible blocks must carry -inf/+inf sentinels.
pub fn relaxed_step(
    b: &[u8],
    s_up: &[f64],
    s_down: &[f64],
    k: usize,
    sizes: &[usize],
    budget_bits: u64,
) -> StepProposal {
    let n = b.len();
    let current: u64 = b.iter().zip(sizes).map(|(&bi, &m)| bi as u64 * m as u64).sum();

    if current < budget_bits {
        let mut up_ids: Vec<usize> = (0..n).filter(|&i| s_up[i] > f64::NEG_INFINITY).collect();
        sort_desc_by_score(&mut up_ids, s_up);
        let mut headroom = budget_bits - current;
        let mut raised = Vec::new();
        for &i in &up_ids {
            if raised.len() >= k {
                break;
            }
            let m = sizes[i] as u64;
            if m <= headroom {
                raised.push(i);
                headroom -= m;
            }
        }
        return StepProposal { phase: Phase::Expand, raised, lowered: Vec::new() };
    }

    let half = k / 2;
    let mut up_ids: Vec<usize> = (0..n).filter(|&i| s_up[i] > f64::NEG_INFINITY).collect();
    sort_desc_by_score(&mut up_ids, s_up);
    up_ids.truncate(half);
    let raised_set: std::collections::BTreeSet<usize> = up_ids.iter().copied().collect();

    let mut down_ids: Vec<usize> = (0..n)
        .filter(|&i| s_down[i] < f64::INFINITY && !raised_set.contains(&i))
        .collect();
    sort_asc_by_score(&mut down_ids, s_down);
    down_ids.truncate(half);

    // Equal counts, then shed the weakest raises until the net weight-bit
    // change is <= 0 (matters only with ragged blocks of unequal size).
    let count = up_ids.len().min(down_ids.len());
    up_ids.truncate(count);
    down_ids.truncate(count);
    let mut raise_mass: u64 = up_ids.iter().map(|&i| sizes[i] as u64).sum();
    let lower_mass: u64 = down_ids.iter().map(|&i| sizes[i] as u64).sum();
    while raise_mass > lower_mass {
        let dropped = up_ids.pop().expect("nonempty while over mass");
        raise_mass -= sizes[dropped] as u64;
    }
    StepProposal { phase: Phase::Balanced, raised: up_ids, lowered: down_ids }
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    /// Initial update ratio; k starts at floor(gamma0 * N).
    pub gamma0: f64,
    /// Terminal ratio; the loop stops once k < floor(gamma_t * N).
    pub gamma_t: f64,
    /// Calibration sequences sampled per iteration.
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Re-estimate gradients at the current quantized model each iteration;
    /// false freezes the iteration-0 gradients (ablation).
    pub adaptive_grads: bool,
    /// Signed aggregation for the raise surrogate; false uses the l1 variant
    /// (ablation).
    pub signed_up: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            gamma0: 0.05,
            gamma_t: 0.02,
            batch_size: 8,
            max_iters: 200,
            seed: 17,
            adaptive_grads: true,
            signed_up: true,
        }
    }
}

/// One iteration of the search trace. `bits_total` is the exact integer
/// weight-bit count after the iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub k: usize,
    pub batch_id: u64,
    pub phase: Phase,
    pub avg_bits: f64,
    pub bits_total: u64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchTrace {
    pub records: Vec<TraceRecord>,
    pub final_assignment: Vec<u8>,
    pub budget_bits: u64,
    /// Loop left because proposals became empty (bounds reached everywhere).
    pub converged_early: bool,
    /// Expansion could not reach the budget because all blocks saturated.
    pub saturated: bool,
    /// Not serialized: serialized traces must be byte-identical across runs.
    #[serde(skip)]
    pub wall_secs: f64,
}

fn fnv_hash(ids: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &i in ids {
        for b in (i as u64).to_le_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Scalable greedy search (warm start, two-stage batched updates, acceptance
/// checking with k-halving).
pub fn scalable_greedy(
    model: &ModelBundle,
    partition: &BlockPartition,
    calib: &CalibrationSet,
    budget_avg: f64,
    qcfg: &QuantConfig,
    scfg: &SearchConfig,
) -> Result<(Vec<u8>, SearchTrace)> {
    if scfg.gamma_t > scfg.gamma0 {
        return Err(Error::config(format!(
            "gamma_t {} > gamma0 {}",
            scfg.gamma_t, scfg.gamma0
        )));
    }
    if budget_avg < qcfg.bit_min as f64 {
        return Err(Error::config(format!(
            "budget {budget_avg} below bit_min {}",
            qcfg.bit_min
        )));
    }
    let started = std::time::Instant::now();
    let n = partition.n_blocks;
    let budget_bits = budget_weight_bits(budget_avg, partition.total_weights);
    let warm = (budget_avg.floor() as u8).clamp(qcfg.bit_min, qcfg.bit_max);
    let mut b = vec![warm; n];
    let mut qm = quantize_model(model, partition, &b, qcfg)?;

    let mut k = (scfg.gamma0 * n as f64).floor() as usize;
    let k_min = ((scfg.gamma_t * n as f64).floor() as usize).max(1);
    let mut rng = Rng::derive(scfg.seed, 0x7363_616c_6162_6c65); // "scalable"
    let mut records = Vec::new();
    let mut converged_early = false;
    let mut saturated = false;
    let mut frozen_grads = None;

    let mut t = 0usize;
    while k >= k_min && t < scfg.max_iters {
        let ids = calib.sample_ids(scfg.batch_size, &mut rng);
        let batch = calib.batch(&ids);
        let batch_id = fnv_hash(&ids);

        let grads = if scfg.adaptive_grads || frozen_grads.is_none() {
            let g = site_grads(model, &qm, &batch)?;
            if !scfg.adaptive_grads {
                frozen_grads = Some(g.clone());
            }
            g
        } else {
            frozen_grads.clone().expect("frozen gradients present")
        };
        let (s_up, s_down) = {
            let (up, down) = block_updown(&grads, model, &qm, partition, &b, qcfg)?;
            if scfg.signed_up {
                (up, down)
            } else {
                (block_up_l1(&grads, model, &qm, partition, &b, qcfg)?, down)
            }
        };

        let proposal = relaxed_step(&b, &s_up, &s_down, k, &partition.block_elems, budget_bits);
        if proposal.is_empty() {
            saturated = b.iter().all(|&bi| bi >= qcfg.bit_max);
            converged_early = true;
            break;
        }

        let loss_before = eval_loss(&model.spec, &qm, &batch)?;
        if !loss_before.is_finite() {
            return Err(Error::Numeric(format!("non-finite batch loss at iteration {t}")));
        }
        for &i in &proposal.raised {
            requantize_block(&mut qm, model, partition, i, b[i] + 1, qcfg)?;
        }
        for &i in &proposal.lowered {
            requantize_block(&mut qm, model, partition, i, b[i] - 1, qcfg)?;
        }
        let loss_after = eval_loss(&model.spec, &qm, &batch)?;
        if !loss_after.is_finite() {
            return Err(Error::Numeric(format!("non-finite batch loss at iteration {t}")));
        }

        let accepted = match proposal.phase {
            Phase::Expand => true,
            Phase::Balanced => loss_after <= loss_before,
        };
        if accepted {
            for &i in &proposal.raised {
                b[i] += 1;
            }
            for &i in &proposal.lowered {
                b[i] -= 1;
            }
        } else {
            // Revert the trial requantization and halve the update batch.
            for &i in &proposal.raised {
                requantize_block(&mut qm, model, partition, i, b[i], qcfg)?;
            }
            for &i in &proposal.lowered {
                requantize_block(&mut qm, model, partition, i, b[i], qcfg)?;
            }
            k /= 2;
        }

        let bits_total = partition.weight_bits(&b);
        debug_assert!(bits_total <= budget_bits);
        records.push(TraceRecord {
            t,
            k,
            batch_id,
            phase: proposal.phase,
            avg_bits: bits_total as f64 / partition.total_weights as f64,
            bits_total,
            loss_before,
            loss_after,
            accepted,
        });
        t += 1;
    }

    let trace = SearchTrace {
        records,
        final_assignment: b.clone(),
        budget_bits,
        converged_early,
        saturated,
        wall_secs: started.elapsed().as_secs_f64(),
    };
    Ok((b, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classic_zero_budget_stays_zero() {
        let mut f = |b: &[u8]| -(b.iter().map(|&x| x as f64).sum::<f64>());
        let r = classic_greedy(&mut f, &[1, 1, 1], 0.0, 0, 3);
        assert_eq!(r.assignment, vec![0, 0, 0]);
        assert!(!r.saturated);
    }

    #[test]
    fn classic_separable_hand_case() {
        // loss = -sum a_i (1 - 2^-b_i), a = [4, 1]: the first two raises both
        // go to block 0 (gains 2, 1 vs 0.5), reaching avg budget 1.
        let a = [4.0, 1.0];
        let mut f = move |b: &[u8]| {
            -(b.iter().zip(a.iter()).map(|(&bi, &ai)| ai * (1.0 - 0.5f64.powi(bi as i32))).sum::<f64>())
        };
        let r = classic_greedy(&mut f, &[1, 1], 1.0, 0, 8);
        assert_eq!(r.assignment, vec![2, 0]);
    }

    #[test]
    fn classic_saturates_with_flag() {
        let mut f = |b: &[u8]| -(b.iter().map(|&x| x as f64).sum::<f64>());
        let r = classic_greedy(&mut f, &[1, 1], 5.0, 0, 2);
        assert_eq!(r.assignment, vec![2, 2]);
        assert!(r.saturated);
    }

    #[test]
    fn classic_tie_breaks_to_lowest_index() {
        // Symmetric value: every candidate equally good; block 0 wins.
        let mut f = |b: &[u8]| -(b.iter().map(|&x| x as f64).sum::<f64>());
        let r = classic_greedy(&mut f, &[1, 1, 1, 1], 0.25, 0, 8);
        assert_eq!(r.assignment, vec![1, 0, 0, 0]);
    }

    #[test]
    fn relaxed_expand_top_k() {
        let b = [1u8, 1, 1, 1];
        let s_up = [3.0, 1.0, 2.0, 0.0];
        let s_down = [0.0; 4];
        let p = relaxed_step(&b, &s_up, &s_down, 2, &[1, 1, 1, 1], 100);
        assert_eq!(p.phase, Phase::Expand);
        assert_eq!(p.raised, vec![0, 2]);
        assert!(p.lowered.is_empty());
    }

    #[test]
    fn relaxed_expand_headroom_cap() {
        // Budget allows exactly one more block-bit despite k = 5.
        let b = [1u8, 1, 1, 1];
        let s_up = [3.0, 1.0, 2.0, 0.5];
        let s_down = [0.0; 4];
        let p = relaxed_step(&b, &s_up, &s_down, 5, &[1, 1, 1, 1], 5);
        assert_eq!(p.raised, vec![0]);
    }

    #[test]
    fn relaxed_balanced_disjoint() {
        // Block 4 is both the best raise and the cheapest lower; it must be
        // raised and excluded from the lowering pool.
        let b = [2u8; 5];
        let s_up = [0.0, 0.1, 0.2, 0.3, 5.0];
        let s_down = [0.5, 0.4, 0.6, 0.7, 0.01];
        let sizes = [1usize; 5];
        let current: u64 = 10;
        let p = relaxed_step(&b, &s_up, &s_down, 2, &sizes, current);
        assert_eq!(p.phase, Phase::Balanced);
        assert_eq!(p.raised, vec![4]);
        assert_eq!(p.lowered, vec![1]);
    }

    #[test]
    fn relaxed_balanced_respects_sentinels() {
        let b = [8u8, 2, 2, 2];
        let s_up = [f64::NEG_INFINITY, 1.0, 2.0, 3.0];
        let s_down = [0.1, f64::INFINITY, 0.2, 0.3];
        let p = relaxed_step(&b, &s_up, &s_down, 4, &[1; 4], 14);
        assert!(!p.raised.contains(&0));
        assert!(!p.lowered.contains(&1));
        assert_eq!(p.raised.len(), p.lowered.len());
    }

    #[test]
    fn budget_bits_floor() {
        assert_eq!(budget_weight_bits(2.5, 100), 250);
        assert_eq!(budget_weight_bits(3.0, 7), 21);
    }
}
