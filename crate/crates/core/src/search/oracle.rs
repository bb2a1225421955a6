//! Brute-force and structural oracles for the search stack: exhaustive
//! enumeration (the OPT reference for approximation-ratio tests), random
//! monotone DR-submodular instances, and lattice probes for monotonicity and
//! diminishing returns.

use crate::error::Error;
use crate::rng::Rng;
use crate::Result;

use super::{budget_weight_bits, ValueFn};

/// Enumerate every feasible assignment over the candidate bit set and return
/// the loss minimizer (ties: lexicographically smallest) plus the number of
/// feasible assignments visited.
pub fn exhaustive_oracle(
    value: &impl ValueFn,
    n: usize,
    bit_choices: &[u8],
    sizes: &[usize],
    budget_avg: f64,
) -> Result<(Vec<u8>, f64, usize)> {
    let combos = (bit_choices.len() as f64).powi(n as i32);
    if combos > 1e6 {
        return Err(Error::contract(format!(
            "{} assignments exceed the 1e6 enumeration cap",
            combos
        )));
    }
    if bit_choices.is_empty() || n == 0 {
        return Err(Error::contract("empty search space".to_string()));
    }
    let total_weights: usize = sizes.iter().sum();
    let budget_bits = budget_weight_bits(budget_avg, total_weights);

    let mut digits = vec![0usize; n];
    let mut best: Option<(Vec<u8>, f64)> = None;
    let mut feasible = 0usize;
    loop {
        let assignment: Vec<u8> = digits.iter().map(|&d| bit_choices[d]).collect();
        let bits: u64 = assignment.iter().zip(sizes).map(|(&b, &m)| b as u64 * m as u64).sum();
        if bits <= budget_bits {
            feasible += 1;
            let loss = value.eval(&assignment);
            let better = match &best {
                None => true,
                Some((_, bl)) => loss < *bl,
            };
            if better {
                best = Some((assignment, loss));
            }
        }
        // Odometer with digit 0 most significant: lexicographic order.
        let mut pos = n;
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < bit_choices.len() {
                break;
            }
            digits[pos] = 0;
            if pos == 0 {
                let (a, l) = best.ok_or_else(|| {
                    Error::contract("no feasible assignment under budget".to_string())
                })?;
                return Ok((a, l, feasible));
            }
        }
        if digits.iter().all(|&d| d == 0) {
            let (a, l) = best
                .ok_or_else(|| Error::contract("no feasible assignment under budget".to_string()))?;
            return Ok((a, l, feasible));
        }
    }
}

/// Separable concave instance: loss(b) = -sum a_i (1 - 2^-b_i).
/// Greedy is exact for these.
pub fn separable_instance(n: usize, seed: u64) -> impl Fn(&[u8]) -> f64 + Sync {
    let mut rng = Rng::derive(seed, 0x7365_7061_7261_626c);
    let coef: Vec<f64> = (0..n).map(|_| 0.5 + 4.0 * rng.next_f64()).collect();
    move |b: &[u8]| {
        -(b.iter()
            .zip(&coef)
            .map(|(&bi, &ai)| ai * (1.0 - 0.5f64.powi(bi as i32)))
            .sum::<f64>())
    }
}

/// Probabilistic-coverage instance: f(b) = sum_j w_j (1 - prod_i q_ij^b_i),
/// which is monotone and DR-submodular over the integer lattice; the
/// returned closure is the loss -f.
pub fn coverage_instance(n: usize, m: usize, seed: u64) -> impl Fn(&[u8]) -> f64 + Sync {
    let mut rng = Rng::derive(seed, 0x636f_7665_7261_6765);
    let w: Vec<f64> = (0..m).map(|_| 0.2 + rng.next_f64()).collect();
    let q: Vec<f64> = (0..n * m).map(|_| 0.3 + 0.65 * rng.next_f64()).collect();
    move |b: &[u8]| {
        let mut f = 0.0;
        for j in 0..m {
            let mut miss = 1.0;
            for (i, &bi) in b.iter().enumerate() {
                miss *= q[i * m + j].powi(bi as i32);
            }
            f += w[j] * (1.0 - miss);
        }
        -f
    }
}

/// One sampled monotone chain and the marginals of a fixed coordinate.
#[derive(Debug, Clone)]
pub struct LatticeChain {
    pub coord: usize,
    pub points: Vec<Vec<u8>>,
    pub f_values: Vec<f64>,
    pub marginals: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct LatticeReport {
    pub chains: Vec<LatticeChain>,
    pub mono_checks: usize,
    pub mono_violations: usize,
    pub dr_checks: usize,
    pub dr_violations: usize,
}

impl LatticeReport {
    pub fn mono_fraction(&self) -> f64 {
        if self.mono_checks == 0 {
            0.0
        } else {
            self.mono_violations as f64 / self.mono_checks as f64
        }
    }

    pub fn dr_fraction(&self) -> f64 {
        if self.dr_checks == 0 {
            0.0
        } else {
            self.dr_violations as f64 / self.dr_checks as f64
        }
    }
}

/// Sample random strictly increasing chains b^1 < ... < b^K and a coordinate
/// i; report how often `f` decreases along the chain (monotonicity
/// violations) and how often the marginal f(b + e_i) - f(b) increases
/// (diminishing-returns violations). Chains raise random coordinate subsets,
/// including i itself, which stays capped at hi - 1 so its one-bit marginal
/// remains defined at every point. `f` is the maximized objective, e.g. a
/// negated loss. `eps` absorbs float-roundoff ties: a change only counts as
/// a violation when it exceeds it.
#[allow(clippy::too_many_arguments)]
pub fn lattice_probe(
    f: &(impl Fn(&[u8]) -> f64 + Sync),
    n: usize,
    lo: u8,
    hi: u8,
    chains: usize,
    chain_len: usize,
    seed: u64,
    eps: f64,
) -> Result<LatticeReport> {
    if lo >= hi {
        return Err(Error::contract(format!("need lo < hi, got {lo}..{hi}")));
    }
    if n < 2 {
        return Err(Error::contract("need at least 2 coordinates".to_string()));
    }
    let mut rng = Rng::derive(seed, 0x6c61_7474_6963_6501);
    let mut report = LatticeReport::default();
    for _ in 0..chains {
        let coord = rng.next_below(n);
        let mut b = vec![lo; n];
        let mut points = vec![b.clone()];
        for _ in 1..chain_len {
            let cap = |i: usize| if i == coord { hi - 1 } else { hi };
            let raisable: Vec<usize> = (0..n).filter(|&i| b[i] < cap(i)).collect();
            if raisable.is_empty() {
                break;
            }
            let take = 1 + rng.next_below(raisable.len().div_ceil(3));
            let mut ids = raisable;
            rng.shuffle(&mut ids);
            for &i in ids.iter().take(take) {
                b[i] += 1;
            }
            points.push(b.clone());
        }
        let f_values: Vec<f64> = points.iter().map(|p| f(p)).collect();
        let marginals: Vec<f64> = points
            .iter()
            .map(|p| {
                let mut up = p.clone();
                up[coord] += 1;
                f(&up) - f(p)
            })
            .collect();
        for w in f_values.windows(2) {
            report.mono_checks += 1;
            if w[1] < w[0] - eps {
                report.mono_violations += 1;
            }
        }
        for w in marginals.windows(2) {
            report.dr_checks += 1;
            if w[1] > w[0] + eps {
                report.dr_violations += 1;
            }
        }
        report.chains.push(LatticeChain { coord, points, f_values, marginals });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::classic_greedy;

    #[test]
    fn exhaustive_counts_feasible() {
        let f = |b: &[u8]| -(b.iter().map(|&x| x as f64).sum::<f64>());
        // N = 2 over {0,1,2} with an ample budget: all 9 assignments feasible.
        let (_, _, feasible) = exhaustive_oracle(&f, 2, &[0, 1, 2], &[1, 1], 2.0).unwrap();
        assert_eq!(feasible, 9);
    }

    #[test]
    fn exhaustive_zero_budget() {
        let f = |b: &[u8]| -(b.iter().map(|&x| x as f64).sum::<f64>());
        let (best, _, feasible) = exhaustive_oracle(&f, 3, &[0, 1, 2], &[1, 1, 1], 0.0).unwrap();
        assert_eq!(best, vec![0, 0, 0]);
        assert_eq!(feasible, 1);
    }

    #[test]
    fn greedy_matches_exhaustive_on_separable() {
        for seed in 0..10 {
            let f = separable_instance(4, seed);
            let mut g = |b: &[u8]| f(b);
            let greedy = classic_greedy(&mut g, &[1; 4], 1.5, 0, 3);
            let (opt, opt_loss, _) = exhaustive_oracle(&f, 4, &[0, 1, 2, 3], &[1; 4], 1.5).unwrap();
            let greedy_loss = f(&greedy.assignment);
            assert!(
                (greedy_loss - opt_loss).abs() < 1e-12,
                "seed {seed}: greedy {greedy_loss} vs opt {opt_loss} ({:?} vs {:?})",
                greedy.assignment,
                opt
            );
        }
    }

    #[test]
    fn greedy_bound_on_coverage_instances() {
        // Quick version of the acceptance criterion: value >= (1 - 1/e) OPT.
        let bound = 1.0 - (-1.0f64).exp();
        for seed in 0..10 {
            let f = coverage_instance(4, 6, seed);
            let mut g = |b: &[u8]| f(b);
            let greedy = classic_greedy(&mut g, &[1; 4], 1.25, 0, 3);
            let (_, opt_loss, _) = exhaustive_oracle(&f, 4, &[0, 1, 2, 3], &[1; 4], 1.25).unwrap();
            let greedy_value = -f(&greedy.assignment);
            let opt_value = -opt_loss;
            assert!(
                greedy_value >= bound * opt_value - 1e-12,
                "seed {seed}: {greedy_value} < {bound} * {opt_value}"
            );
        }
    }

    #[test]
    fn coverage_marginals_diminish() {
        let loss = coverage_instance(3, 5, 1);
        let f = |b: &[u8]| -loss(b);
        // Marginal of raising coordinate 0 shrinks as the base grows.
        let m_low = f(&[1, 0, 0]) - f(&[0, 0, 0]);
        let m_high = f(&[1, 2, 2]) - f(&[0, 2, 2]);
        assert!(m_high <= m_low);
        // Monotone.
        assert!(f(&[2, 2, 2]) >= f(&[1, 2, 2]));
    }

    #[test]
    fn lattice_probe_separable_is_clean() {
        let loss = separable_instance(6, 3);
        let f = move |b: &[u8]| -loss(b);
        let report = lattice_probe(&f, 6, 1, 4, 5, 8, 11, 1e-12).unwrap();
        assert_eq!(report.mono_violations, 0);
        assert_eq!(report.dr_violations, 0);
        assert!(report.mono_checks > 0);
    }

    #[test]
    fn lattice_probe_single_point_chain_vacuous() {
        let loss = separable_instance(4, 3);
        let f = move |b: &[u8]| -loss(b);
        let report = lattice_probe(&f, 4, 1, 3, 3, 1, 5, 0.0).unwrap();
        assert_eq!(report.mono_checks, 0);
        assert_eq!(report.dr_checks, 0);
        assert_eq!(report.mono_fraction(), 0.0);
    }
}
