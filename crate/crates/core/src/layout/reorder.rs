//! Bi-directional channel reordering.
//!
//! Channel scores aggregate element sensitivity with the l1 norm along each
//! coupled axis; each coupling group is then permuted so the most sensitive
//! channels land at the lowest indices, clustering sensitive weights toward
//! the top-left corner of every matrix. Applying a consistent permutation
//! set preserves the network function up to float reassociation noise.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::{coupling_graph, Axis, CouplingGroup, ModelBundle};
use crate::tensor::Tensor;
use crate::Result;

/// One permutation per coupling group; `perm[new_index] = old_index`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPerm {
    pub group: usize,
    pub perm: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationSet {
    pub perms: Vec<GroupPerm>,
}

impl PermutationSet {
    pub fn identity(groups: &[CouplingGroup]) -> Self {
        PermutationSet {
            perms: groups
                .iter()
                .map(|g| GroupPerm { group: g.id, perm: (0..g.width).collect() })
                .collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.perms
            .iter()
            .all(|p| p.perm.iter().enumerate().all(|(i, &o)| i == o))
    }
}

fn check_bijection(perm: &[usize], width: usize) -> Result<()> {
    if perm.len() != width {
        return Err(Error::Permutation(format!(
            "permutation length {} != group width {width}",
            perm.len()
        )));
    }
    let mut seen = vec![false; width];
    for &o in perm {
        if o >= width || seen[o] {
            return Err(Error::Permutation(format!("not a bijection: index {o}")));
        }
        seen[o] = true;
    }
    Ok(())
}

/// Per-channel sensitivity scores for one coupling group.
///
/// `site_sens` maps parameter name to an element-sensitivity matrix of the
/// parameter's shape. Members without a sensitivity entry (embedding, head,
/// norm gains: parameters that are never quantized) contribute zero.
pub fn channel_scores(
    site_sens: &BTreeMap<String, Tensor>,
    group: &CouplingGroup,
) -> Result<Vec<f64>> {
    let mut scores = vec![0.0; group.width];
    for m in &group.members {
        let Some(s) = site_sens.get(&m.param) else { continue };
        if m.len != group.width {
            return Err(Error::contract(format!(
                "member {} width {} != group width {}",
                m.param, m.len, group.width
            )));
        }
        let (rows, cols) = (s.rows(), s.cols());
        match m.axis {
            Axis::Rows => {
                if m.start + m.len > rows {
                    return Err(Error::contract(format!("row slice out of range for {}", m.param)));
                }
                for c in 0..group.width {
                    let row = s.row(m.start + c);
                    scores[c] += row.iter().map(|v| v.abs()).sum::<f64>();
                }
            }
            Axis::Cols => {
                if m.start + m.len > cols {
                    return Err(Error::contract(format!("col slice out of range for {}", m.param)));
                }
                for c in 0..group.width {
                    let mut acc = 0.0;
                    for r in 0..rows {
                        acc += s.at2(r, m.start + c).abs();
                    }
                    scores[c] += acc;
                }
            }
        }
    }
    Ok(scores)
}

/// Descending stable sort of scores; ties keep ascending original index, so
/// all-equal scores give the identity permutation.
pub fn sort_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    idx
}

/// Sensitivity-driven permutations for every coupling group of the model.
pub fn compute_permutations(
    model: &ModelBundle,
    site_sens: &BTreeMap<String, Tensor>,
) -> Result<PermutationSet> {
    let groups = coupling_graph(model);
    let mut perms = Vec::with_capacity(groups.len());
    for g in &groups {
        let scores = channel_scores(site_sens, g)?;
        perms.push(GroupPerm { group: g.id, perm: sort_descending(&scores) });
    }
    Ok(PermutationSet { perms })
}

fn permute_rows(t: &mut Tensor, start: usize, perm: &[usize]) {
    let cols = t.cols();
    let slice_rows = perm.len();
    let mut buf = vec![0.0; slice_rows * cols];
    for (new, &old) in perm.iter().enumerate() {
        buf[new * cols..(new + 1) * cols]
            .copy_from_slice(&t.data()[(start + old) * cols..(start + old + 1) * cols]);
    }
    t.data_mut()[start * cols..(start + slice_rows) * cols].copy_from_slice(&buf);
}

fn permute_cols(t: &mut Tensor, start: usize, perm: &[usize]) {
    let (rows, cols) = (t.rows(), t.cols());
    let w = perm.len();
    let mut buf = vec![0.0; w];
    for r in 0..rows {
        let row = &t.data()[r * cols..(r + 1) * cols];
        for (new, &old) in perm.iter().enumerate() {
            buf[new] = row[start + old];
        }
        t.data_mut()[r * cols + start..r * cols + start + w].copy_from_slice(&buf);
    }
}

/// Apply one permutation per coupling group to a copy of the model.
/// Every member slice of a group receives the same permutation, which keeps
/// the function computed by the network unchanged.
pub fn apply_permutations(model: &ModelBundle, perms: &PermutationSet) -> Result<ModelBundle> {
    let groups = coupling_graph(model);
    if perms.perms.len() != groups.len() {
        return Err(Error::Permutation(format!(
            "{} permutations for {} groups",
            perms.perms.len(),
            groups.len()
        )));
    }
    let mut out = model.clone();
    for (g, p) in groups.iter().zip(&perms.perms) {
        if p.group != g.id {
            return Err(Error::Permutation(format!(
                "permutation order mismatch: got group {}, expected {}",
                p.group, g.id
            )));
        }
        check_bijection(&p.perm, g.width)?;
        for m in &g.members {
            let t = out
                .params
                .get_mut(&m.param)
                .ok_or_else(|| Error::Lookup(format!("missing parameter {}", m.param)))?;
            match m.axis {
                Axis::Rows => permute_rows(t, m.start, &p.perm),
                Axis::Cols => permute_cols(t, m.start, &p.perm),
            }
        }
    }
    Ok(out)
}

/// Permute a non-parameter matrix (e.g. an element-sensitivity map) the same
/// way `apply_permutations` would move the named parameter.
pub fn permute_matrix_like(
    matrix: &Tensor,
    param: &str,
    groups: &[CouplingGroup],
    perms: &PermutationSet,
) -> Tensor {
    let mut out = matrix.clone();
    for (g, p) in groups.iter().zip(&perms.perms) {
        for m in &g.members {
            if m.param == param {
                match m.axis {
                    Axis::Rows => permute_rows(&mut out, m.start, &p.perm),
                    Axis::Cols => permute_cols(&mut out, m.start, &p.perm),
                }
            }
        }
    }
    out
}

/// Inverse permutation set: applying `perms` then the inverse restores the
/// model bitwise.
pub fn invert_permutations(perms: &PermutationSet) -> PermutationSet {
    PermutationSet {
        perms: perms
            .perms
            .iter()
            .map(|p| {
                let mut inv = vec![0usize; p.perm.len()];
                for (new, &old) in p.perm.iter().enumerate() {
                    inv[old] = new;
                }
                GroupPerm { group: p.group, perm: inv }
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, coupling_graph, eval_loss, GroupKind, ModelSpec};
    use crate::rng::Rng;

    fn small_spec() -> ModelSpec {
        ModelSpec {
            vocab: 23,
            d_model: 12,
            n_layers: 2,
            n_heads: 2,
            d_head: 6,
            d_ff: 16,
            seq_len: 12,
            seed: 17,
        }
    }

    fn random_batch(spec: &ModelSpec, n: usize, seed: u64) -> Vec<Vec<u32>> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| (0..spec.seq_len).map(|_| rng.next_below(spec.vocab) as u32).collect())
            .collect()
    }

    fn random_perms(model: &ModelBundle, seed: u64) -> PermutationSet {
        let groups = coupling_graph(model);
        let mut rng = Rng::new(seed);
        PermutationSet {
            perms: groups
                .iter()
                .map(|g| {
                    let mut p: Vec<usize> = (0..g.width).collect();
                    rng.shuffle(&mut p);
                    GroupPerm { group: g.id, perm: p }
                })
                .collect(),
        }
    }

    #[test]
    fn row_l1_scores() {
        let mut sens = BTreeMap::new();
        sens.insert("w".to_string(), Tensor::from_rows(&[vec![1.0, -2.0], vec![0.0, 3.0]]));
        let group = CouplingGroup {
            id: 0,
            kind: GroupKind::Residual,
            width: 2,
            members: vec![crate::model::GroupMember {
                param: "w".to_string(),
                axis: Axis::Rows,
                start: 0,
                len: 2,
            }],
        };
        assert_eq!(channel_scores(&sens, &group).unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn scores_add_over_members() {
        let mut sens = BTreeMap::new();
        sens.insert("a".to_string(), Tensor::from_rows(&[vec![1.0], vec![0.0]]));
        sens.insert("b".to_string(), Tensor::from_rows(&[vec![0.0], vec![2.0]]));
        let group = CouplingGroup {
            id: 0,
            kind: GroupKind::Residual,
            width: 2,
            members: vec![
                crate::model::GroupMember {
                    param: "a".to_string(),
                    axis: Axis::Rows,
                    start: 0,
                    len: 2,
                },
                crate::model::GroupMember {
                    param: "b".to_string(),
                    axis: Axis::Rows,
                    start: 0,
                    len: 2,
                },
            ],
        };
        assert_eq!(channel_scores(&sens, &group).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn sort_rules() {
        assert_eq!(sort_descending(&[0.1, 5.0, 2.0]), vec![1, 2, 0]);
        assert_eq!(sort_descending(&[1.0, 1.0, 1.0]), vec![0, 1, 2]);
    }

    #[test]
    fn identity_perms_keep_model_bitwise() {
        let m = build_model(&small_spec()).unwrap();
        let groups = coupling_graph(&m);
        let id = PermutationSet::identity(&groups);
        let out = apply_permutations(&m, &id).unwrap();
        assert_eq!(m.checksum(), out.checksum());
    }

    #[test]
    fn perm_then_inverse_restores_bitwise() {
        let m = build_model(&small_spec()).unwrap();
        let perms = random_perms(&m, 99);
        let fwd = apply_permutations(&m, &perms).unwrap();
        let back = apply_permutations(&fwd, &invert_permutations(&perms)).unwrap();
        assert_eq!(m.checksum(), back.checksum());
        assert_ne!(m.checksum(), fwd.checksum());
    }

    #[test]
    fn consistent_random_perms_preserve_loss() {
        let spec = small_spec();
        let m = build_model(&spec).unwrap();
        let batch = random_batch(&spec, 3, 8);
        let views: Vec<&[u32]> = batch.iter().map(|s| s.as_slice()).collect();
        let base = eval_loss(&spec, &m, &views).unwrap();
        for seed in 0..4 {
            let perms = random_perms(&m, seed);
            let pm = apply_permutations(&m, &perms).unwrap();
            let loss = eval_loss(&spec, &pm, &views).unwrap();
            let rel = (loss - base).abs() / base.abs();
            assert!(rel <= 1e-6, "seed {seed}: base {base} vs permuted {loss} (rel {rel})");
        }
    }

    #[test]
    fn full_reversal_residual_preserves_loss() {
        let spec = small_spec();
        let m = build_model(&spec).unwrap();
        let groups = coupling_graph(&m);
        let mut perms = PermutationSet::identity(&groups);
        perms.perms[0].perm.reverse();
        let pm = apply_permutations(&m, &perms).unwrap();
        let batch = random_batch(&spec, 2, 4);
        let views: Vec<&[u32]> = batch.iter().map(|s| s.as_slice()).collect();
        let base = eval_loss(&spec, &m, &views).unwrap();
        let loss = eval_loss(&spec, &pm, &views).unwrap();
        assert!((loss - base).abs() / base.abs() <= 1e-6);
    }

    #[test]
    fn qk_rows_never_move() {
        let m = build_model(&small_spec()).unwrap();
        let perms = random_perms(&m, 5);
        let pm = apply_permutations(&m, &perms).unwrap();
        // Row multisets of q/k are preserved under column permutation only;
        // check each original row appears (permuted in cols) at the same row.
        let groups = coupling_graph(&m);
        let residual = &perms.perms[0];
        for layer in 0..2 {
            for proj in ["q", "k"] {
                let name = format!("layer{layer}.{proj}");
                let before = m.param(&name);
                let after = pm.param(&name);
                for r in 0..before.rows() {
                    for (new_c, &old_c) in residual.perm.iter().enumerate() {
                        assert_eq!(after.at2(r, new_c), before.at2(r, old_c));
                    }
                }
            }
        }
        let _ = groups;
    }

    #[test]
    fn bad_permutation_rejected() {
        let m = build_model(&small_spec()).unwrap();
        let groups = coupling_graph(&m);
        let mut perms = PermutationSet::identity(&groups);
        perms.perms[0].perm[0] = 1; // duplicate index
        assert!(matches!(
            apply_permutations(&m, &perms),
            Err(Error::Permutation(_))
        ));
    }
}
