//! Channel-coupling graph: which (parameter, axis, slice) triples must share
//! a permutation for the network function to be preserved.
//!
//! Three kinds of group:
//! - one residual group spanning the shared hidden dimension everywhere it
//!   appears (embedding/head columns, norm gains, q/k/v/up/gate inputs,
//!   o/down outputs);
//! - one MLP-local group per layer (up/gate rows, down columns);
//! - one group per attention head (v rows and o columns of that head's
//!   slice). Q/K output channels are never reordered: their per-head internal
//!   order is pinned the way positional mechanisms pin it in larger models.

use serde::{Deserialize, Serialize};

use super::{param_name, ModelBundle, ProjKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupKind {
    Residual,
    MlpLocal { layer: usize },
    HeadLocal { layer: usize, head: usize },
}

/// One permutable slice of one parameter. 1-D gains use `Rows`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMember {
    pub param: String,
    pub axis: Axis,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingGroup {
    pub id: usize,
    pub kind: GroupKind,
    /// Permutation length; every member slice has this length.
    pub width: usize,
    pub members: Vec<GroupMember>,
}

fn member(param: String, axis: Axis, start: usize, len: usize) -> GroupMember {
    GroupMember { param, axis, start, len }
}

/// Build the coupling graph for a model.
pub fn coupling_graph(model: &ModelBundle) -> Vec<CouplingGroup> {
    let spec = &model.spec;
    let d = spec.d_model;
    let dh = spec.d_head;
    let f = spec.d_ff;
    let mut groups = Vec::with_capacity(1 + spec.n_layers * (1 + spec.n_heads));

    let mut residual = vec![
        member("embedding".to_string(), Axis::Cols, 0, d),
        member("head".to_string(), Axis::Cols, 0, d),
        member("final_norm".to_string(), Axis::Rows, 0, d),
    ];
    for layer in 0..spec.n_layers {
        residual.push(member(format!("layer{layer}.norm_attn"), Axis::Rows, 0, d));
        residual.push(member(format!("layer{layer}.norm_mlp"), Axis::Rows, 0, d));
        for proj in [ProjKind::Q, ProjKind::K, ProjKind::V, ProjKind::Up, ProjKind::Gate] {
            residual.push(member(param_name(layer, proj), Axis::Cols, 0, d));
        }
        residual.push(member(param_name(layer, ProjKind::O), Axis::Rows, 0, d));
        residual.push(member(param_name(layer, ProjKind::Down), Axis::Rows, 0, d));
    }
    groups.push(CouplingGroup { id: 0, kind: GroupKind::Residual, width: d, members: residual });

    for layer in 0..spec.n_layers {
        groups.push(CouplingGroup {
            id: groups.len(),
            kind: GroupKind::MlpLocal { layer },
            width: f,
            members: vec![
                member(param_name(layer, ProjKind::Up), Axis::Rows, 0, f),
                member(param_name(layer, ProjKind::Gate), Axis::Rows, 0, f),
                member(param_name(layer, ProjKind::Down), Axis::Cols, 0, f),
            ],
        });
    }

    for layer in 0..spec.n_layers {
        for head in 0..spec.n_heads {
            let off = head * dh;
            groups.push(CouplingGroup {
                id: groups.len(),
                kind: GroupKind::HeadLocal { layer, head },
                width: dh,
                members: vec![
                    member(param_name(layer, ProjKind::V), Axis::Rows, off, dh),
                    member(param_name(layer, ProjKind::O), Axis::Cols, off, dh),
                ],
            });
        }
    }

    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelSpec};
    use std::collections::BTreeSet;

    #[test]
    fn default_spec_group_count() {
        let m = build_model(&ModelSpec::default()).unwrap();
        let g = coupling_graph(&m);
        // 1 residual + 8 mlp-local + 8*4 head-local
        assert_eq!(g.len(), 41);
    }

    #[test]
    fn widths_match_kinds() {
        let m = build_model(&ModelSpec::default()).unwrap();
        for g in coupling_graph(&m) {
            let expect = match g.kind {
                GroupKind::Residual => 64,
                GroupKind::MlpLocal { .. } => 128,
                GroupKind::HeadLocal { .. } => 16,
            };
            assert_eq!(g.width, expect);
            for mem in &g.members {
                assert_eq!(mem.len, g.width, "member {} of {:?}", mem.param, g.kind);
            }
        }
    }

    #[test]
    fn groups_disjoint_and_heads_cover_v_o() {
        let m = build_model(&ModelSpec::default()).unwrap();
        let groups = coupling_graph(&m);
        let mut seen: BTreeSet<(String, bool, usize)> = BTreeSet::new();
        for g in &groups {
            for mem in &g.members {
                for i in mem.start..mem.start + mem.len {
                    let key = (mem.param.clone(), matches!(mem.axis, Axis::Rows), i);
                    assert!(seen.insert(key), "overlap at {}:{:?}:{}", mem.param, mem.axis, i);
                }
            }
        }
        // Every v row and o column lies in exactly one head-local group.
        for layer in 0..8 {
            for i in 0..64 {
                assert!(seen.contains(&(format!("layer{layer}.v"), true, i)));
                assert!(seen.contains(&(format!("layer{layer}.o"), false, i)));
            }
            // Q/K output channels belong to no group.
            for i in 0..64 {
                assert!(!seen.contains(&(format!("layer{layer}.q"), true, i)));
                assert!(!seen.contains(&(format!("layer{layer}.k"), true, i)));
            }
        }
    }

    #[test]
    fn members_fit_parameter_shapes() {
        let m = build_model(&ModelSpec::default()).unwrap();
        for g in coupling_graph(&m) {
            for mem in &g.members {
                let t = m.param(&mem.param);
                let extent = match mem.axis {
                    Axis::Rows => t.rows(),
                    Axis::Cols => t.cols(),
                };
                assert!(mem.start + mem.len <= extent);
            }
        }
    }
}
