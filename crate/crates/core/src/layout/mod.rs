//! Hardware-aligned block partitioning of the quantizable matrices and
//! sensitivity-driven bi-directional channel reordering.

pub mod reorder;

pub use reorder::{
    apply_permutations, channel_scores, compute_permutations, invert_permutations,
    permute_matrix_like, PermutationSet,
};

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::ModelBundle;
use crate::Result;

/// Block grid for one linear site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteGrid {
    pub site: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row blocks; the last may be ragged.
    pub grid_rows: usize,
    /// Column blocks; columns always divide exactly.
    pub grid_cols: usize,
    /// First flat block id of this site.
    pub first_block: usize,
}

/// Location of one block in its matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockRef {
    pub site: usize,
    pub row_block: usize,
    pub col_block: usize,
    pub row_start: usize,
    pub row_len: usize,
    pub col_start: usize,
    pub col_len: usize,
}

/// Partition of every quantizable matrix into block_rows x block_cols tiles
/// with a global flat block-id space 0..n_blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockPartition {
    pub block_rows: usize,
    pub block_cols: usize,
    pub grids: Vec<SiteGrid>,
    pub n_blocks: usize,
    /// Element count per block, indexed by flat id.
    pub block_elems: Vec<usize>,
    pub total_weights: usize,
}

impl BlockPartition {
    /// Flat id for a (site, row block, col block) triple.
    pub fn flat_id(&self, site: usize, row_block: usize, col_block: usize) -> usize {
        let g = &self.grids[site];
        debug_assert!(row_block < g.grid_rows && col_block < g.grid_cols);
        g.first_block + row_block * g.grid_cols + col_block
    }

    /// Inverse of [`flat_id`].
    pub fn locate(&self, flat: usize) -> BlockRef {
        let g = self
            .grids
            .iter()
            .rfind(|g| g.first_block <= flat)
            .expect("flat id below first site");
        let local = flat - g.first_block;
        let row_block = local / g.grid_cols;
        let col_block = local % g.grid_cols;
        let row_start = row_block * self.block_rows;
        let row_len = self.block_rows.min(g.rows - row_start);
        BlockRef {
            site: g.site,
            row_block,
            col_block,
            row_start,
            row_len,
            col_start: col_block * self.block_cols,
            col_len: self.block_cols,
        }
    }

    /// Flat ids of every block of one site.
    pub fn site_blocks(&self, site: usize) -> std::ops::Range<usize> {
        let g = &self.grids[site];
        g.first_block..g.first_block + g.grid_rows * g.grid_cols
    }

    /// Element-weighted average bits of an assignment.
    pub fn weighted_avg_bits(&self, assignment: &[u8]) -> f64 {
        let total: u64 = assignment
            .iter()
            .zip(&self.block_elems)
            .map(|(&b, &m)| b as u64 * m as u64)
            .sum();
        total as f64 / self.total_weights as f64
    }

    /// Total weight-bits of an assignment (integer, exact).
    pub fn weight_bits(&self, assignment: &[u8]) -> u64 {
        assignment
            .iter()
            .zip(&self.block_elems)
            .map(|(&b, &m)| b as u64 * m as u64)
            .sum()
    }
}

/// Tile every quantizable matrix. Ragged tails are allowed on the row axis
/// only; `block_cols` must divide every matrix's column count and be a
/// multiple of `group_size`.
pub fn partition_weights(
    model: &ModelBundle,
    block_rows: usize,
    block_cols: usize,
    group_size: usize,
) -> Result<BlockPartition> {
    if block_rows == 0 || block_cols == 0 {
        return Err(Error::config("block dims must be positive".to_string()));
    }
    if group_size == 0 || block_cols % group_size != 0 {
        return Err(Error::config(format!(
            "block_cols {block_cols} must be a multiple of group_size {group_size}"
        )));
    }
    let mut grids = Vec::with_capacity(model.sites.len());
    let mut block_elems = Vec::new();
    let mut total_weights = 0usize;
    let mut next = 0usize;
    for site in &model.sites {
        if block_cols > site.cols {
            return Err(Error::config(format!(
                "block_cols {block_cols} exceeds {} cols of site {}",
                site.cols, site.name
            )));
        }
        if site.cols % block_cols != 0 {
            return Err(Error::config(format!(
                "site {} cols {} not divisible by block_cols {block_cols}",
                site.name, site.cols
            )));
        }
        let grid_rows = site.rows.div_ceil(block_rows);
        let grid_cols = site.cols / block_cols;
        let g = SiteGrid {
            site: site.id,
            rows: site.rows,
            cols: site.cols,
            grid_rows,
            grid_cols,
            first_block: next,
        };
        for rb in 0..grid_rows {
            let row_len = block_rows.min(site.rows - rb * block_rows);
            for _cb in 0..grid_cols {
                block_elems.push(row_len * block_cols);
            }
        }
        next += grid_rows * grid_cols;
        total_weights += site.rows * site.cols;
        grids.push(g);
    }
    Ok(BlockPartition {
        block_rows,
        block_cols,
        grids,
        n_blocks: next,
        block_elems,
        total_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelSpec};

    #[test]
    fn single_block_site() {
        // A 64x128 site tiled with 64x128 blocks is one block.
        let spec = ModelSpec::default();
        let m = build_model(&spec).unwrap();
        let p = partition_weights(&m, 64, 64, 32).unwrap();
        // q/k/v/o are 64x64 -> 1 block each; up/gate 128x64 -> 2; down 64x128 -> 2.
        let site0 = &p.grids[0];
        assert_eq!(site0.grid_rows * site0.grid_cols, 1);
    }

    #[test]
    fn default_desk_partition_block_count() {
        let m = build_model(&ModelSpec::default()).unwrap();
        let p = partition_weights(&m, 16, 32, 32).unwrap();
        // Per layer: q/k/v/o 4*2 blocks x4, up/gate 8*2 x2, down 4*4.
        // = 32 + 32 + 16 = 80 per layer, 640 total.
        assert_eq!(p.n_blocks, 640);
        assert_eq!(p.block_elems.iter().sum::<usize>(), p.total_weights);
        assert_eq!(p.total_weights, 327_680);
    }

    #[test]
    fn misaligned_group_rejected() {
        let m = build_model(&ModelSpec::default()).unwrap();
        assert!(partition_weights(&m, 16, 48, 32).is_err());
    }

    #[test]
    fn flat_id_roundtrip() {
        let m = build_model(&ModelSpec::default()).unwrap();
        let p = partition_weights(&m, 16, 32, 32).unwrap();
        for flat in 0..p.n_blocks {
            let r = p.locate(flat);
            assert_eq!(p.flat_id(r.site, r.row_block, r.col_block), flat);
            assert_eq!(p.block_elems[flat], r.row_len * r.col_len);
        }
    }

    #[test]
    fn ragged_rows_counted() {
        // 24-row blocks on 64-row sites: rows split 24/24/16.
        let m = build_model(&ModelSpec::default()).unwrap();
        let p = partition_weights(&m, 24, 32, 32).unwrap();
        let r = p.locate(p.flat_id(0, 2, 0));
        assert_eq!(r.row_len, 16);
        assert_eq!(p.block_elems.iter().sum::<usize>(), p.total_weights);
    }
}
