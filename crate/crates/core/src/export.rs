//! Artifact writers: PGM heatmaps, CSV tables, JSONL traces, permutation
//! sidecars. All formats are plain text or byte-specified so runs diff
//! cleanly.

use std::io::Write;

use crate::layout::{BlockPartition, PermutationSet};
use crate::search::SearchTrace;
use crate::sensitivity::SensitivitySnapshot;
use crate::tensor::Tensor;
use crate::Result;

/// 8-bit binary PGM (P5).
pub fn write_pgm<W: Write>(mut w: W, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), width * height);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)?;
    Ok(())
}

/// Sensitivity heatmap pixels: each row scaled by its own max (row-max
/// normalization); an all-zero row stays black.
pub fn sensitivity_pixels(s: &Tensor) -> Vec<u8> {
    let (rows, cols) = (s.rows(), s.cols());
    let mut out = vec![0u8; rows * cols];
    for r in 0..rows {
        let row = s.row(r);
        let max = row.iter().cloned().fold(0.0f64, f64::max);
        if max <= 0.0 {
            continue;
        }
        for (c, &v) in row.iter().enumerate() {
            out[r * cols + c] = ((v / max) * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Bit-allocation heatmap pixels: linear map of [0, bit_max] onto [0, 255].
pub fn bits_pixels(bits: &[u8], bit_max: u8) -> Vec<u8> {
    bits.iter()
        .map(|&b| ((b as f64 / bit_max.max(1) as f64) * 255.0).round() as u8)
        .collect()
}

/// Per-site block-bitwidth grid of an assignment, row-major.
pub fn site_bits_grid(partition: &BlockPartition, assignment: &[u8], site: usize) -> (Vec<u8>, usize, usize) {
    let g = &partition.grids[site];
    let bits: Vec<u8> = partition.site_blocks(site).map(|f| assignment[f]).collect();
    (bits, g.grid_cols, g.grid_rows)
}

/// Matrix as CSV with full float precision.
pub fn write_matrix_csv<W: Write>(mut w: W, m: &Tensor) -> Result<()> {
    for r in 0..m.rows() {
        let row = m.row(r);
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

/// Snapshot CSV: block id, bits, s_up, s_down.
pub fn write_snapshot_csv<W: Write>(
    mut w: W,
    snap: &SensitivitySnapshot,
    assignment: &[u8],
) -> Result<()> {
    writeln!(w, "block,bits,s_up,s_down")?;
    for (i, (&up, &down)) in snap.s_up.iter().zip(&snap.s_down).enumerate() {
        writeln!(w, "{i},{},{up},{down}", assignment[i])?;
    }
    Ok(())
}

/// Final assignment CSV: site, row block, col block, bits.
pub fn write_assignment_csv<W: Write>(
    mut w: W,
    partition: &BlockPartition,
    assignment: &[u8],
) -> Result<()> {
    writeln!(w, "site,row_block,col_block,bits")?;
    for flat in 0..partition.n_blocks {
        let r = partition.locate(flat);
        writeln!(w, "{},{},{},{}", r.site, r.row_block, r.col_block, assignment[flat])?;
    }
    Ok(())
}

/// Search trace as JSON lines, one record per iteration.
pub fn write_trace_jsonl<W: Write>(mut w: W, trace: &SearchTrace) -> Result<()> {
    for rec in &trace.records {
        let line = serde_json::to_string(rec)
            .map_err(|e| crate::Error::Contract(format!("trace serialization: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Permutation sidecar JSON (group id -> new-to-old index array).
pub fn write_permutations_json<W: Write>(w: W, perms: &PermutationSet) -> Result<()> {
    serde_json::to_writer_pretty(w, perms)
        .map_err(|e| crate::Error::Contract(format!("permutation serialization: {e}")))
}

pub fn read_permutations_json<R: std::io::Read>(r: R) -> Result<PermutationSet> {
    serde_json::from_reader(r)
        .map_err(|e| crate::Error::Format { offset: 0, msg: format!("permutation sidecar: {e}") })
}

/// Mean pixel value of each quadrant (top-left, top-right, bottom-left,
/// bottom-right); used for the clustering checks on heatmaps.
pub fn quadrant_means(pixels: &[u8], width: usize, height: usize) -> [f64; 4] {
    let (hw, hh) = (width / 2, height / 2);
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 4];
    for r in 0..height {
        for c in 0..width {
            let q = match (r < hh, c < hw) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            sums[q] += pixels[r * width + c] as f64;
            counts[q] += 1;
        }
    }
    let mut out = [0.0; 4];
    for q in 0..4 {
        out[q] = if counts[q] == 0 { 0.0 } else { sums[q] / counts[q] as f64 };
    }
    out
}

/// Fraction of total mass inside the top-left quadrant of a matrix.
pub fn top_left_mass_fraction(s: &Tensor) -> f64 {
    let (rows, cols) = (s.rows(), s.cols());
    let (hr, hc) = (rows / 2, cols / 2);
    let mut quad = 0.0;
    let mut total = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let v = s.at2(r, c).abs();
            total += v;
            if r < hr && c < hc {
                quad += v;
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        quad / total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_payload() {
        let mut buf = Vec::new();
        write_pgm(&mut buf, 3, 2, &[0, 128, 255, 1, 2, 3]).unwrap();
        assert!(buf.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&buf[buf.len() - 6..], &[0, 128, 255, 1, 2, 3]);
    }

    #[test]
    fn zero_sensitivity_is_black() {
        let s = Tensor::zeros(vec![4, 4]);
        assert!(sensitivity_pixels(&s).iter().all(|&p| p == 0));
    }

    #[test]
    fn row_max_normalization() {
        let s = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 8.0]]);
        let px = sensitivity_pixels(&s);
        assert_eq!(px, vec![128, 255, 0, 255]);
    }

    #[test]
    fn single_bright_tile() {
        let mut bits = vec![1u8; 16];
        bits[5] = 8;
        let px = bits_pixels(&bits, 8);
        assert_eq!(px[5], 255);
        assert!(px.iter().enumerate().all(|(i, &p)| i == 5 || p == 32));
    }

    #[test]
    fn quadrant_means_pick_up_top_left() {
        let mut px = vec![0u8; 16];
        px[0] = 200;
        px[1] = 200;
        px[4] = 200;
        px[5] = 200;
        let q = quadrant_means(&px, 4, 4);
        assert!(q[0] > q[1] && q[0] > q[2] && q[0] > q[3]);
    }

    #[test]
    fn mass_fraction_definition() {
        let s = Tensor::from_rows(&[vec![3.0, 1.0], vec![1.0, 1.0]]);
        assert!((top_left_mass_fraction(&s) - 0.5).abs() < 1e-12);
    }
}
