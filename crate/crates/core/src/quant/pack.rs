//! Bit-exact packed storage for quantized sites.
//!
//! Per tensor: a header (rows, cols, block_rows, block_cols, group_size, all
//! u32 little-endian), one bitwidth byte per block in row-major grid order,
//! then the payload. Payload layout per block (row-major), per group
//! (in-block rows, then column groups left to right): the scale as two f16
//! bytes, then a bitstream of the zero code followed by the group's codes,
//! packed LSB-first and padded to a byte boundary per group. Pruned (0-bit)
//! blocks contribute no payload. Payload length is computable from the
//! header and the bitwidth table alone.
//!
//! The packed-weights file is magic "SBIT", format version u16, tensor count
//! u32, then each tensor in site-id order. All integers little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{BlockCodes, GroupQuant, QuantizedModel};
use crate::error::Error;
use crate::layout::BlockPartition;
use crate::tensor::Tensor;
use crate::Result;

pub const MAGIC: &[u8; 4] = b"SBIT";
pub const VERSION: u16 = 1;

/// One packed site.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedTensor {
    pub rows: u32,
    pub cols: u32,
    pub block_rows: u32,
    pub block_cols: u32,
    pub group_size: u32,
    /// One byte per block, row-major over the block grid.
    pub block_bits: Vec<u8>,
    pub payload: Vec<u8>,
}

struct BitWriter {
    out: Vec<u8>,
    acc: u64,
    fill: u32,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter { out: Vec::new(), acc: 0, fill: 0 }
    }

    fn push(&mut self, value: u64, bits: u32) {
        debug_assert!(bits <= 32);
        self.acc |= value << self.fill;
        self.fill += bits;
        while self.fill >= 8 {
            self.out.push(self.acc as u8);
            self.acc >>= 8;
            self.fill -= 8;
        }
    }

    fn pad_to_byte(&mut self) {
        if self.fill > 0 {
            self.out.push(self.acc as u8);
            self.acc = 0;
            self.fill = 0;
        }
    }
}

struct BitReader<'a> {
    data: &'a [u8],
    byte: usize,
    acc: u64,
    fill: u32,
    base_offset: usize,
}

impl<'a> BitReader<'a> {
    fn new(data: &'a [u8], base_offset: usize) -> Self {
        BitReader { data, byte: 0, acc: 0, fill: 0, base_offset }
    }

    fn take(&mut self, bits: u32) -> Result<u64> {
        while self.fill < bits {
            let Some(&b) = self.data.get(self.byte) else {
                return Err(Error::Format {
                    offset: self.base_offset + self.byte,
                    msg: "truncated bitstream".to_string(),
                });
            };
            self.acc |= (b as u64) << self.fill;
            self.byte += 1;
            self.fill += 8;
        }
        let v = self.acc & ((1u64 << bits) - 1);
        self.acc >>= bits;
        self.fill -= bits;
        Ok(v)
    }

    fn pad_to_byte(&mut self) {
        self.acc = 0;
        self.fill = 0;
    }

    fn consumed(&self) -> usize {
        self.byte
    }
}

/// Grid geometry implied by a packed header.
pub fn grid_dims(rows: u32, cols: u32, block_rows: u32, block_cols: u32) -> (usize, usize) {
    let gr = (rows as usize).div_ceil(block_rows as usize);
    let gc = cols as usize / block_cols as usize;
    (gr, gc)
}

fn block_row_len(rows: u32, block_rows: u32, rb: usize) -> usize {
    (block_rows as usize).min(rows as usize - rb * block_rows as usize)
}

/// Bytes of one group's bitstream (zero code + codes, padded to a byte).
pub fn group_stream_len(bits: u8, group_size: u32) -> usize {
    ((bits as usize) * (group_size as usize + 1)).div_ceil(8)
}

/// Payload bytes contributed by one block.
pub fn block_payload_len(bits: u8, elems: usize, group_size: u32) -> usize {
    if bits == 0 {
        return 0;
    }
    let groups = elems / group_size as usize;
    groups * (2 + group_stream_len(bits, group_size))
}

/// Total payload length implied by header + bitwidth table.
pub fn payload_len(
    rows: u32,
    cols: u32,
    block_rows: u32,
    block_cols: u32,
    group_size: u32,
    block_bits: &[u8],
) -> usize {
    let (gr, gc) = grid_dims(rows, cols, block_rows, block_cols);
    let mut total = 0;
    for rb in 0..gr {
        let elems = block_row_len(rows, block_rows, rb) * block_cols as usize;
        for cb in 0..gc {
            total += block_payload_len(block_bits[rb * gc + cb], elems, group_size);
        }
    }
    total
}

/// Serialized size of one tensor record (header + table + payload).
pub fn tensor_record_len(pt: &PackedTensor) -> usize {
    20 + pt.block_bits.len() + pt.payload.len()
}

/// Closed-form serialized size of a whole packed file.
pub fn predicted_file_len(tensors: &[PackedTensor]) -> usize {
    4 + 2 + 4 + tensors.iter().map(tensor_record_len).sum::<usize>()
}

/// Pack one site's blocks.
pub fn pack_tensor(
    rows: usize,
    cols: usize,
    block_rows: usize,
    block_cols: usize,
    group_size: usize,
    blocks: &[BlockCodes],
) -> Result<PackedTensor> {
    let (gr, gc) = grid_dims(rows as u32, cols as u32, block_rows as u32, block_cols as u32);
    if blocks.len() != gr * gc {
        return Err(Error::contract(format!(
            "{} blocks for a {gr}x{gc} grid",
            blocks.len()
        )));
    }
    let mut block_bits = Vec::with_capacity(blocks.len());
    let mut payload = Vec::new();
    for (i, b) in blocks.iter().enumerate() {
        block_bits.push(b.bits);
        if b.bits == 0 {
            continue;
        }
        let rb = i / gc;
        let expect_groups =
            block_row_len(rows as u32, block_rows as u32, rb) * (block_cols / group_size);
        if b.groups.len() != expect_groups {
            return Err(Error::contract(format!(
                "block {i} has {} groups, expected {expect_groups}",
                b.groups.len()
            )));
        }
        for g in &b.groups {
            payload.extend_from_slice(&g.scale_bits.to_le_bytes());
            let mut w = BitWriter::new();
            w.push(g.zero as u64, b.bits as u32);
            for &c in &g.codes {
                w.push(c as u64, b.bits as u32);
            }
            w.pad_to_byte();
            payload.extend_from_slice(&w.out);
        }
    }
    Ok(PackedTensor {
        rows: rows as u32,
        cols: cols as u32,
        block_rows: block_rows as u32,
        block_cols: block_cols as u32,
        group_size: group_size as u32,
        block_bits,
        payload,
    })
}

/// Recover the block codes from a packed tensor. Lossless on codes, zeros,
/// and (f16) scales.
pub fn unpack_tensor(pt: &PackedTensor) -> Result<Vec<BlockCodes>> {
    let (gr, gc) = grid_dims(pt.rows, pt.cols, pt.block_rows, pt.block_cols);
    if pt.block_bits.len() != gr * gc {
        return Err(Error::Format {
            offset: 20,
            msg: format!("bitwidth table has {} entries, grid needs {}", pt.block_bits.len(), gr * gc),
        });
    }
    let expected = payload_len(pt.rows, pt.cols, pt.block_rows, pt.block_cols, pt.group_size, &pt.block_bits);
    if pt.payload.len() != expected {
        return Err(Error::Format {
            offset: 20 + pt.block_bits.len() + pt.payload.len().min(expected),
            msg: format!("payload is {} bytes, header implies {expected}", pt.payload.len()),
        });
    }
    let gs = pt.group_size as usize;
    let mut blocks = Vec::with_capacity(gr * gc);
    let mut off = 0usize;
    let payload_base = 20 + pt.block_bits.len();
    for rb in 0..gr {
        let row_len = block_row_len(pt.rows, pt.block_rows, rb);
        for cb in 0..gc {
            let bits = pt.block_bits[rb * gc + cb];
            if bits == 0 {
                blocks.push(BlockCodes { bits: 0, groups: Vec::new() });
                continue;
            }
            let n_groups = row_len * (pt.block_cols as usize / gs);
            let mut groups = Vec::with_capacity(n_groups);
            for _ in 0..n_groups {
                if off + 2 > pt.payload.len() {
                    return Err(Error::Format {
                        offset: payload_base + off,
                        msg: "truncated scale".to_string(),
                    });
                }
                let scale_bits = u16::from_le_bytes([pt.payload[off], pt.payload[off + 1]]);
                off += 2;
                let stream_len = group_stream_len(bits, pt.group_size);
                if off + stream_len > pt.payload.len() {
                    return Err(Error::Format {
                        offset: payload_base + pt.payload.len(),
                        msg: "truncated code stream".to_string(),
                    });
                }
                let mut r = BitReader::new(&pt.payload[off..off + stream_len], payload_base + off);
                let zero = r.take(bits as u32)? as u8;
                let mut codes = Vec::with_capacity(gs);
                for _ in 0..gs {
                    codes.push(r.take(bits as u32)? as u8);
                }
                r.pad_to_byte();
                debug_assert_eq!(r.consumed(), stream_len);
                off += stream_len;
                groups.push(GroupQuant { bits, codes, scale_bits, zero });
            }
            blocks.push(BlockCodes { bits, groups });
        }
    }
    Ok(blocks)
}

/// Dequantize a packed tensor back to a dense matrix.
pub fn dequant_packed(pt: &PackedTensor) -> Result<Tensor> {
    let blocks = unpack_tensor(pt)?;
    let (gr, gc) = grid_dims(pt.rows, pt.cols, pt.block_rows, pt.block_cols);
    let (rows, cols) = (pt.rows as usize, pt.cols as usize);
    let gs = pt.group_size as usize;
    let mut data = vec![0.0; rows * cols];
    for rb in 0..gr {
        let row_start = rb * pt.block_rows as usize;
        let row_len = block_row_len(pt.rows, pt.block_rows, rb);
        for cb in 0..gc {
            let b = &blocks[rb * gc + cb];
            if b.bits == 0 {
                continue; // already zeros
            }
            let col_start = cb * pt.block_cols as usize;
            let mut gi = 0;
            for r in row_start..row_start + row_len {
                for g in 0..pt.block_cols as usize / gs {
                    let c0 = col_start + g * gs;
                    b.groups[gi].dequant_into(&mut data[r * cols + c0..r * cols + c0 + gs]);
                    gi += 1;
                }
            }
        }
    }
    Tensor::new(vec![rows, cols], data)
}

/// Pack every quantized site, in site-id order.
pub fn pack_model(qm: &QuantizedModel, partition: &BlockPartition) -> Result<Vec<PackedTensor>> {
    let gs = qm
        .sites
        .iter()
        .flat_map(|s| s.blocks.iter())
        .flat_map(|b| b.groups.first())
        .map(|g| g.codes.len())
        .next()
        .unwrap_or(partition.block_cols);
    qm.sites
        .iter()
        .map(|s| {
            let g = &partition.grids[s.site];
            pack_tensor(g.rows, g.cols, partition.block_rows, partition.block_cols, gs, &s.blocks)
        })
        .collect()
}

pub fn write_packed_file<W: Write>(mut w: W, tensors: &[PackedTensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        for v in [t.rows, t.cols, t.block_rows, t.block_cols, t.group_size] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&t.block_bits)?;
        w.write_all(&t.payload)?;
    }
    Ok(())
}

pub fn save_packed(path: &Path, tensors: &[PackedTensor]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_packed_file(std::io::BufWriter::new(f), tensors)
}

pub fn read_packed_file<R: Read>(mut r: R) -> Result<Vec<PackedTensor>> {
    let mut offset = 0usize;
    let mut need = |r: &mut R, buf: &mut [u8], what: &str| -> Result<()> {
        r.read_exact(buf).map_err(|_| Error::Format {
            offset,
            msg: format!("truncated while reading {what}"),
        })?;
        offset += buf.len();
        Ok(())
    };
    let mut magic = [0u8; 4];
    need(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic, not a packed weight file".to_string() });
    }
    let mut v2 = [0u8; 2];
    need(&mut r, &mut v2, "version")?;
    if u16::from_le_bytes(v2) != VERSION {
        return Err(Error::Format { offset: 4, msg: "unsupported format version".to_string() });
    }
    let mut v4 = [0u8; 4];
    need(&mut r, &mut v4, "tensor count")?;
    let count = u32::from_le_bytes(v4);
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut hdr = [0u32; 5];
        for h in hdr.iter_mut() {
            need(&mut r, &mut v4, "tensor header")?;
            *h = u32::from_le_bytes(v4);
        }
        let [rows, cols, block_rows, block_cols, group_size] = hdr;
        if block_rows == 0 || block_cols == 0 || group_size == 0 || block_cols % group_size != 0 {
            return Err(Error::Format {
                offset: offset - 20,
                msg: format!("inconsistent header {hdr:?}"),
            });
        }
        let (gr, gc) = grid_dims(rows, cols, block_rows, block_cols);
        let mut block_bits = vec![0u8; gr * gc];
        need(&mut r, &mut block_bits, "bitwidth table")?;
        let plen = payload_len(rows, cols, block_rows, block_cols, group_size, &block_bits);
        let mut payload = vec![0u8; plen];
        need(&mut r, &mut payload, "payload")?;
        tensors.push(PackedTensor { rows, cols, block_rows, block_cols, group_size, block_bits, payload });
    }
    Ok(tensors)
}

pub fn load_packed(path: &Path) -> Result<Vec<PackedTensor>> {
    let f = std::fs::File::open(path)?;
    read_packed_file(std::io::BufReader::new(f))
}
