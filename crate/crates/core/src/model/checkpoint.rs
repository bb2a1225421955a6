//! Model checkpoint container: named f64 tensors, little-endian.
//!
//! Layout: magic "SBCK", u16 version, u32 tensor count, then per tensor
//! u32 name length, name bytes, u32 ndim, u32 dims, raw f64 data.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::Error;
use crate::tensor::Tensor;
use crate::Result;

const MAGIC: &[u8; 4] = b"SBCK";
const VERSION: u16 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, params: &BTreeMap<String, Tensor>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &dim in t.shape() {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, params: &BTreeMap<String, Tensor>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(file), params)
}

struct Reader<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> Reader<R> {
    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len();
                Ok(())
            }
            Err(_) => Err(Error::Format {
                offset: self.offset,
                msg: format!("truncated while reading {what}"),
            }),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.take(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.take(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader { inner: r, offset: 0 };
    let mut magic = [0u8; 4];
    r.take(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic, not a checkpoint".to_string() });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = r.u32("tensor count")?;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.take(&mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::Format {
            offset: r.offset,
            msg: "name not utf-8".to_string(),
        })?;
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64("tensor data")?);
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(params)
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap());
        m.insert("gain".to_string(), Tensor::new(vec![3], vec![1.0, 1.0, 0.5]).unwrap());
        m
    }

    #[test]
    fn roundtrip_exact() {
        let params = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &params).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn truncation_reports_offset() {
        let params = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &params).unwrap();
        buf.truncate(buf.len() - 3);
        match read_checkpoint(buf.as_slice()) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let r = read_checkpoint(&b"NOPE"[..]);
        assert!(matches!(r, Err(Error::Format { .. })));
    }
}
