//! Binary tensor blobs: a self-describing map of name → (shape, LE `f32`).
//!
//! Layout: magic `SRTB`, `u32` version, `u32` entry count, then per entry
//! (sorted by name) a `u32` name length, UTF-8 name, `u32` rank, `u64` per
//! dimension and the values in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"SRTB";
const VERSION: u32 = 1;

pub type Tensors = BTreeMap<String, Matrix>;

pub fn encode(tensors: &Tensors) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
        for &v in m.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("blob truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Tensors> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a tensor blob (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported blob version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Tensors::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        if rank != 2 {
            return Err(Error::Checkpoint(format!("{name}: rank {rank}, expected 2")));
        }
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
        let bytes = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?)?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let m = Matrix::from_shape_vec((rows, cols), values).expect("length checked");
        if out.insert(name.clone(), m).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn write(path: &Path, tensors: &Tensors) -> Result<()> {
    fs::write(path, encode(tensors))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Tensors> {
    decode(&fs::read(path)?)
}
