//! `RCL1` checkpoint format, all integers little-endian:
//!
//! ```text
//! magic "RCL1" | version u8 | entry count u32
//! per entry: name length u32 | UTF-8 name | rank u32 | rank x extent u32 | values f64
//! ```

use std::fs;
use std::path::Path;

use super::{ModelParams, NnError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RCL1";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn params_to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_values() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for e in params.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.tensor.rank() as u32).to_le_bytes());
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
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
        let end = self.pos.checked_add(n).ok_or(NnError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(NnError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn params_from_bytes(buf: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4).map_err(|_| NnError::CorruptMagic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(NnError::CorruptMagic);
    }
    let version = r.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(NnError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let count = r.u32()?;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| NnError::Malformed(e.to_string()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        // refuse absurd sizes before allocating
        if n.checked_mul(8).is_none_or(|bytes| bytes > buf.len() - r.pos) {
            return Err(NnError::Truncated);
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64()?);
        }
        let t = Tensor::new(shape, data).map_err(|e| NnError::Malformed(e.to_string()))?;
        params.push(name, t)?;
    }
    if r.pos != buf.len() {
        return Err(NnError::Malformed(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, params_to_bytes(params))?;
    Ok(())
}

/// Loaded entries are all marked trainable; the mask is not persisted.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    params_from_bytes(&fs::read(path)?)
}
