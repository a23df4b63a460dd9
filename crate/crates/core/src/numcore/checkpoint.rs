//! Versioned binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "KNITCKPT"
//! version   u32      1
//! precision u8       32 | 64
//! count     u32      number of tensors
//! table     count x { name_len u32, name utf-8, ndim u32, dims u64 x ndim }
//! values    row-major values of every tensor, in table order
//! ```

use std::path::Path;

use super::{ParamStore, Precision, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"KNITCKPT";
pub const VERSION: u32 = 1;

pub fn encode<S: Scalar>(store: &ParamStore<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(S::PRECISION.bits());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, _, t) in store.iter() {
        for &v in t.data() {
            v.write_le(&mut out);
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
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Precision recorded in an encoded checkpoint header.
pub fn peek_precision(bytes: &[u8]) -> Result<Precision> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let bits = r.take(1)?[0];
    Precision::from_bits(bits).ok_or_else(|| Error::Checkpoint(format!("bad precision {bits}")))
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<ParamStore<S>> {
    let precision = peek_precision(bytes)?;
    if precision != S::PRECISION {
        return Err(Error::Checkpoint(format!(
            "checkpoint is {}-bit, requested {}-bit",
            precision.bits(),
            S::PRECISION.bits()
        )));
    }
    let mut r = Reader {
        buf: bytes,
        pos: 8 + 4 + 1,
    };
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("non-utf8 tensor name".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        table.push((name, shape));
    }
    let width = (S::PRECISION.bits() / 8) as usize;
    let mut store = ParamStore::new();
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        let raw = r.take(n * width)?;
        let data = raw.chunks_exact(width).map(S::read_le).collect();
        store.add(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(store)
}

pub fn save<S: Scalar>(path: &Path, store: &ParamStore<S>) -> Result<()> {
    std::fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load<S: Scalar>(path: &Path) -> Result<ParamStore<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
