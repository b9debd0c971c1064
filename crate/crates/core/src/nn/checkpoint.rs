//! Binary parameter snapshots: `CALICA01`, a little-endian `u32` entry
//! count, then per entry a `u32`-length UTF-8 name, `u32` rank, `u32` dims and
//! the `f32` values.

use alloc::string::String;
use alloc::vec::Vec;

use super::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"CALICA01";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("truncated checkpoint at byte {offset}")]
    Truncated { offset: usize },
    #[error("entry name is not valid UTF-8 at byte {offset}")]
    BadName { offset: usize },
    #[error("entry `{name}` has a shape too large to be real")]
    BadShape { name: String },
    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
}

pub type Entry = (String, Tensor<f32>);

pub fn encode_entries<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn encode(store: &ParamStore<f32>) -> Vec<u8> {
    encode_entries(store.named())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated { offset: self.pos })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = r.u32()? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let at = r.pos;
        let name = core::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::BadName { offset: at })?
            .into();
        let rank = r.u32()? as usize;
        // each dim needs 4 bytes; reject ranks the buffer cannot hold before allocating
        if rank > (bytes.len() - r.pos) / 4 {
            return Err(CheckpointError::Truncated { offset: r.pos });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::BadShape { name: String::clone(&name) })?;
        let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::BadShape { name: String::clone(&name) })?)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|_| CheckpointError::BadShape { name: String::clone(&name) })?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(out)
}
