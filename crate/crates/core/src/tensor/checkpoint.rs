//! Flat binary checkpoints.
//!
//! Layout (little-endian): the magic `ARNN1`, then one record per parameter
//! until end of file:
//!
//! ```text
//! u32 name_len | name (UTF-8) | u32 rank | rank × u32 extent | numel × f64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{format_err, Result};

use super::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"ARNN1";

const MAX_RANK: usize = 8;

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return format_err(format!("checkpoint truncated while reading {what} at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses checkpoint bytes into `(name, tensor)` records.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return format_err("not a checkpoint: unknown magic");
    }
    let mut r = Reader { bytes, pos: CHECKPOINT_MAGIC.len() };
    let mut entries = Vec::new();
    while r.remaining() > 0 {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| crate::Error::Format("parameter name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return format_err(format!("parameter {name:?} has unsupported rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()));
        let Some(numel) = numel else {
            return format_err(format!("parameter {name:?} extents {shape:?} exceed the file"));
        };
        let data = r
            .take(numel * 8, "values")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(entries)
}

pub fn write_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(store))?;
    Ok(())
}

/// Reads a checkpoint from disk into `store`, matching parameters by name.
pub fn read_checkpoint(store: &mut ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let bytes = fs::read(path)?;
    store.load_values(decode_checkpoint(&bytes)?)
}
