//! Named-tensor checkpoint container.
//!
//! Layout (little-endian):
//!
//! | field | type |
//! |-------|------|
//! | magic `GCNFCKPT` | 8 bytes |
//! | version (= 1) | u32 |
//! | entry count | u64 |
//! | per entry: name length, UTF-8 name | u32, bytes |
//! | per entry: rank, dims | u32, rank x u64 |
//! | per entry: values | f64 x product(dims), row-major |
//!
//! Entries are written in name order.

use std::path::Path;

use super::params::ParamStore;
use crate::binio::Reader;
use crate::diff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GCNFCKPT";
const VERSION: u32 = 1;

pub fn write_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader::new(bytes);
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 8,
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = r.u64("entry count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Parse {
                offset: at,
                detail: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(r.bad("tensor rank"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.bad("tensor size"))?;
        let data = r.reals(numel, &name)?;
        if store.contains(&name) {
            return Err(Error::Parse {
                offset: at,
                detail: format!("duplicate tensor `{name}`"),
            });
        }
        store.insert(name, Tensor::from_parts(shape, data));
    }
    if !r.at_end() {
        return Err(Error::Parse {
            offset: r.pos,
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(store)
}

pub fn write_checkpoint_file(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(store))?;
    Ok(())
}

pub fn read_checkpoint_file(path: &Path) -> Result<ParamStore> {
    read_checkpoint(&std::fs::read(path)?)
}
