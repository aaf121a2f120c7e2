//! Binary morphable-model container.
//!
//! Layout (all integers and reals little-endian):
//!
//! | field | type |
//! |-------|------|
//! | magic `GCNFMM\0\0` | 8 bytes |
//! | version (= 1) | u32 |
//! | vertex count `n` | u64 |
//! | triangle count `f` | u64 |
//! | identity, expression, texture basis dims | 3 x u32 |
//! | shape mean, texture mean | 2 x `3n` f64 |
//! | identity, expression, texture bases | `3n x k` f64 each, row-major |
//! | triangles | `3f` u32 |

use std::path::Path;

use super::model::MorphableModel;
use crate::diff::Tensor;
use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::mesh::MeshTopology;

const MAGIC: &[u8; 8] = b"GCNFMM\0\0";
const VERSION: u32 = 1;

pub fn write_model(model: &MorphableModel) -> Vec<u8> {
    let n = model.vertex_count();
    let dims = model.dims();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(model.topology.triangles().len() as u64).to_le_bytes());
    for d in [dims.identity, dims.expression, dims.texture] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for t in [
        &model.shape_mean,
        &model.texture_mean,
        &model.identity_basis,
        &model.expression_basis,
        &model.texture_basis,
    ] {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for t in model.topology.triangles() {
        for &v in t {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
    }
    out
}

pub fn read_model(bytes: &[u8]) -> Result<MorphableModel> {
    let mut r = Reader::new(bytes);
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: "not a morphable-model file (bad magic)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 8,
            detail: format!("unsupported version {version}"),
        });
    }
    let n = r.u64("vertex count")? as usize;
    let f = r.u64("triangle count")? as usize;
    let dims = [r.u32("identity dim")?, r.u32("expression dim")?, r.u32("texture dim")?].map(|d| d as usize);
    // Cheap sanity check before allocating.
    let needed = n
        .checked_mul(3)
        .and_then(|m| m.checked_mul(2 + dims.iter().sum::<usize>()))
        .and_then(|m| m.checked_mul(8))
        .ok_or_else(|| r.bad("model body"))?;
    if needed > bytes.len() {
        return Err(Error::Parse {
            offset: r.pos,
            detail: format!("header declares {needed} bytes of reals but file has {}", bytes.len()),
        });
    }
    let mat = |r: &mut Reader, rows: usize, cols: usize, what: &str| -> Result<Tensor> {
        Ok(Tensor::from_parts(vec![rows, cols], r.reals(rows * cols, what)?))
    };
    let shape_mean = mat(&mut r, n, 3, "shape mean")?;
    let texture_mean = mat(&mut r, n, 3, "texture mean")?;
    let id = mat(&mut r, 3 * n, dims[0], "identity basis")?;
    let ex = mat(&mut r, 3 * n, dims[1], "expression basis")?;
    let tx = mat(&mut r, 3 * n, dims[2], "texture basis")?;
    let tri_start = r.pos;
    let mut tris = Vec::with_capacity(f.min(bytes.len() / 12));
    for _ in 0..f {
        tris.push([r.u32("triangle")? as usize, r.u32("triangle")? as usize, r.u32("triangle")? as usize]);
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            offset: r.pos,
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    let topology = MeshTopology::new(n, tris).map_err(|e| Error::Parse {
        offset: tri_start,
        detail: e.to_string(),
    })?;
    MorphableModel::new(shape_mean, texture_mean, id, ex, tx, topology)
}

pub fn write_model_file(model: &MorphableModel, path: &Path) -> Result<()> {
    std::fs::write(path, write_model(model))?;
    Ok(())
}

pub fn read_model_file(path: &Path) -> Result<MorphableModel> {
    read_model(&std::fs::read(path)?)
}
