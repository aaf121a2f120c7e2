use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Triangle mesh as read from or written to Wavefront OBJ.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjMesh {
    pub positions: Vec<[f64; 3]>,
    /// Optional per-vertex RGB (the common `v x y z r g b` extension).
    pub colors: Option<Vec<[f64; 3]>>,
    pub triangles: Vec<[usize; 3]>,
}

/// Writes `v` and `f` records with 1-based indices.
pub fn write_obj(mesh: &ObjMesh) -> String {
    let mut out = String::new();
    for (i, p) in mesh.positions.iter().enumerate() {
        match &mesh.colors {
            Some(c) => {
                let c = c[i];
                let _ = writeln!(out, "v {:?} {:?} {:?} {:?} {:?} {:?}", p[0], p[1], p[2], c[0], c[1], c[2]);
            }
            None => {
                let _ = writeln!(out, "v {:?} {:?} {:?}", p[0], p[1], p[2]);
            }
        }
    }
    for t in &mesh.triangles {
        let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    out
}

/// Reads `v` and `f` records; other records are ignored. Polygons are
/// fan-triangulated and `v/vt/vn` face references use the vertex index.
pub fn read_obj(text: &str) -> Result<ObjMesh> {
    let mut mesh = ObjMesh::default();
    let mut colors = Vec::new();
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        let err = |detail: String| Error::Parse { offset, detail };
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some("v") => {
                let vals: Vec<f64> = fields
                    .map(|f| f.parse::<f64>().map_err(|_| err(format!("invalid number `{f}`"))))
                    .collect::<Result<_>>()?;
                match vals.len() {
                    3 => mesh.positions.push([vals[0], vals[1], vals[2]]),
                    6 => {
                        mesh.positions.push([vals[0], vals[1], vals[2]]);
                        colors.push([vals[3], vals[4], vals[5]]);
                    }
                    k => return Err(err(format!("vertex record with {k} values"))),
                }
            }
            Some("f") => {
                let idx: Vec<usize> = fields
                    .map(|f| {
                        let head = f.split('/').next().unwrap_or("");
                        match head.parse::<usize>() {
                            Ok(i) if i >= 1 => Ok(i - 1),
                            _ => Err(err(format!("invalid face index `{f}`"))),
                        }
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(err("face with fewer than 3 vertices".into()));
                }
                for k in 1..idx.len() - 1 {
                    mesh.triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
        offset += line.len();
    }
    let n = mesh.positions.len();
    if let Some(t) = mesh.triangles.iter().find(|t| t.iter().any(|&v| v >= n)) {
        return Err(Error::Parse {
            offset,
            detail: format!("face {:?} references a missing vertex (have {n})", t.map(|v| v + 1)),
        });
    }
    if !colors.is_empty() {
        if colors.len() != n {
            return Err(Error::Parse {
                offset,
                detail: "only some vertices carry colors".into(),
            });
        }
        mesh.colors = Some(colors);
    }
    Ok(mesh)
}
