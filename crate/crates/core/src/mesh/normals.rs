use std::sync::Arc;

use crate::diff::{Tape, Tensor, Var};
use crate::error::{contract, Result};

/// Per-vertex unit normals as the normalized mean of incident triangle unit
/// normals, recorded on `tape` so they are differentiable in `positions`
/// (`n x 3`).
///
/// The returned flags are `false` for vertices without any non-degenerate
/// incident triangle; their normal is the zero vector.
pub fn vertex_normals(tape: &mut Tape, positions: Var, triangles: &[[usize; 3]]) -> Result<(Var, Vec<bool>)> {
    let n = match tape.shape(positions) {
        [n, 3] => *n,
        s => return contract("vertex_normals", format!("positions must be n x 3, got {s:?}")),
    };
    if triangles.is_empty() {
        let z = tape.constant(Tensor::zeros(&[n, 3]));
        return Ok((z, vec![false; n]));
    }
    if let Some(t) = triangles.iter().find(|t| t.iter().any(|&v| v >= n)) {
        return contract("vertex_normals", format!("triangle {t:?} out of range for {n} vertices"));
    }
    let f = triangles.len();
    let corner = |k: usize| -> Arc<Vec<usize>> {
        Arc::new(triangles.iter().flat_map(|t| (0..3).map(move |c| t[k] * 3 + c)).collect())
    };
    let idx: Vec<Arc<Vec<usize>>> = (0..3).map(corner).collect();
    let p0 = tape.gather(positions, &idx[0], &[f, 3])?;
    let p1 = tape.gather(positions, &idx[1], &[f, 3])?;
    let p2 = tape.gather(positions, &idx[2], &[f, 3])?;
    let e1 = tape.sub(p1, p0)?;
    let e2 = tape.sub(p2, p0)?;
    let face = cross_rows(tape, e1, e2)?;
    let face_unit = tape.normalize_rows(face)?;
    let mut acc = None;
    for ix in &idx {
        let s = tape.scatter_add(face_unit, ix, &[n, 3])?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    let summed = acc.expect("at least one triangle");
    let normals = tape.normalize_rows(summed)?;
    let valid = (0..n)
        .map(|i| tape.value(normals).row(i).iter().any(|&v| v != 0.0))
        .collect();
    Ok((normals, valid))
}

/// Convenience wrapper on plain arrays.
pub fn vertex_normals_plain(positions: &Tensor, triangles: &[[usize; 3]]) -> Result<(Tensor, Vec<bool>)> {
    let mut tape = Tape::no_grad();
    let p = tape.constant(positions.clone());
    let (nv, flags) = vertex_normals(&mut tape, p, triangles)?;
    Ok((tape.value(nv).clone(), flags))
}

/// Row-wise cross product of two `m x 3` matrices.
pub fn cross_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let ax = tape.slice_cols(a, 0, 1)?;
    let ay = tape.slice_cols(a, 1, 2)?;
    let az = tape.slice_cols(a, 2, 3)?;
    let bx = tape.slice_cols(b, 0, 1)?;
    let by = tape.slice_cols(b, 1, 2)?;
    let bz = tape.slice_cols(b, 2, 3)?;
    let term = |tape: &mut Tape, p: Var, q: Var, r: Var, s: Var| -> Result<Var> {
        let l = tape.mul(p, q)?;
        let rr = tape.mul(r, s)?;
        tape.sub(l, rr)
    };
    let cx = term(tape, ay, bz, az, by)?;
    let cy = term(tape, az, bx, ax, bz)?;
    let cz = term(tape, ax, by, ay, bx)?;
    let xy = tape.concat_cols(cx, cy)?;
    tape.concat_cols(xy, cz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check;

    #[test]
    fn flat_square_points_up() {
        let p = Tensor::matrix(4, 3, vec![0., 0., 0., 1., 0., 0., 1., 1., 0., 0., 1., 0.]).unwrap();
        let (n, ok) = vertex_normals_plain(&p, &[[0, 1, 2], [0, 2, 3]]).unwrap();
        assert!(ok.iter().all(|&b| b));
        for i in 0..4 {
            assert_eq!(n.row(i), &[0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn tetrahedron_normals_point_away_from_centroid() {
        let s = 1.0 / 3f64.sqrt();
        let v = [[s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s]];
        let p = Tensor::matrix(4, 3, v.iter().flatten().copied().collect()).unwrap();
        // Outward orientation.
        let tris = [[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
        let (n, _) = vertex_normals_plain(&p, &tris).unwrap();
        for (i, vi) in v.iter().enumerate() {
            for c in 0..3 {
                assert!((n.row(i)[c] - vi[c]).abs() < 1e-12, "vertex {i}");
            }
        }
    }

    #[test]
    fn isolated_vertex_is_flagged() {
        let p = Tensor::matrix(4, 3, vec![0., 0., 0., 1., 0., 0., 0., 1., 0., 5., 5., 5.]).unwrap();
        let (n, ok) = vertex_normals_plain(&p, &[[0, 1, 2]]).unwrap();
        assert_eq!(ok, vec![true, true, true, false]);
        assert_eq!(n.row(3), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn normals_are_unit_length() {
        let (v, f) = crate::mesh::icosphere(1);
        let p = Tensor::matrix(v.len(), 3, v.iter().flatten().map(|x| x * 1.3).collect()).unwrap();
        let (n, _) = vertex_normals_plain(&p, &f).unwrap();
        for i in 0..v.len() {
            let l: f64 = n.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((l - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = Tensor::matrix(4, 3, vec![0., 0., 0.1, 1., 0., -0.2, 1.2, 1., 0.3, 0., 0.9, 0.05]).unwrap();
        let tris = [[0, 1, 2], [0, 2, 3]];
        let w = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let err = grad_check(
            |t, v| {
                let (n, _) = vertex_normals(t, v, &tris)?;
                let wv = t.constant(w.clone());
                let m = t.mul(n, wv)?;
                t.sum(m)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
