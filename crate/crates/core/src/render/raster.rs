use std::sync::Arc;

use super::camera::NEAR;
use crate::diff::{CustomOp, Tape, Tensor, Var};
use crate::error::{contract, Result};

/// Screen-space buffers of one rasterization pass, row-major over pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderBuffers {
    pub size: usize,
    /// Covering triangle per pixel, `-1` for background.
    pub triangle_id: Vec<i64>,
    /// Barycentric weights of the covering triangle's corners (zero on background).
    pub barycentric: Vec<[f64; 3]>,
    /// Depth of the visible surface (infinite on background).
    pub depth: Vec<f64>,
}

impl RenderBuffers {
    pub fn empty(size: usize) -> Self {
        Self {
            size,
            triangle_id: vec![-1; size * size],
            barycentric: vec![[0.0; 3]; size * size],
            depth: vec![f64::INFINITY; size * size],
        }
    }

    /// Coverage mask: true where some triangle is visible.
    pub fn mask(&self) -> Vec<bool> {
        self.triangle_id.iter().map(|&t| t >= 0).collect()
    }

    pub fn covered(&self) -> usize {
        self.triangle_id.iter().filter(|&&t| t >= 0).count()
    }
}

fn cross2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn sub2(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

/// Screen-space barycentrics of `p` in triangle `(a, b, c)`, or `None` for a
/// degenerate triangle.
pub fn barycentric(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Option<[f64; 3]> {
    let area = cross2(sub2(b, a), sub2(c, a));
    if area.abs() < 1e-12 {
        return None;
    }
    let wa = cross2(sub2(b, p), sub2(c, p)) / area;
    let wb = cross2(sub2(c, p), sub2(a, p)) / area;
    Some([wa, wb, 1.0 - wa - wb])
}

/// Slack on the inside test so pixel centers lying exactly on an edge or
/// vertex survive rounding.
const INSIDE_TOL: f64 = 1e-10;

/// Z-buffered rasterization of `(u, v, depth)` rows. Every pixel center that
/// falls inside a triangle (both windings) is a candidate; the nearest
/// surface, with depth interpolated as `1 / depth` in screen space, wins.
/// Triangles with a vertex behind the camera are skipped.
pub fn rasterize(screen: &Tensor, triangles: &[[usize; 3]], size: usize) -> Result<RenderBuffers> {
    if size < 8 {
        return contract("rasterize", format!("image size {size} is below 8"));
    }
    let n = match screen.shape() {
        [n, 3] => *n,
        [0] => 0,
        s => return contract("rasterize", format!("screen positions must be n x 3, got {s:?}")),
    };
    let mut buf = RenderBuffers::empty(size);
    let mut inv_depth = vec![0.0f64; size * size];
    let s = screen.data();
    for (id, tri) in triangles.iter().enumerate() {
        if tri.iter().any(|&v| v >= n) {
            return contract("rasterize", format!("triangle {id} references a missing vertex"));
        }
        let pt = |v: usize| [s[3 * v], s[3 * v + 1]];
        let dep = |v: usize| s[3 * v + 2];
        if tri.iter().any(|&v| dep(v) <= NEAR) {
            continue;
        }
        let (a, b, c) = (pt(tri[0]), pt(tri[1]), pt(tri[2]));
        let lo_u = a[0].min(b[0]).min(c[0]);
        let hi_u = a[0].max(b[0]).max(c[0]);
        let lo_v = a[1].min(b[1]).min(c[1]);
        let hi_v = a[1].max(b[1]).max(c[1]);
        if !(lo_u.is_finite() && hi_u.is_finite() && lo_v.is_finite() && hi_v.is_finite()) {
            continue;
        }
        let j0 = (lo_u - 0.5).ceil().max(0.0) as usize;
        let i0 = (lo_v - 0.5).ceil().max(0.0) as usize;
        let j1 = ((hi_u - 0.5).floor()).min(size as f64 - 1.0);
        let i1 = ((hi_v - 0.5).floor()).min(size as f64 - 1.0);
        if j1 < 0.0 || i1 < 0.0 {
            continue;
        }
        let (j1, i1) = (j1 as usize, i1 as usize);
        let inv = [1.0 / dep(tri[0]), 1.0 / dep(tri[1]), 1.0 / dep(tri[2])];
        for i in i0..=i1 {
            for j in j0..=j1 {
                let p = [j as f64 + 0.5, i as f64 + 0.5];
                let Some(w) = barycentric(p, a, b, c) else { continue };
                if w.iter().any(|&x| x < -INSIDE_TOL) {
                    continue;
                }
                let z = w[0] * inv[0] + w[1] * inv[1] + w[2] * inv[2];
                let px = i * size + j;
                if z > inv_depth[px] {
                    inv_depth[px] = z;
                    buf.triangle_id[px] = id as i64;
                    buf.barycentric[px] = w;
                    buf.depth[px] = 1.0 / z;
                }
            }
        }
    }
    Ok(buf)
}

/// Barycentric weights as a function of screen positions, holding the
/// per-pixel triangle assignment fixed.
struct BarycentricOp {
    buffers: Arc<RenderBuffers>,
    triangles: Arc<Vec<[usize; 3]>>,
}

fn cross_grads(x: [f64; 2], y: [f64; 2]) -> ([f64; 2], [f64; 2]) {
    ([y[1], -y[0]], [-x[1], x[0]])
}

impl CustomOp for BarycentricOp {
    fn name(&self) -> &'static str {
        "barycentric"
    }

    fn vjp(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let screen = inputs[0];
        let s = screen.data();
        let g = grad.data();
        let mut out = vec![0.0; s.len()];
        let size = self.buffers.size;
        for (px, &id) in self.buffers.triangle_id.iter().enumerate() {
            if id < 0 {
                continue;
            }
            let tri = self.triangles[id as usize];
            let p = [(px % size) as f64 + 0.5, (px / size) as f64 + 0.5];
            let q: Vec<[f64; 2]> = tri.iter().map(|&v| sub2([s[3 * v], s[3 * v + 1]], p)).collect();
            // N_k = cross(q_{k+1}, q_{k+2}), A = sum N_k, w_k = N_k / A.
            let mut dn = [[[0.0f64; 2]; 3]; 3];
            let mut nums = [0.0; 3];
            for k in 0..3 {
                let (k1, k2) = ((k + 1) % 3, (k + 2) % 3);
                nums[k] = cross2(q[k1], q[k2]);
                let (g1, g2) = cross_grads(q[k1], q[k2]);
                dn[k][k1] = g1;
                dn[k][k2] = g2;
            }
            let area: f64 = nums.iter().sum();
            let gw = &g[3 * px..3 * px + 3];
            let w: Vec<f64> = nums.iter().map(|v| v / area).collect();
            let gbar: f64 = (0..3).map(|k| gw[k] * w[k]).sum();
            for (corner, &v) in tri.iter().enumerate() {
                for axis in 0..2 {
                    let da: f64 = (0..3).map(|k| dn[k][corner][axis]).sum();
                    let mut acc = 0.0;
                    for k in 0..3 {
                        acc += gw[k] * dn[k][corner][axis];
                    }
                    out[3 * v + axis] += (acc - gbar * da) / area;
                }
            }
        }
        vec![Some(Tensor::from_parts(screen.shape().to_vec(), out))]
    }
}

/// Differentiable `P x 3` barycentric weights for the pixels of `buffers`.
pub fn barycentric_weights(
    tape: &mut Tape,
    screen: Var,
    buffers: &Arc<RenderBuffers>,
    triangles: &Arc<Vec<[usize; 3]>>,
) -> Var {
    let value = Tensor::from_parts(
        vec![buffers.triangle_id.len(), 3],
        buffers.barycentric.iter().flatten().copied().collect(),
    );
    let op = BarycentricOp {
        buffers: buffers.clone(),
        triangles: triangles.clone(),
    };
    tape.custom(&[screen], value, Arc::new(op))
}

/// Per-pixel `sum_k w_k attr[corner_k]` over the covering triangle; zero on
/// background. `weights` is `P x 3`, `attributes` is `n x C`.
pub fn interpolate(
    tape: &mut Tape,
    buffers: &RenderBuffers,
    triangles: &[[usize; 3]],
    weights: Var,
    attributes: Var,
) -> Result<Var> {
    let (n, c) = match tape.shape(attributes) {
        [n, c] => (*n, *c),
        s => return contract("interpolate", format!("attributes must be n x C, got {s:?}")),
    };
    let p = buffers.triangle_id.len();
    if tape.shape(weights) != [p, 3] {
        return contract("interpolate", format!("weights {:?} for {p} pixels", tape.shape(weights)));
    }
    if n == 0 || buffers.covered() == 0 {
        return Ok(tape.constant(Tensor::zeros(&[p, c])));
    }
    let mut acc = None;
    for corner in 0..3 {
        let mut idx = Vec::with_capacity(p * c);
        for &id in &buffers.triangle_id {
            let v = if id >= 0 { triangles[id as usize][corner] } else { 0 };
            if v >= n {
                return contract("interpolate", format!("vertex {v} outside {n} attributes"));
            }
            idx.extend((0..c).map(|ch| v * c + ch));
        }
        let rows = tape.gather(attributes, &Arc::new(idx), &[p, c])?;
        let w = tape.slice_cols(weights, corner, corner + 1)?;
        let w = tape.reshape(w, &[p])?;
        let w = tape.broadcast_cols(w, c)?;
        let term = tape.mul(rows, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("three corners"))
}
