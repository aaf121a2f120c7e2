//! Mesh down/upsampling operators built by quadric-error edge collapse.
//!
//! Collapses always merge an edge into one of its endpoints, so the coarse
//! mesh's vertices are a subset of the fine ones and downsampling is a pure
//! selection. Removed vertices are attached to the closest point on the
//! coarse surface and upsampled with the barycentric weights of that point.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use super::topology::MeshTopology;
use crate::diff::SparseMatrix;
use crate::error::{contract, Result};

/// Down/upsampling pair between a fine mesh and its simplification.
#[derive(Clone, Debug)]
pub struct SamplingOperators {
    /// `n_coarse x n_fine` selection matrix.
    pub down: SparseMatrix,
    /// `n_fine x n_coarse` barycentric interpolation matrix.
    pub up: SparseMatrix,
    pub coarse_topology: MeshTopology,
    pub coarse_positions: Vec<[f64; 3]>,
    /// Fine index of every coarse vertex.
    pub kept: Vec<usize>,
    /// Number of input edges shared by more than two triangles.
    pub non_manifold_edges: usize,
}

/// Builds sampling operators keeping `ceil(n * target_fraction)` vertices.
pub fn build_sampling(
    topology: &MeshTopology,
    positions: &[[f64; 3]],
    target_fraction: f64,
) -> Result<SamplingOperators> {
    if !(target_fraction > 0.0 && target_fraction < 1.0) {
        return contract(
            "build_sampling",
            format!("target_fraction must lie in (0, 1), got {target_fraction}"),
        );
    }
    let n = topology.vertex_count();
    let target = (n as f64 * target_fraction).ceil() as usize;
    if target < 4 {
        return contract(
            "build_sampling",
            format!("{n} vertices at fraction {target_fraction} leaves {target} < 4"),
        );
    }
    let (kept, coarse_tris) = simplify(topology, positions, target)?;
    let mut coarse_index = vec![usize::MAX; n];
    for (c, &f) in kept.iter().enumerate() {
        coarse_index[f] = c;
    }
    let coarse_triangles: Vec<[usize; 3]> = coarse_tris
        .iter()
        .map(|t| [coarse_index[t[0]], coarse_index[t[1]], coarse_index[t[2]]])
        .collect();
    let coarse_positions: Vec<[f64; 3]> = kept.iter().map(|&f| positions[f]).collect();
    let down = SparseMatrix::from_triplets(
        kept.len(),
        n,
        kept.iter().enumerate().map(|(c, &f)| (c, f, 1.0)),
    )?;

    let mut up_entries = Vec::new();
    for f in 0..n {
        if coarse_index[f] != usize::MAX {
            up_entries.push((f, coarse_index[f], 1.0));
            continue;
        }
        for (c, w) in attach(positions[f], &coarse_positions, &coarse_triangles) {
            up_entries.push((f, c, w));
        }
    }
    let up = SparseMatrix::from_triplets(n, kept.len(), up_entries)?;
    Ok(SamplingOperators {
        down,
        up,
        coarse_topology: MeshTopology::new(kept.len(), coarse_triangles)?,
        coarse_positions,
        kept,
        non_manifold_edges: topology.non_manifold_edges(),
    })
}

/// Barycentric weights of the closest point on the coarse surface; falls back
/// to the nearest coarse vertex when the coarse mesh has no triangles.
fn attach(p: [f64; 3], verts: &[[f64; 3]], tris: &[[usize; 3]]) -> Vec<(usize, f64)> {
    let mut best: Option<(f64, [usize; 3], [f64; 3])> = None;
    for t in tris {
        let (q, bary) = closest_point_on_triangle(p, verts[t[0]], verts[t[1]], verts[t[2]]);
        let d = dist2(p, q);
        if best.as_ref().is_none_or(|b| d < b.0) {
            best = Some((d, *t, bary));
        }
    }
    match best {
        Some((_, t, bary)) => {
            let mut out: Vec<(usize, f64)> = Vec::with_capacity(3);
            let total: f64 = bary.iter().sum();
            for k in 0..3 {
                let w = bary[k] / total;
                if w <= 0.0 {
                    continue;
                }
                match out.iter_mut().find(|e| e.0 == t[k]) {
                    Some(e) => e.1 += w,
                    None => out.push((t[k], w)),
                }
            }
            out
        }
        None => {
            let nearest = (0..verts.len())
                .min_by(|&a, &b| dist2(p, verts[a]).total_cmp(&dist2(p, verts[b])))
                .expect("coarse mesh has vertices");
            vec![(nearest, 1.0)]
        }
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

/// Closest point to `p` on triangle `abc` and its barycentric coordinates
/// (region classification after Ericson, Real-Time Collision Detection).
pub(crate) fn closest_point_on_triangle(p: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let at = |u: f64, v: f64, w: f64| {
        (
            [
                u * a[0] + v * b[0] + w * c[0],
                u * a[1] + v * b[1] + w * c[1],
                u * a[2] + v * b[2] + w * c[2],
            ],
            [u, v, w],
        )
    };
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return at(1.0, 0.0, 0.0);
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return at(0.0, 1.0, 0.0);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return at(1.0 - v, v, 0.0);
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return at(0.0, 0.0, 1.0);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return at(1.0 - w, 0.0, w);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return at(0.0, 1.0 - w, w);
    }
    let denom = va + vb + vc;
    if denom.abs() < f64::MIN_POSITIVE {
        return at(1.0, 0.0, 0.0);
    }
    let v = vb / denom;
    let w = vc / denom;
    at(1.0 - v - w, v, w)
}

type Quadric = [f64; 10];

fn plane_quadric(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> Option<Quadric> {
    let n = cross(sub(b, a), sub(c, a));
    let len = dot(n, n).sqrt();
    if len < 1e-300 {
        return None;
    }
    let n = [n[0] / len, n[1] / len, n[2] / len];
    let d = -dot(n, a);
    let p = [n[0], n[1], n[2], d];
    let mut q = [0.0; 10];
    let mut k = 0;
    for i in 0..4 {
        for j in i..4 {
            q[k] = p[i] * p[j];
            k += 1;
        }
    }
    Some(q)
}

fn quadric_error(q: &Quadric, v: [f64; 3]) -> f64 {
    let h = [v[0], v[1], v[2], 1.0];
    let mut e = 0.0;
    let mut k = 0;
    for i in 0..4 {
        for j in i..4 {
            let f = if i == j { 1.0 } else { 2.0 };
            e += f * q[k] * h[i] * h[j];
            k += 1;
        }
    }
    e
}

#[derive(PartialEq)]
struct Candidate {
    cost: f64,
    remove: usize,
    keep: usize,
    stamp: (u64, u64),
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on cost, deterministic tie-breaking on indices.
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.remove.cmp(&self.remove))
            .then_with(|| other.keep.cmp(&self.keep))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Collapser<'a> {
    pos: &'a [[f64; 3]],
    quadrics: Vec<Quadric>,
    faces: Vec<[usize; 3]>,
    face_alive: Vec<bool>,
    vert_faces: Vec<BTreeSet<usize>>,
    alive: Vec<bool>,
    stamp: Vec<u64>,
    heap: BinaryHeap<Candidate>,
    alive_count: usize,
}

impl<'a> Collapser<'a> {
    fn new(topology: &MeshTopology, pos: &'a [[f64; 3]]) -> Self {
        let n = topology.vertex_count();
        let faces = topology.triangles().to_vec();
        let mut quadrics = vec![[0.0; 10]; n];
        let mut vert_faces = vec![BTreeSet::new(); n];
        for (fi, t) in faces.iter().enumerate() {
            if let Some(q) = plane_quadric(pos[t[0]], pos[t[1]], pos[t[2]]) {
                for &v in t {
                    for k in 0..10 {
                        quadrics[v][k] += q[k];
                    }
                }
            }
            for &v in t {
                vert_faces[v].insert(fi);
            }
        }
        Self {
            pos,
            quadrics,
            face_alive: vec![true; faces.len()],
            faces,
            vert_faces,
            alive: vec![true; n],
            stamp: vec![0; n],
            heap: BinaryHeap::new(),
            alive_count: n,
        }
    }

    fn neighbors(&self, v: usize) -> BTreeSet<usize> {
        self.vert_faces[v]
            .iter()
            .flat_map(|&f| self.faces[f])
            .filter(|&u| u != v)
            .collect()
    }

    fn push_edge(&mut self, a: usize, b: usize) {
        let mut q = self.quadrics[a];
        for k in 0..10 {
            q[k] += self.quadrics[b][k];
        }
        let cost_keep_b = quadric_error(&q, self.pos[b]);
        let cost_keep_a = quadric_error(&q, self.pos[a]);
        let (remove, keep, cost) = if cost_keep_b <= cost_keep_a {
            (a, b, cost_keep_b)
        } else {
            (b, a, cost_keep_a)
        };
        self.heap.push(Candidate {
            cost,
            remove,
            keep,
            stamp: (self.stamp[remove], self.stamp[keep]),
        });
    }

    fn seed(&mut self, edges: &[(usize, usize)]) {
        for &(a, b) in edges {
            self.push_edge(a, b);
        }
    }

    /// Link condition plus, when `check_flips`, rejection of collapses that
    /// invert or degenerate a surviving triangle.
    fn valid(&self, remove: usize, keep: usize, check_flips: bool) -> bool {
        let shared: Vec<usize> = self.vert_faces[remove]
            .intersection(&self.vert_faces[keep])
            .copied()
            .collect();
        let nr = self.neighbors(remove);
        let nk = self.neighbors(keep);
        if nr.intersection(&nk).count() != shared.len() {
            return false;
        }
        if !check_flips {
            return true;
        }
        for &f in &self.vert_faces[remove] {
            if shared.contains(&f) {
                continue;
            }
            let t = self.faces[f];
            let before = cross(
                sub(self.pos[t[1]], self.pos[t[0]]),
                sub(self.pos[t[2]], self.pos[t[0]]),
            );
            let moved = t.map(|v| if v == remove { keep } else { v });
            let after = cross(
                sub(self.pos[moved[1]], self.pos[moved[0]]),
                sub(self.pos[moved[2]], self.pos[moved[0]]),
            );
            let lb = dot(before, before).sqrt();
            let la = dot(after, after).sqrt();
            if la <= 1e-12 * lb.max(1e-300) || dot(before, after) <= 0.0 {
                return false;
            }
        }
        true
    }

    fn collapse(&mut self, remove: usize, keep: usize) {
        let faces: Vec<usize> = self.vert_faces[remove].iter().copied().collect();
        for f in faces {
            let t = self.faces[f];
            if t.contains(&keep) {
                self.face_alive[f] = false;
                for v in t {
                    self.vert_faces[v].remove(&f);
                }
            } else {
                self.faces[f] = t.map(|v| if v == remove { keep } else { v });
                self.vert_faces[keep].insert(f);
            }
        }
        self.vert_faces[remove].clear();
        self.alive[remove] = false;
        self.alive_count -= 1;
        for k in 0..10 {
            let q = self.quadrics[remove][k];
            self.quadrics[keep][k] += q;
        }
        self.stamp[keep] += 1;
        self.stamp[remove] += 1;
        for u in self.neighbors(keep) {
            self.stamp[u] += 1;
        }
        for u in self.neighbors(keep) {
            self.push_edge(keep, u);
            for w in self.neighbors(u) {
                if w != keep {
                    self.push_edge(u, w);
                }
            }
        }
    }

    fn run(&mut self, target: usize, check_flips: bool) {
        while self.alive_count > target {
            let Some(c) = self.heap.pop() else { return };
            if !self.alive[c.remove]
                || !self.alive[c.keep]
                || c.stamp != (self.stamp[c.remove], self.stamp[c.keep])
            {
                continue;
            }
            if self.valid(c.remove, c.keep, check_flips) {
                self.collapse(c.remove, c.keep);
            }
        }
    }

    fn live_edges(&self) -> Vec<(usize, usize)> {
        let mut edges = BTreeSet::new();
        for (f, t) in self.faces.iter().enumerate() {
            if !self.face_alive[f] {
                continue;
            }
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        edges.into_iter().collect()
    }
}

/// Simplifies to exactly `target` vertices. Returns the kept fine indices in
/// ascending order and the surviving triangles in fine indexing.
pub fn simplify(
    topology: &MeshTopology,
    positions: &[[f64; 3]],
    target: usize,
) -> Result<(Vec<usize>, Vec<[usize; 3]>)> {
    let n = topology.vertex_count();
    if positions.len() != n {
        return contract(
            "simplify",
            format!("{} positions for {n} vertices", positions.len()),
        );
    }
    if target > n || target == 0 {
        return contract("simplify", format!("target {target} for {n} vertices"));
    }
    let mut c = Collapser::new(topology, positions);
    c.seed(&topology.edges());
    c.run(target, true);
    if c.alive_count > target {
        // Retry without the orientation test before giving up.
        let edges = c.live_edges();
        c.heap.clear();
        c.seed(&edges);
        c.run(target, false);
    }
    if c.alive_count > target {
        // Vertices without incident faces can only be dropped directly.
        let isolated: Vec<usize> = (0..n)
            .filter(|&v| c.alive[v] && c.vert_faces[v].is_empty())
            .collect();
        for v in isolated.into_iter().rev() {
            if c.alive_count == target {
                break;
            }
            c.alive[v] = false;
            c.alive_count -= 1;
        }
    }
    if c.alive_count > target {
        return contract(
            "simplify",
            format!("edge collapse stalled at {} vertices (target {target})", c.alive_count),
        );
    }
    let kept: Vec<usize> = (0..n).filter(|&v| c.alive[v]).collect();
    let tris = c
        .faces
        .iter()
        .zip(&c.face_alive)
        .filter(|(_, &a)| a)
        .map(|(t, _)| *t)
        .collect();
    Ok((kept, tris))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::icosphere;

    fn sphere(k: usize) -> (MeshTopology, Vec<[f64; 3]>) {
        let (v, f) = icosphere(k);
        (MeshTopology::new(v.len(), f).unwrap(), v)
    }

    #[test]
    fn no_removal_gives_identity_operators() {
        let (t, v) = sphere(0);
        let s = build_sampling(&t, &v, 0.99).unwrap();
        assert_eq!(s.down, SparseMatrix::identity(12));
        assert_eq!(s.up, SparseMatrix::identity(12));
    }

    #[test]
    fn icosphere_162_to_42() {
        let (t, v) = sphere(2);
        let s = build_sampling(&t, &v, 42.0 / 162.0).unwrap();
        assert_eq!(s.kept.len(), 42);
        assert_eq!(s.down.rows(), 42);
        for r in 0..162 {
            let entries: Vec<_> = s.up.row_entries(r).collect();
            assert!(!entries.is_empty() && entries.len() <= 3);
            let sum: f64 = entries.iter().map(|e| e.1).sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
        }
        for r in 0..42 {
            let entries: Vec<_> = s.down.row_entries(r).collect();
            assert_eq!(entries.len(), 1);
            assert_eq!(entries[0].1, 1.0);
        }
        // Coarse mesh stays a closed manifold sphere: V - E + F = 2.
        let ct = &s.coarse_topology;
        let e = ct.edges().len() as i64;
        assert_eq!(42 - e + ct.triangles().len() as i64, 2);
        assert_eq!(s.non_manifold_edges, 0);
    }

    #[test]
    fn kept_rows_survive_up_after_down() {
        let (t, v) = sphere(1);
        let s = build_sampling(&t, &v, 0.5).unwrap();
        let signal: Vec<f64> = (0..42).map(|i| (i as f64).sin()).collect();
        let coarse = s.down.matvec(&signal);
        let back = s.up.matvec(&coarse);
        for &k in &s.kept {
            assert_eq!(back[k], signal[k]);
        }
        // down * up is the identity on coarse signals.
        let c: Vec<f64> = (0..s.kept.len()).map(|i| i as f64 * 0.1).collect();
        assert_eq!(s.down.matvec(&s.up.matvec(&c)), c);
    }

    #[test]
    fn too_few_vertices_is_rejected() {
        let (t, v) = sphere(0);
        assert!(build_sampling(&t, &v, 0.2).is_err());
        assert!(build_sampling(&t, &v, 1.0).is_err());
    }

    #[test]
    fn simplify_reaches_tetrahedron() {
        let (t, v) = sphere(1);
        let (kept, tris) = simplify(&t, &v, 4).unwrap();
        assert_eq!(kept.len(), 4);
        assert_eq!(tris.len(), 4);
    }

    #[test]
    fn closest_point_inside_triangle_projects_orthogonally() {
        let (q, b) = closest_point_on_triangle([0.2, 0.2, 1.0], [0., 0., 0.], [1., 0., 0.], [0., 1., 0.]);
        assert!((q[2]).abs() < 1e-15);
        assert!((b[0] - 0.6).abs() < 1e-12 && (b[1] - 0.2).abs() < 1e-12);
    }
}
