use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::model::{BasisDims, MorphableModel};
use crate::diff::Tensor;
use crate::error::{contract, Result};
use crate::mesh::{icosphere, normalized_laplacian, simplify, MeshTopology};

/// Number of non-constant Laplacian eigenvectors mixed into basis columns.
const SMOOTH_MODES: usize = 48;

/// Face-like closed surface with exactly `n` vertices: an icosphere (reduced
/// by edge collapse when `n` is not an icosphere count) squashed into a head
/// shape with a nose ridge on the +z side.
pub fn synth_positions(n: usize) -> Result<(MeshTopology, Vec<[f64; 3]>)> {
    if n < 4 {
        return contract("synth_model", format!("need at least 4 vertices, got {n}"));
    }
    let mut level = 0;
    while 10 * 4usize.pow(level as u32) + 2 < n {
        level += 1;
    }
    let (verts, tris) = icosphere(level);
    let (verts, tris) = if verts.len() == n {
        (verts, tris)
    } else {
        let topo = MeshTopology::new(verts.len(), tris)?;
        let (kept, kept_tris) = simplify(&topo, &verts, n)?;
        let mut remap = vec![usize::MAX; verts.len()];
        for (new, &old) in kept.iter().enumerate() {
            remap[old] = new;
        }
        (
            kept.iter().map(|&v| verts[v]).collect(),
            kept_tris.iter().map(|t| t.map(|v| remap[v])).collect(),
        )
    };
    let positions = verts.into_iter().map(face_like).collect();
    Ok((MeshTopology::new(n, tris)?, positions))
}

fn face_like(p: [f64; 3]) -> [f64; 3] {
    let [x, y, z] = p;
    let nose = 0.22 * (-(x * x + (y + 0.05) * (y + 0.05)) / 0.02).exp() * z.max(0.0);
    let brow = 0.05 * (-((y - 0.35) * (y - 0.35)) / 0.01).exp() * z.max(0.0);
    [0.8 * x, 1.0 * y, 0.85 * z + nose + brow]
}

/// Low-frequency eigenvectors (ascending eigenvalue, constant mode skipped)
/// of the normalized Laplacian, as columns `[n][mode]`.
pub(crate) fn smooth_modes(topology: &MeshTopology, count: usize) -> Vec<Vec<f64>> {
    laplacian_modes(topology, 1, count)
}

/// Eigenvectors of the normalized Laplacian in ascending eigenvalue order,
/// starting at index `skip`.
pub(crate) fn laplacian_modes(topology: &MeshTopology, skip: usize, count: usize) -> Vec<Vec<f64>> {
    let n = topology.vertex_count();
    let l = normalized_laplacian(topology.adjacency());
    let mut dense = nalgebra::DMatrix::<f64>::zeros(n, n);
    for (i, j, v) in l.triplets() {
        dense[(i, j)] = v;
    }
    let eig = dense.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    order
        .into_iter()
        .skip(skip)
        .take(count)
        .map(|k| {
            let col = eig.eigenvectors.column(k);
            // Fix the sign so results do not depend on solver conventions.
            let pivot = col.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            let s = if pivot < 0.0 { -1.0 } else { 1.0 };
            col.iter().map(|v| v * s).collect()
        })
        .collect()
}

fn smooth_basis(
    rng: &mut ChaCha8Rng,
    modes: &[Vec<f64>],
    n: usize,
    columns: usize,
    scale: f64,
) -> Tensor {
    let mut data = vec![0.0; 3 * n * columns];
    for j in 0..columns {
        let mut col = vec![0.0; 3 * n];
        for c in 0..3 {
            for (m, mode) in modes.iter().enumerate() {
                let w: f64 = StandardNormal.sample(rng);
                let w = w / (1.0 + 0.25 * m as f64);
                for i in 0..n {
                    col[3 * i + c] += w * mode[i];
                }
            }
        }
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        let target = scale * (3.0 * n as f64).sqrt() / (1.0 + j as f64).sqrt();
        for i in 0..3 * n {
            data[i * columns + j] = if norm > 0.0 { col[i] * target / norm } else { 0.0 };
        }
    }
    Tensor::from_parts(vec![3 * n, columns], data)
}

/// Deterministic synthetic morphable model with `n` vertices.
///
/// Basis columns are random mixtures of smooth Laplacian eigenvectors whose
/// norms decay with the column index; the mean albedo stays in `[0.2, 0.9]`.
pub fn synth_model(seed: u64, n: usize, dims: BasisDims) -> Result<MorphableModel> {
    let (topology, positions) = synth_positions(n)?;
    let modes = smooth_modes(&topology, SMOOTH_MODES.min(n - 1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity = smooth_basis(&mut rng, &modes, n, dims.identity, 0.02);
    let expression = smooth_basis(&mut rng, &modes, n, dims.expression, 0.012);
    let texture = smooth_basis(&mut rng, &modes, n, dims.texture, 0.02);

    let base = [0.78, 0.58, 0.48];
    let mut variation = vec![[0.0; 3]; n];
    for c in 0..3 {
        for mode in modes.iter().take(6) {
            let w: f64 = StandardNormal.sample(&mut rng);
            for i in 0..n {
                variation[i][c] += w * mode[i];
            }
        }
    }
    let peak = variation
        .iter()
        .flatten()
        .fold(0.0f64, |a, &b| a.max(b.abs()))
        .max(1e-12);
    let features: [([f64; 3], f64, [f64; 3]); 3] = [
        ([-0.3, 0.28, 0.9], 0.012, [-0.4, -0.35, -0.3]),
        ([0.3, 0.28, 0.9], 0.012, [-0.4, -0.35, -0.3]),
        ([0.0, -0.42, 0.9], 0.015, [0.05, -0.2, -0.15]),
    ];
    let mut texture_mean = Vec::with_capacity(3 * n);
    for (i, p) in positions.iter().enumerate() {
        for c in 0..3 {
            let mut v = base[c] + 0.06 * variation[i][c] / peak;
            for (centre, width, delta) in &features {
                let d2 = (p[0] - centre[0]).powi(2) + (p[1] - centre[1]).powi(2) + (p[2] - centre[2]).powi(2);
                v += delta[c] * (-d2 / width).exp();
            }
            texture_mean.push(v.clamp(0.2, 0.9));
        }
    }
    let shape_mean = Tensor::from_parts(vec![n, 3], positions.iter().flatten().copied().collect());
    MorphableModel::new(
        shape_mean,
        Tensor::from_parts(vec![n, 3], texture_mean),
        identity,
        expression,
        texture,
        topology,
    )
}
