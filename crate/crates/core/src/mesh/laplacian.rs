use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::SparseMatrix;
use crate::error::{contract, Error, Result};

/// How the largest Laplacian eigenvalue is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMax {
    /// Krylov (power-iteration space) estimate with the given relative
    /// tolerance and matrix-vector product cap.
    PowerIteration { tol: f64, max_iter: usize },
    /// A fixed value, typically the upper spectral bound 2.
    Fixed(f64),
}

impl Default for LambdaMax {
    fn default() -> Self {
        LambdaMax::PowerIteration {
            tol: 1e-6,
            max_iter: 10_000,
        }
    }
}

/// Normalized Laplacian, its rescaled form and the eigenvalue used to scale.
#[derive(Clone, Debug)]
pub struct LaplacianPair {
    pub laplacian: SparseMatrix,
    pub scaled: SparseMatrix,
    pub lambda_max: f64,
}

impl LaplacianPair {
    pub fn from_adjacency(adjacency: &SparseMatrix, strategy: LambdaMax) -> Result<Self> {
        let laplacian = normalized_laplacian(adjacency);
        let lambda_max = match strategy {
            // The normalized Laplacian's spectrum never exceeds 2.
            LambdaMax::PowerIteration { tol, max_iter } => {
                max_eigenvalue_capped(&laplacian, tol, max_iter)?.min(2.0)
            }
            LambdaMax::Fixed(v) => v,
        };
        let scaled = scaled_laplacian(&laplacian, lambda_max)?;
        Ok(Self {
            laplacian,
            scaled,
            lambda_max,
        })
    }
}

/// `L = I - D^{-1/2} A D^{-1/2}`. Isolated vertices keep `L_ii = 1`.
pub fn normalized_laplacian(a: &SparseMatrix) -> SparseMatrix {
    let n = a.rows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = a.row_entries(i).map(|(_, v)| v).sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut entries = Vec::with_capacity(a.nnz() + n);
    for i in 0..n {
        let mut diag = 1.0;
        for (j, v) in a.row_entries(i) {
            let w = -v * inv_sqrt[i] * inv_sqrt[j];
            if i == j {
                diag += w;
            } else {
                entries.push((i, j, w));
            }
        }
        entries.push((i, i, diag));
    }
    SparseMatrix::from_triplets(n, n, entries).expect("laplacian entries are unique")
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix (cap
/// 10,000 matrix-vector products).
///
/// The power-iteration Krylov space `{v, Lv, L^2 v, ...}` is built with
/// Lanczos steps and full reorthogonalization, and the estimate is taken by
/// Rayleigh-Ritz over it. Iteration stops once the residual `r` of the top
/// Ritz pair `(theta, y)` falls below `tol * theta`, returning `theta + r`:
/// `theta <= lambda_max` always and `lambda_max <= theta + r` for a converged
/// pair, so the result is an upper bound within relative tolerance `tol` and
/// the scaled Laplacian's spectrum stays inside `[-1, 1]`.
pub fn max_eigenvalue(l: &SparseMatrix, tol: f64) -> Result<f64> {
    max_eigenvalue_capped(l, tol, 10_000)
}

pub fn max_eigenvalue_capped(l: &SparseMatrix, tol: f64, max_iter: usize) -> Result<f64> {
    let n = l.rows();
    if n == 0 {
        return Ok(0.0);
    }
    // Fixed-seed random start; a structured start vector can be orthogonal
    // to the top eigenvector of a symmetric graph.
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a7c_e5);
    let mut q: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut q);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let (mut alpha, mut beta) = (Vec::new(), Vec::new());
    let mut estimate = 0.0;
    let steps = max_iter.min(n);
    for j in 0..steps {
        let mut w = l.matvec(&q);
        alpha.push(dot(&w, &q));
        basis.push(q);
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&w, b);
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let b = dot(&w, &w).sqrt();
        let last = j + 1 == steps;
        let scale = alpha.iter().fold(0.0f64, |m, a| m.max(a.abs())).max(f64::MIN_POSITIVE);
        let exhausted = b <= 1e-13 * scale;
        if last || exhausted || j < 16 || j % (1 + j / 8) == 0 {
            let (theta, tail) = top_ritz(&alpha, &beta);
            let residual = if exhausted { 0.0 } else { b * tail.abs() };
            estimate = theta + residual;
            if residual <= tol * theta.abs().max(f64::MIN_POSITIVE) {
                return Ok(estimate);
            }
        }
        if exhausted {
            break;
        }
        beta.push(b);
        q = w.into_iter().map(|x| x / b).collect();
    }
    Err(Error::NonConvergence {
        iterations: steps,
        estimate,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest eigenvalue of the Lanczos tridiagonal and the last component of
/// its unit eigenvector.
fn top_ritz(alpha: &[f64], beta: &[f64]) -> (f64, f64) {
    let m = alpha.len();
    let t = nalgebra::DMatrix::from_fn(m, m, |i, j| match i.abs_diff(j) {
        0 => alpha[i],
        1 => beta[i.min(j)],
        _ => 0.0,
    });
    let eig = t.symmetric_eigen();
    let top = eig.eigenvalues.imax();
    (eig.eigenvalues[top], eig.eigenvectors[(m - 1, top)])
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// `2 L / lambda_max - I`.
pub fn scaled_laplacian(l: &SparseMatrix, lambda_max: f64) -> Result<SparseMatrix> {
    if lambda_max <= 0.0 || lambda_max.is_nan() {
        return contract(
            "scaled_laplacian",
            format!("lambda_max must be positive, got {lambda_max}"),
        );
    }
    l.scale(2.0 / lambda_max)
        .add(&SparseMatrix::identity(l.rows()).scale(-1.0))
}
