use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::{SparseMatrix, Tape, Tensor, Var};
use crate::error::{contract, Result};

/// Deterministic, differentiable image-to-feature map.
pub trait EmbeddingFn: Send + Sync {
    fn dim(&self) -> usize;

    /// Feature vector `[dim]` of a `P x 3` image.
    fn embed(&self, tape: &mut Tape, image: Var) -> Result<Var>;

    /// Convenience evaluation without gradients.
    fn embed_plain(&self, image: &Tensor) -> Result<Tensor> {
        let mut t = Tape::no_grad();
        let x = t.constant(image.clone());
        let e = self.embed(&mut t, x)?;
        Ok(t.value(e).clone())
    }
}

/// Area-averages the image onto a `grid x grid` RGB thumbnail, flattens it and
/// applies a fixed projection. The first output is the plain sum of the
/// thumbnail, so any nonnegative nonzero image embeds to a nonzero vector;
/// the remaining outputs use seeded Gaussian weights.
#[derive(Clone, Debug)]
pub struct ToyEmbedder {
    size: usize,
    grid: usize,
    pool: Arc<SparseMatrix>,
    projection: Tensor,
}

impl ToyEmbedder {
    pub const GRID: usize = 8;

    pub fn new(size: usize, dim: usize, seed: u64) -> Result<Self> {
        let grid = Self::GRID;
        if size < grid || dim == 0 {
            return contract("toy_embedder", format!("image size {size} below {grid} or zero dimension"));
        }
        let cell = |i: usize| i * grid / size;
        let mut counts = vec![0usize; grid * grid];
        for i in 0..size {
            for j in 0..size {
                counts[cell(i) * grid + cell(j)] += 1;
            }
        }
        let mut trips = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                let c = cell(i) * grid + cell(j);
                trips.push((c, i * size + j, 1.0 / counts[c] as f64));
            }
        }
        let pool = Arc::new(SparseMatrix::from_triplets(grid * grid, size * size, trips)?);
        let features = grid * grid * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (features as f64).sqrt();
        let mut w = vec![0.0; features * dim];
        for r in 0..features {
            for c in 0..dim {
                w[r * dim + c] = if c == 0 {
                    scale
                } else {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                };
            }
        }
        Ok(Self {
            size,
            grid,
            pool,
            projection: Tensor::from_parts(vec![features, dim], w),
        })
    }

    pub fn image_size(&self) -> usize {
        self.size
    }
}

impl EmbeddingFn for ToyEmbedder {
    fn dim(&self) -> usize {
        self.projection.cols()
    }

    fn embed(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let p = self.size * self.size;
        if tape.shape(image) != [p, 3] {
            return contract("embed", format!("expected a {p} x 3 image, got {:?}", tape.shape(image)));
        }
        let thumb = tape.spmm(&self.pool, image)?;
        let flat = tape.reshape(thumb, &[1, self.grid * self.grid * 3])?;
        let w = tape.constant(self.projection.clone());
        let e = tape.matmul(flat, w)?;
        tape.reshape(e, &[self.dim()])
    }
}

/// Cosine similarity of two embedding vectors; zero vectors are rejected.
pub fn cosine_similarity(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return contract("cosine", format!("embeddings {:?} and {:?} differ", tape.shape(a), tape.shape(b)));
    }
    for v in [a, b] {
        if tape.value(v).data().iter().all(|&x| x == 0.0) {
            return contract("identity_loss", "zero embedding has no direction");
        }
    }
    let ab = tape.mul(a, b)?;
    let dot = tape.sum(ab)?;
    let na = tape.l2_norm(a)?;
    let nb = tape.l2_norm(b)?;
    let den = tape.mul(na, nb)?;
    let inv = tape.pow(den, -1.0);
    tape.mul(dot, inv)
}

/// `1 - cos(F(x), F(x'))`, in `[0, 2]`.
pub fn identity_loss(tape: &mut Tape, x: Var, rendered: Var, embed: &dyn EmbeddingFn) -> Result<Var> {
    let a = embed.embed(tape, x)?;
    let b = embed.embed(tape, rendered)?;
    embedding_distance(tape, a, b)
}

/// `1 - cos(a, b)` for precomputed embeddings.
pub fn embedding_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let c = cosine_similarity(tape, a, b)?;
    let n = tape.neg(c);
    Ok(tape.add_scalar(n, 1.0))
}
