//! Linear morphable face model: mean shape and albedo plus identity,
//! expression and texture bases.
//!
//! Per-vertex quantities are vectorized vertex-major, `(x0, y0, z0, x1, ...)`,
//! so a `3n` vector reshapes row-wise into an `n x 3` matrix. The same rule
//! applies to shape and texture.

mod coeffs;
mod io;
mod model;
mod synth;

pub use coeffs::{CoefficientVector, COEFF_LEN, EXPRESSION_DIM, IDENTITY_DIM, LIGHTING_DIM, POSE_DIM, TEXTURE_DIM};
pub use io::{read_model, read_model_file, write_model, write_model_file};
pub use model::{BasisDims, MorphableModel};
pub use synth::{synth_model, synth_positions};
pub(crate) use synth::laplacian_modes;
