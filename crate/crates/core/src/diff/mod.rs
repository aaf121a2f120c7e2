//! Reverse-mode differentiation engine: dense tensors, sparse matrices and
//! the recording tape.

mod gradcheck;
mod sparse;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use sparse::SparseMatrix;
pub use tape::{CustomOp, Gradients, Tape, Var, VjpFault};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
