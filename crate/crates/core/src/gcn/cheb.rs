use std::sync::Arc;

use super::params::BoundParams;
use crate::diff::{SparseMatrix, Tape, Var};
use crate::error::{contract, Result};

/// `[T_0 x, ..., T_{K-1} x]` with `T_0 x = x`, `T_1 x = L x` and
/// `T_k x = 2 L T_{k-1} x - T_{k-2} x`, for the scaled Laplacian `L`.
pub fn cheb_basis(tape: &mut Tape, scaled: &Arc<SparseMatrix>, x: Var, k: usize) -> Result<Vec<Var>> {
    if k < 1 {
        return contract("cheb_basis", "polynomial order K must be at least 1");
    }
    let mut out = vec![x];
    if k > 1 {
        out.push(tape.spmm(scaled, x)?);
    }
    for i in 2..k {
        let lx = tape.spmm(scaled, out[i - 1])?;
        let two = tape.scale(lx, 2.0);
        let next = tape.sub(two, out[i - 2])?;
        out.push(next);
    }
    Ok(out)
}

/// Shape of one Chebyshev convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ChebLayer {
    pub name: String,
    pub k: usize,
    pub f_in: usize,
    pub f_out: usize,
}

impl ChebLayer {
    pub fn new(name: impl Into<String>, k: usize, f_in: usize, f_out: usize) -> Self {
        Self {
            name: name.into(),
            k,
            f_in,
            f_out,
        }
    }

    pub fn theta_name(&self) -> String {
        format!("{}.theta", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// `K * F_in * F_out` filter weights plus `F_out` biases.
    pub fn param_count(&self) -> usize {
        self.k * self.f_in * self.f_out + self.f_out
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        vec![
            (self.theta_name(), vec![self.k, self.f_in, self.f_out], self.k * self.f_in),
            (self.bias_name(), vec![self.f_out], 0),
        ]
    }

    /// `y_j = sum_i sum_k theta[k, i, j] (T_k x)_i + bias_j`.
    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, scaled: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let theta = params.get(&self.theta_name())?;
        let bias = params.get(&self.bias_name())?;
        cheb_conv(tape, scaled, x, theta, bias)
    }
}

/// Chebyshev spectral convolution with explicit parameter handles.
/// `theta` is `[K, F_in, F_out]`, `bias` is `[F_out]`.
pub fn cheb_conv(tape: &mut Tape, scaled: &Arc<SparseMatrix>, x: Var, theta: Var, bias: Var) -> Result<Var> {
    let (k, f_in, f_out) = match tape.shape(theta) {
        [k, i, o] => (*k, *i, *o),
        s => return contract("cheb_conv", format!("theta must be [K, F_in, F_out], got {s:?}")),
    };
    match tape.shape(x) {
        [n, f] if *f == f_in && *n == scaled.rows() => {}
        s => {
            return contract(
                "cheb_conv",
                format!("input {s:?} does not match {} vertices x {f_in} features", scaled.rows()),
            )
        }
    }
    if tape.shape(bias) != [f_out] {
        return contract("cheb_conv", format!("bias {:?} for {f_out} outputs", tape.shape(bias)));
    }
    let basis = cheb_basis(tape, scaled, x, k)?;
    let mut stacked = basis[0];
    for &b in &basis[1..] {
        stacked = tape.concat_cols(stacked, b)?;
    }
    let w = tape.reshape(theta, &[k * f_in, f_out])?;
    let y = tape.matmul(stacked, w)?;
    tape.add_row_bias(y, bias)
}
