use crate::diff::{Tape, Tensor, Var};
use crate::error::{contract, Result};
use crate::mesh::MeshTopology;

/// Column counts of the identity, expression and texture bases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BasisDims {
    pub identity: usize,
    pub expression: usize,
    pub texture: usize,
}

impl Default for BasisDims {
    fn default() -> Self {
        Self {
            identity: super::IDENTITY_DIM,
            expression: super::EXPRESSION_DIM,
            texture: super::TEXTURE_DIM,
        }
    }
}

/// `S = S_mean + I_base c_i + E_base c_e`, `T = T_mean + T_base c_t`.
///
/// Means are `n x 3`; bases are `3n x k` in vertex-major row order.
#[derive(Clone, Debug, PartialEq)]
pub struct MorphableModel {
    pub shape_mean: Tensor,
    pub texture_mean: Tensor,
    pub identity_basis: Tensor,
    pub expression_basis: Tensor,
    pub texture_basis: Tensor,
    pub topology: MeshTopology,
}

impl MorphableModel {
    pub fn new(
        shape_mean: Tensor,
        texture_mean: Tensor,
        identity_basis: Tensor,
        expression_basis: Tensor,
        texture_basis: Tensor,
        topology: MeshTopology,
    ) -> Result<Self> {
        let n = topology.vertex_count();
        for (name, t) in [("shape_mean", &shape_mean), ("texture_mean", &texture_mean)] {
            if t.shape() != [n, 3] {
                return contract("morphable_model", format!("{name} has shape {:?}, want [{n}, 3]", t.shape()));
            }
        }
        for (name, t) in [
            ("identity_basis", &identity_basis),
            ("expression_basis", &expression_basis),
            ("texture_basis", &texture_basis),
        ] {
            if t.rank() != 2 || t.rows() != 3 * n {
                return contract("morphable_model", format!("{name} has shape {:?}, want [{}, k]", t.shape(), 3 * n));
            }
        }
        Ok(Self {
            shape_mean,
            texture_mean,
            identity_basis,
            expression_basis,
            texture_basis,
            topology,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.topology.vertex_count()
    }

    pub fn dims(&self) -> BasisDims {
        BasisDims {
            identity: self.identity_basis.cols(),
            expression: self.expression_basis.cols(),
            texture: self.texture_basis.cols(),
        }
    }

    pub fn positions(&self, shape: &Tensor) -> Vec<[f64; 3]> {
        (0..shape.rows())
            .map(|i| {
                let r = shape.row(i);
                [r[0], r[1], r[2]]
            })
            .collect()
    }

    /// Face shape (`n x 3`) for identity and expression coefficients.
    pub fn shape_from_coeffs(&self, identity: &[f64], expression: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let ci = tape.constant(Tensor::vector(identity.to_vec()));
        let ce = tape.constant(Tensor::vector(expression.to_vec()));
        let s = self.shape_on_tape(&mut tape, ci, ce)?;
        Ok(tape.value(s).clone())
    }

    /// Albedo (`n x 3`) for texture coefficients; not clamped.
    pub fn texture_from_coeffs(&self, texture: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let ct = tape.constant(Tensor::vector(texture.to_vec()));
        let t = self.texture_on_tape(&mut tape, ct)?;
        Ok(tape.value(t).clone())
    }

    /// Differentiable shape from coefficient vectors recorded on `tape`.
    pub fn shape_on_tape(&self, tape: &mut Tape, identity: Var, expression: Var) -> Result<Var> {
        let n = self.vertex_count();
        let id = affine_term(tape, &self.identity_basis, identity, "shape_from_coeffs")?;
        let ex = affine_term(tape, &self.expression_basis, expression, "shape_from_coeffs")?;
        let mean = tape.constant(self.shape_mean.clone());
        let d = tape.add(id, ex)?;
        let d = tape.reshape(d, &[n, 3])?;
        tape.add(mean, d)
    }

    pub fn texture_on_tape(&self, tape: &mut Tape, texture: Var) -> Result<Var> {
        let n = self.vertex_count();
        let tx = affine_term(tape, &self.texture_basis, texture, "texture_from_coeffs")?;
        let tx = tape.reshape(tx, &[n, 3])?;
        let mean = tape.constant(self.texture_mean.clone());
        tape.add(mean, tx)
    }
}

fn affine_term(tape: &mut Tape, basis: &Tensor, coeffs: Var, op: &str) -> Result<Var> {
    let k = basis.cols();
    if tape.value(coeffs).numel() != k {
        return contract(
            op,
            format!("basis has {k} columns but {} coefficients were given", tape.value(coeffs).numel()),
        );
    }
    let b = tape.constant(basis.clone());
    let c = tape.reshape(coeffs, &[k, 1])?;
    tape.matmul(b, c)
}
