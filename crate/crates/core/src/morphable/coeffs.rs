use crate::error::{contract, Result};

pub const IDENTITY_DIM: usize = 80;
pub const EXPRESSION_DIM: usize = 64;
pub const TEXTURE_DIM: usize = 80;
pub const POSE_DIM: usize = 6;
pub const LIGHTING_DIM: usize = 27;
/// Length of the full regressed vector `(c_i, c_e, c_t, pose, lighting)`.
pub const COEFF_LEN: usize = IDENTITY_DIM + EXPRESSION_DIM + TEXTURE_DIM + POSE_DIM + LIGHTING_DIM;

/// Identity, expression and texture coefficients with pose and lighting.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientVector {
    pub identity: Vec<f64>,
    pub expression: Vec<f64>,
    pub texture: Vec<f64>,
    /// Rotation (3) followed by translation (3).
    pub pose: [f64; POSE_DIM],
    /// Spherical-harmonics coefficients, channel-major (`9 x RGB`).
    pub lighting: [f64; LIGHTING_DIM],
}

impl Default for CoefficientVector {
    fn default() -> Self {
        Self {
            identity: vec![0.0; IDENTITY_DIM],
            expression: vec![0.0; EXPRESSION_DIM],
            texture: vec![0.0; TEXTURE_DIM],
            pose: [0.0; POSE_DIM],
            lighting: [0.0; LIGHTING_DIM],
        }
    }
}

impl CoefficientVector {
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != COEFF_LEN {
            return contract(
                "coefficients",
                format!("expected {COEFF_LEN} values, got {}", v.len()),
            );
        }
        let (id, rest) = v.split_at(IDENTITY_DIM);
        let (ex, rest) = rest.split_at(EXPRESSION_DIM);
        let (tx, rest) = rest.split_at(TEXTURE_DIM);
        let (pose, light) = rest.split_at(POSE_DIM);
        Ok(Self {
            identity: id.to_vec(),
            expression: ex.to_vec(),
            texture: tx.to_vec(),
            pose: pose.try_into().expect("split length"),
            lighting: light.try_into().expect("split length"),
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(COEFF_LEN);
        v.extend_from_slice(&self.identity);
        v.extend_from_slice(&self.expression);
        v.extend_from_slice(&self.texture);
        v.extend_from_slice(&self.pose);
        v.extend_from_slice(&self.lighting);
        v
    }

    pub fn len(&self) -> usize {
        self.identity.len() + self.expression.len() + self.texture.len() + POSE_DIM + LIGHTING_DIM
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}
