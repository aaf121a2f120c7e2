use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diff::{CustomOp, Tape, Tensor, Var};
use crate::error::{contract, Result};

type Mat3 = [[f64; 3]; 3];

/// How the three rotation entries of a pose are read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    /// Angles `(a, b, c)` about x, y, z; `R = Rz(c) Ry(b) Rx(a)`.
    #[default]
    EulerXyz,
    /// Rotation vector: axis times angle in radians.
    AxisAngle,
}

/// Six-degree-of-freedom rigid transform: rotation then translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl Pose {
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 6 {
            return contract("pose", format!("expected 6 values, got {}", v.len()));
        }
        Ok(Self {
            rotation: [v[0], v[1], v[2]],
            translation: [v[3], v[4], v[5]],
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.rotation.iter().chain(&self.translation).copied().collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.to_vec())
    }
}

fn mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn skew(v: [f64; 3]) -> Mat3 {
    [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
}

fn axis_rot(axis: usize, angle: f64, derivative: bool) -> Mat3 {
    let (s, c) = angle.sin_cos();
    // Value (c, s) or derivative (-s, c) in the rotation plane.
    let (c, s, one) = if derivative { (-s, c, 0.0) } else { (c, s, 1.0) };
    match axis {
        0 => [[one, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        1 => [[c, 0.0, s], [0.0, one, 0.0], [-s, 0.0, c]],
        _ => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, one]],
    }
}

/// Rotation matrix for three angles under `mode`.
pub fn rotation_matrix(mode: RotationMode, r: [f64; 3]) -> Mat3 {
    match mode {
        RotationMode::EulerXyz => mul(&axis_rot(2, r[2], false), &mul(&axis_rot(1, r[1], false), &axis_rot(0, r[0], false))),
        RotationMode::AxisAngle => {
            let theta = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            let k = skew(r);
            let k2 = mul(&k, &k);
            let (a, b) = if theta < 1e-8 {
                (1.0 - theta * theta / 6.0, 0.5 - theta * theta / 24.0)
            } else {
                (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
            };
            let mut out = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    out[i][j] = f64::from(u8::from(i == j)) + a * k[i][j] + b * k2[i][j];
                }
            }
            out
        }
    }
}

/// `dR / dr_i` for each of the three rotation entries.
fn rotation_jacobian(mode: RotationMode, r: [f64; 3]) -> [Mat3; 3] {
    match mode {
        RotationMode::EulerXyz => {
            let (x, y, z) = (axis_rot(0, r[0], false), axis_rot(1, r[1], false), axis_rot(2, r[2], false));
            let (dx, dy, dz) = (axis_rot(0, r[0], true), axis_rot(1, r[1], true), axis_rot(2, r[2], true));
            [mul(&z, &mul(&y, &dx)), mul(&z, &mul(&dy, &x)), mul(&dz, &mul(&y, &x))]
        }
        RotationMode::AxisAngle => {
            let t2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
            let mut out = [[[0.0; 3]; 3]; 3];
            if t2 < 1e-16 {
                for (i, o) in out.iter_mut().enumerate() {
                    let mut e = [0.0; 3];
                    e[i] = 1.0;
                    *o = skew(e);
                }
                return out;
            }
            // dR/dv_i = (v_i [v]x + [v x (I - R) e_i]x) R / |v|^2
            let rot = rotation_matrix(mode, r);
            let k = skew(r);
            for (i, o) in out.iter_mut().enumerate() {
                let col = [-rot[0][i], -rot[1][i], -rot[2][i]];
                let mut w = col;
                w[i] += 1.0;
                let cr = [r[1] * w[2] - r[2] * w[1], r[2] * w[0] - r[0] * w[2], r[0] * w[1] - r[1] * w[0]];
                let s = skew(cr);
                let mut m = [[0.0; 3]; 3];
                for a in 0..3 {
                    for b in 0..3 {
                        m[a][b] = (r[i] * k[a][b] + s[a][b]) / t2;
                    }
                }
                *o = mul(&m, &rot);
            }
            out
        }
    }
}

struct RotationOp {
    mode: RotationMode,
}

impl CustomOp for RotationOp {
    fn name(&self) -> &'static str {
        "rotation"
    }

    fn vjp(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let r = inputs[0].data();
        let jac = rotation_jacobian(self.mode, [r[0], r[1], r[2]]);
        let g = grad.data();
        let out = jac
            .iter()
            .map(|d| (0..9).map(|e| d[e / 3][e % 3] * g[e]).sum())
            .collect();
        vec![Some(Tensor::vector(out))]
    }
}

/// Differentiable `3 x 3` rotation matrix from a length-3 rotation variable.
pub fn rotation(tape: &mut Tape, r: Var, mode: RotationMode) -> Result<Var> {
    if tape.shape(r) != [3] {
        return contract("rotation", format!("expected 3 rotation values, got {:?}", tape.shape(r)));
    }
    let v = tape.value(r).data();
    let m = rotation_matrix(mode, [v[0], v[1], v[2]]);
    let value = Tensor::from_parts(vec![3, 3], m.iter().flatten().copied().collect());
    Ok(tape.custom(&[r], value, Arc::new(RotationOp { mode })))
}

/// `R x + t` for every row of `positions` (`n x 3`), with `pose` a length-6
/// variable holding rotation then translation.
pub fn pose_transform(tape: &mut Tape, positions: Var, pose: Var, mode: RotationMode) -> Result<Var> {
    let n = match tape.shape(positions) {
        [n, 3] => *n,
        s => return contract("pose_transform", format!("positions must be n x 3, got {s:?}")),
    };
    if tape.shape(pose) != [6] {
        return contract("pose_transform", format!("pose must have 6 values, got {:?}", tape.shape(pose)));
    }
    let row = tape.reshape(pose, &[1, 6])?;
    let r = tape.slice_cols(row, 0, 3)?;
    let r = tape.reshape(r, &[3])?;
    let t = tape.slice_cols(row, 3, 6)?;
    let t = tape.reshape(t, &[3])?;
    let rot = rotation(tape, r, mode)?;
    let rt = tape.transpose(rot)?;
    let out = tape.matmul(positions, rt)?;
    if n == 0 {
        return Ok(out);
    }
    tape.add_row_bias(out, t)
}
