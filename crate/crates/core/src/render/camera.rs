use serde::{Deserialize, Serialize};

use super::rotation::RotationMode;
use crate::diff::{Tape, Var};
use crate::error::{contract, Error, Result};

/// Pinhole camera on the +z axis looking toward the origin. A camera-space
/// point `(x, y, z)` has depth `d = distance - z` and lands at
/// `u = cx + f x / d`, `v = cy - f y / d` with `f = focal_scale * size` and the
/// principal point at the image center. Pixel `(row i, column j)` has its
/// center at `(j + 0.5, i + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Camera {
    pub focal_scale: f64,
    pub distance: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            focal_scale: 4.0,
            distance: 10.0,
        }
    }
}

/// Everything the renderer needs besides the mesh and its coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    pub camera: Camera,
    pub rotation: RotationMode,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            camera: Camera::default(),
            rotation: RotationMode::EulerXyz,
        }
    }
}

/// Points closer to the camera plane than this are treated as behind it.
pub const NEAR: f64 = 1e-3;

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size {} is below 8", self.image_size)));
        }
        if !(self.camera.focal_scale > 0.0) || !self.camera.focal_scale.is_finite() {
            return Err(Error::Config("focal length must be positive".into()));
        }
        if !(self.camera.distance > 0.0) || !self.camera.distance.is_finite() {
            return Err(Error::Config("camera distance must be positive".into()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn focal(&self) -> f64 {
        self.camera.focal_scale * self.image_size as f64
    }

    pub fn center(&self) -> f64 {
        self.image_size as f64 / 2.0
    }

    /// Screen position and depth of one camera-space point.
    pub fn project_point(&self, p: [f64; 3]) -> [f64; 3] {
        let d = self.camera.distance - p[2];
        let f = self.focal();
        [self.center() + f * p[0] / d, self.center() - f * p[1] / d, d]
    }
}

/// Differentiable projection of camera-space rows to `(u, v, depth)` rows.
/// Points behind the camera get meaningless screen coordinates; the
/// rasterizer skips triangles touching them.
pub fn project(tape: &mut Tape, cam: Var, config: &RenderConfig) -> Result<Var> {
    let n = match tape.shape(cam) {
        [n, 3] => *n,
        s => return contract("project", format!("positions must be n x 3, got {s:?}")),
    };
    if n == 0 {
        return Ok(cam);
    }
    let x = tape.slice_cols(cam, 0, 1)?;
    let y = tape.slice_cols(cam, 1, 2)?;
    let z = tape.slice_cols(cam, 2, 3)?;
    let negz = tape.neg(z);
    let d = tape.add_scalar(negz, config.camera.distance);
    // Guard the reciprocal for points behind the camera; those rows are unused.
    let dv = tape.value(d).data();
    if dv.iter().any(|&v| v <= NEAR) {
        let safe = tape.clamp(d, NEAR, f64::INFINITY)?;
        return finish(tape, x, y, safe, d, config);
    }
    finish(tape, x, y, d, d, config)
}

fn finish(tape: &mut Tape, x: Var, y: Var, d_safe: Var, d: Var, config: &RenderConfig) -> Result<Var> {
    let inv = tape.pow(d_safe, -1.0);
    let f = config.focal();
    let xu = tape.mul(x, inv)?;
    let xu = tape.scale(xu, f);
    let u = tape.add_scalar(xu, config.center());
    let yv = tape.mul(y, inv)?;
    let yv = tape.scale(yv, -f);
    let v = tape.add_scalar(yv, config.center());
    let uv = tape.concat_cols(u, v)?;
    tape.concat_cols(uv, d)
}
