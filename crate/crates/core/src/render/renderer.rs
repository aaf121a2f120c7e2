use std::sync::Arc;

use super::camera::{project, RenderConfig, NEAR};
use super::raster::{barycentric_weights, interpolate, rasterize, RenderBuffers};
use super::rotation::{pose_transform, rotation_matrix, Pose};
use super::shading::sh_shade;
use crate::diff::{Tape, Tensor, Var};
use crate::error::{contract, Result};
use crate::mesh::{vertex_normals, vertex_normals_plain};

/// Whether the rendered colors include illumination.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shading {
    Lit,
    AlbedoOnly,
}

/// Result of [`render_image`]. `image` is `P x 3` with `P = size * size`,
/// zero outside the coverage mask.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: Var,
    pub buffers: Arc<RenderBuffers>,
    /// Coverage mask (the projected face region).
    pub mask: Vec<bool>,
    /// Screen rows `(u, v, depth)` per vertex.
    pub screen: Var,
}

/// Poses, projects, rasterizes and shades a mesh with per-vertex albedo.
/// Differentiable with respect to `shape`, `albedo`, `pose` and `lighting`
/// for a fixed pixel coverage.
#[allow(clippy::too_many_arguments)]
pub fn render_image(
    tape: &mut Tape,
    shape: Var,
    albedo: Var,
    pose: Var,
    lighting: Var,
    triangles: &Arc<Vec<[usize; 3]>>,
    config: &RenderConfig,
    shading: Shading,
) -> Result<RenderOutput> {
    config.validate()?;
    let n = match tape.shape(shape) {
        [n, 3] => *n,
        s => return contract("render_image", format!("shape must be n x 3, got {s:?}")),
    };
    if tape.shape(albedo) != [n, 3] {
        return contract("render_image", format!("albedo {:?} for {n} vertices", tape.shape(albedo)));
    }
    let cam = pose_transform(tape, shape, pose, config.rotation)?;
    let screen = project(tape, cam, config)?;
    let p = config.pixels();
    if n == 0 || triangles.is_empty() {
        let buffers = Arc::new(RenderBuffers::empty(config.image_size));
        return Ok(RenderOutput {
            image: tape.constant(Tensor::zeros(&[p, 3])),
            mask: buffers.mask(),
            buffers,
            screen,
        });
    }
    let buffers = Arc::new(rasterize(tape.value(screen), triangles, config.image_size)?);
    let weights = barycentric_weights(tape, screen, &buffers, triangles);
    let color = interpolate(tape, &buffers, triangles, weights, albedo)?;
    let image = match shading {
        Shading::AlbedoOnly => color,
        Shading::Lit => {
            let (normals, _) = vertex_normals(tape, cam, triangles)?;
            let px = interpolate(tape, &buffers, triangles, weights, normals)?;
            let px = tape.normalize_rows(px)?;
            sh_shade(tape, color, px, lighting)?
        }
    };
    Ok(RenderOutput {
        image,
        mask: buffers.mask(),
        buffers,
        screen,
    })
}

/// Per-vertex illuminated albedo under the same camera-space normals the
/// renderer uses.
pub fn shade_vertices(
    tape: &mut Tape,
    shape: Var,
    albedo: Var,
    pose: Var,
    lighting: Var,
    triangles: &[[usize; 3]],
    config: &RenderConfig,
) -> Result<Var> {
    let cam = pose_transform(tape, shape, pose, config.rotation)?;
    let (normals, _) = vertex_normals(tape, cam, triangles)?;
    sh_shade(tape, albedo, normals, lighting)
}

/// Camera-space positions without a tape.
pub fn transform_points(positions: &Tensor, pose: &Pose, config: &RenderConfig) -> Vec<[f64; 3]> {
    let r = rotation_matrix(config.rotation, pose.rotation);
    (0..positions.rows())
        .map(|i| {
            let x = positions.row(i);
            let mut out = pose.translation;
            for (a, o) in out.iter_mut().enumerate() {
                *o += r[a][0] * x[0] + r[a][1] * x[1] + r[a][2] * x[2];
            }
            out
        })
        .collect()
}

/// Bilinear sample of `image` at a continuous pixel position, where integer
/// coordinates are pixel centers. `None` outside the image.
pub fn sample_bilinear(image: &Tensor, size: usize, x: f64, y: f64) -> Option<[f64; 3]> {
    let max = size as f64 - 1.0;
    if !(0.0..=max).contains(&x) || !(0.0..=max).contains(&y) {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let px = |r: usize, c: usize| image.row(r * size + c);
    let mut out = [0.0; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        let top = px(y0, x0)[ch] * (1.0 - fx) + px(y0, x1)[ch] * fx;
        let bottom = px(y1, x0)[ch] * (1.0 - fx) + px(y1, x1)[ch] * fx;
        *o = top * (1.0 - fy) + bottom * fy;
    }
    Some(out)
}

/// Colors of `image` under each projected vertex, and whether the vertex is
/// usable: in front of the camera, facing it, and inside the frame. Invalid
/// vertices get black.
pub fn project_vertex_colors(
    image: &Tensor,
    positions: &Tensor,
    pose: &Pose,
    triangles: &[[usize; 3]],
    config: &RenderConfig,
) -> Result<(Tensor, Vec<bool>)> {
    config.validate()?;
    let size = config.image_size;
    if image.shape() != [size * size, 3] {
        return contract("project_vertex_colors", format!("image {:?} is not {size}x{size} RGB", image.shape()));
    }
    let cam = transform_points(positions, pose, config);
    let cam_t = Tensor::from_parts(vec![cam.len(), 3], cam.iter().flatten().copied().collect());
    let (normals, _) = vertex_normals_plain(&cam_t, triangles)?;
    let mut colors = vec![0.0; cam.len() * 3];
    let mut valid = vec![false; cam.len()];
    for (i, p) in cam.iter().enumerate() {
        let [u, v, d] = config.project_point(*p);
        if d <= NEAR {
            continue;
        }
        let to_cam = [-p[0], -p[1], config.camera.distance - p[2]];
        let nrm = normals.row(i);
        if nrm[0] * to_cam[0] + nrm[1] * to_cam[1] + nrm[2] * to_cam[2] <= 0.0 {
            continue;
        }
        if let Some(c) = sample_bilinear(image, size, u - 0.5, v - 0.5) {
            colors[3 * i..3 * i + 3].copy_from_slice(&c);
            valid[i] = true;
        }
    }
    Ok((Tensor::from_parts(vec![cam.len(), 3], colors), valid))
}
