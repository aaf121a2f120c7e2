//! Differentiable deferred shading: rigid pose, pinhole projection, a
//! z-buffered rasterizer producing triangle-ID and barycentric buffers,
//! attribute interpolation and spherical-harmonics illumination.
//!
//! Images are `P x 3` tensors of pixel rows (row-major, `P = size * size`).
//! Coverage is piecewise constant, so geometric gradients flow only through
//! the barycentric weights of already covered pixels.

mod camera;
mod image;
mod raster;
mod renderer;
mod rotation;
mod shading;

pub use camera::{project, Camera, RenderConfig, NEAR};
pub use image::{read_mask_png, read_png, write_mask_png, write_png};
pub use raster::{barycentric, barycentric_weights, interpolate, rasterize, RenderBuffers};
pub use renderer::{
    project_vertex_colors, render_image, sample_bilinear, shade_vertices, transform_points, RenderOutput, Shading,
};
pub use rotation::{pose_transform, rotation, rotation_matrix, Pose, RotationMode};
pub use shading::{ambient_lighting, sh_basis, sh_basis_rows, sh_shade, LIGHTING_LEN, SH_C0, SH_C1, SH_C2, SH_C3, SH_C4};

#[cfg(test)]
mod tests;
