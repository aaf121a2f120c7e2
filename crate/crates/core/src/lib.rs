//! Coarse-to-fine 3D face reconstruction: a linear morphable model provides
//! shape and a coarse albedo, and Chebyshev spectral graph networks refine the
//! per-vertex colors under a differentiable deferred-shading renderer.

mod binio;
pub mod diff;
pub mod error;
pub mod gcn;
pub mod losses;
pub mod mesh;
pub mod morphable;
pub mod pipeline;
pub mod render;

pub use error::{Error, Result};
