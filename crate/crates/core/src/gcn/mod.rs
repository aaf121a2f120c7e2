//! Chebyshev spectral graph convolutions and the texture networks built from
//! them: a Decoder from a face embedding, a Refiner over coarse and projected
//! vertex colors, a Combiner joining the two, and an image critic.
//!
//! Parameters live in a [`ParamStore`] under dotted names such as
//! `decoder.block0.conv1.theta` and are bound to a tape per forward pass.

mod cheb;
mod checkpoint;
mod network;
mod nets;
mod params;

pub use cheb::{cheb_basis, cheb_conv, ChebLayer};
pub use checkpoint::{read_checkpoint, read_checkpoint_file, write_checkpoint, write_checkpoint_file};
pub use network::{LayerSpec, NetworkSpec, ResidualBlock, Signal};
pub use nets::{to_albedo, Discriminator, GcnConfig, TextureNets, DISCRIMINATOR_LAYERS};
pub use params::{BoundParams, ParamStore};

#[cfg(test)]
mod tests;
