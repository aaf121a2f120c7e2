//! Training objectives and image metrics: masked pixel loss, embedding
//! (identity) loss, per-vertex loss, the WGAN-GP critic and generator terms,
//! the warm-up weighted total, and L1/PSNR/SSIM/cosine scores.

mod adversarial;
mod identity;
mod metrics;
mod pixel;
mod schedule;

pub use adversarial::{adversarial_loss, generator_adversarial_loss, AdversarialTerms, Critic, DEFAULT_LAMBDA_GP};
pub use identity::{cosine_similarity, embedding_distance, identity_loss, EmbeddingFn, ToyEmbedder};
pub use metrics::{embedding_cosine, l1, metrics, mse, psnr, ssim, Metrics, PSNR_SENTINEL};
pub use pixel::{pixel_loss, vertex_loss, vertex_loss_masked, MaskPair};
pub use schedule::{total_loss, LossTerms, LossWeights, RenderTerms};
