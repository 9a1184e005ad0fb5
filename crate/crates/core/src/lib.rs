//! Self-supervised coarse-to-fine dense image alignment.
//!
//! The pipeline aligns a source image to a target image through a dense
//! displacement field computed by a hierarchy of siamese convolutional
//! encoders and residual aligner modules, trained without ground-truth
//! correspondences by minimizing post-warp squared error plus a maskable
//! smoothness penalty. Supporting machinery covers training-time
//! augmentation (including crack synthesis), synthetic evaluation data,
//! chunked Pearson-correlation scoring, a learning-free direct optimizer
//! baseline, and tiled inference for images too large to process whole.

pub mod augment;
pub mod checkpoint;
pub mod chunked;
pub mod error;
pub mod eval;
pub mod field;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod optimize;
pub mod scalar;
pub mod stack;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use field::{
    compose_residual, coordinate_grid, pixels_to_normalized, upsample_field, warp,
    DisplacementField, Window,
};
pub use loss::{LossConfig, PenaltyMask};
pub use model::{EncoderMode, ModelConfig, ModelParams};
pub use scalar::Scalar;
pub use stack::ImageStack;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Deterministic sub-seed derivation (splitmix64 over a tagged base).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E3779B97F4A7C15);
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}
