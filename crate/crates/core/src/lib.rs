//! Few-shot metric learning with class-separability losses.
//!
//! The crate trains a small embedding network over an episodic K-way C-shot
//! protocol using distance-based losses — a prototype-anchored triplet loss
//! and a nearest-neighbor class-separability score turned into a loss — on
//! top of a built-in reverse-mode differentiation tape. A diagnostics module
//! verifies the separability dynamics empirically.

pub mod diagnostics;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod gradcheck;
pub mod icnn;
pub mod protonet;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod triplet;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Seed derivation used for the default encoder init inside the trainer,
/// exposed so tools can reproduce the untrained baseline.
pub fn episodes_mix(seed: u64) -> u64 {
    episodes::mix64(&[seed, 0x656e_63])
}
