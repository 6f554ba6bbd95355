//! Diffusion-feature injection for noise-robust one-stage object detection.
//!
//! A small denoising diffusion model is trained on clean images; activations
//! tapped from several levels of its U-Net decoder are resized, projected and
//! summed into one feature map, which a zero-initialised residual adapter adds
//! to the stride-8 branch of a compact detector's neck. The crate also holds
//! everything needed to run the comparison end to end: a synthetic PCB-defect
//! generator and DeepPCB loader, seeded corruptions, an on-disk feature cache,
//! mAP evaluation and report tables.

pub mod data;
pub mod ddpm;
pub mod detector;
mod error;
pub mod eval;
pub mod features;
pub mod hashing;
mod image;
pub mod noise;
pub mod pipeline;

pub use error::{CoreError, Result};
pub use image::{ImageTensor, ValueRange};

/// Magic of model checkpoints.
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DYCK";
/// Magic of feature cache entries.
pub const FEATURE_MAGIC: [u8; 4] = *b"DYFC";
