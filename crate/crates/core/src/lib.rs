//! Self-supervised pretraining of point cloud video encoders from paired
//! image videos.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`datagen`]: synthetic paired point-cloud/image videos and the on-disk dataset format
//! - [`augment`]: spatio-temporal point augmentations, image crop/jitter, frame alignment
//! - [`model`]: point and image video encoders, projection heads, checkpoints
//! - [`objective`]: intra-modal and cross-modal NT-Xent objectives with analytic gradients
//! - [`train`]: pretraining, fine-tuning and linear probing
//! - [`eval`]: temporal segmentation metrics and experiment sweeps
//! - [`cli`]: the `crossvideo` command line entry point

pub mod augment;
pub mod autograd;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod parallel;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
