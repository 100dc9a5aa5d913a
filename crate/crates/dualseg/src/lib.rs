//! Semi-supervised dual-network 3D instrument segmentation on synthetic
//! ultrasound-like phantoms.
//!
//! The toolkit trains a pair of independently initialized compact 3D UNets
//! that exchange voxel-level supervision on uncertainty-selected voxels and
//! contextual supervision through an adversarial labeled/unlabeled classifier
//! and a contextual encoder. Inference runs coarse-to-fine: locate the
//! instrument center, tile a 64-voxel region of interest with eight
//! overlapping 48-voxel patches, average the two networks' predictions and
//! stitch.
//!
//! Module map:
//! - [`core`]: shared domain types, normalization, binarization
//! - [`container`]: the on-disk volume directory format
//! - [`phantom`]: deterministic synthetic data generation and augmentation
//! - [`nn`]: tensor/layer plumbing (generic over `f32`/`f64`)
//! - [`backbone`]: the compact UNet and its Monte Carlo estimates
//! - [`heads`]: labeled/unlabeled discriminator and contextual encoder
//! - [`losses`]: the hybrid loss components, mask algebra, ramp schedules,
//!   and the finite-difference gradient verification suite
//! - [`trainer`]: the dual-network training loop and checkpoint bundles
//! - [`pipeline`]: coarse-to-fine patch inference
//! - [`metrics`]: Dice, 95th-percentile Hausdorff, paired t-test

pub mod backbone;
pub mod container;
pub mod core;
pub mod error;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod trainer;

pub use error::{DualsegError, Result};
