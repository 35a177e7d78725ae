//! Multi-view contrastive segmentation on synthetic phantom volumes.
//!
//! This crate contains everything needed to generate deterministic
//! three-view phantom datasets, train a triplet-encoder U-Net with a
//! blended Dice + multi-view InfoNCE objective, run inference from any
//! subset of views, and evaluate volumetric segmentation quality with
//! distance-based metrics and the accompanying statistics.
//!
//! Layout:
//! - [`tensor`]: flat tensors, reverse-mode autodiff, Adam, gradient
//!   checking.
//! - [`losses`]: Dice, directed InfoNCE, contrastive and total losses.
//! - [`phantom`]: synthetic volume generation, resampling, slicing,
//!   dataset I/O.
//! - [`model`]: the triplet-encoder U-Net and its checkpoint format.
//! - [`metrics`]: DSC / 95-HD / ABD / RVD, regional analysis, bootstrap
//!   and hypothesis tests.
//! - [`train`]: batching, augmentation, the training loop, inference
//!   and cohort evaluation.

pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ParamSet, Tensor};
