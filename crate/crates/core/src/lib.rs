//! Bimanual grasp saliency on point clouds.
//!
//! The crate learns a per-point bimanual saliency map and left/right contact
//! labels from a single-handed saliency map and sparse contact annotations,
//! and refines predictions at test time so that the chosen contact pair is
//! balanced about the object's gravity line.
//!
//! Modules, bottom-up:
//! - [`geom`]: point clouds, labels, gravity line, neighbor interpolation,
//!   surface sampling.
//! - [`autodiff`]: a small reverse-mode tape over dense `f64` tensors.
//! - [`nets`]: point-wise encoder/decoder networks and the weights format.
//! - [`losses`]: training objectives.
//! - [`train`]: correction-module pre-training and joint training with
//!   periodic saliency updates.
//! - [`pipeline`]: inference, refinement, contact clustering and metrics.
//! - [`data`]: synthetic objects, ground-truth vectors, PLY and JSON I/O.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod geom;
pub mod losses;
pub mod nets;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
