//! Geometry-aware few-shot keypoint localization.
//!
//! A self-contained toolkit for detecting 2D keypoints (with per-point
//! visibility and depth) from a handful of annotated images, using skeleton
//! structure as the supervisory glue: predictions must behave consistently
//! under image transforms, assemble into parts that align in 3D across a
//! batch, and carry enough information to redraw the figure.
//!
//! Crate layout:
//! - [`diffcore`]: reverse-mode autodiff over dense `f64` tensors.
//! - [`geom`]: coordinate grids, soft-argmax readout, segment distances,
//!   affine image transforms, similarity alignment, skeleton definitions.
//! - [`skeledge`]: differentiable uncertainty-weighted skeleton rendering.
//! - [`nets`]: the detector and decoder networks.
//! - [`objective`]: training losses and their schedule.
//! - [`synthgen`]: procedural creature dataset generator and on-disk format.
//! - [`evalkit`]: shot selection and evaluation metrics.
//! - [`train`]: configuration, the optimizer, and the training loop.

pub mod diffcore;
pub mod nets;
pub mod objective;
pub mod synthgen;
pub mod skeledge;
pub mod geom;
