//! Anchor-to-joint (A2J) regression for 3D articulated pose estimation from
//! single depth images.
//!
//! Dense in-plain anchor points each regress every joint; a learned softmax
//! weighting aggregates the per-anchor predictions into joint estimates. The
//! crate contains the tensor/autodiff engine the network runs on, anchor and
//! crop geometry, the network itself, its losses, a deterministic synthetic
//! depth dataset, a training loop and the evaluation metrics.

pub mod anchor;
pub mod autodiff;
pub mod diagnostics;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub(crate) mod rngutil;
pub mod synth;
pub mod train;

pub use error::A2jError;
