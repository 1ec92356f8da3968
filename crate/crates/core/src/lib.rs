//! Few-shot image classification with prototypical networks, regularized by
//! a momentum-queue contrastive loss over learnable image views. The view
//! modules are trained with a two-stage (second-order) update against the
//! meta objective; everything runs on a small tape-based autodiff engine over
//! `ndarray` arrays.

pub mod autoview;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod contrast;
pub mod eval;
pub mod datasets;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod protohead;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
