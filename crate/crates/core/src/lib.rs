//! Sparse point-flow feature pyramids for imbalanced scene segmentation.
//!
//! The crate is layered bottom-up: [`tensor`] and [`autodiff`] provide
//! values and reverse-mode gradients, [`nn`] the kernels, and [`pointflow`]
//! and [`network`] the model. [`learn`], [`data`] and [`metrics`] cover
//! training, the synthetic benchmark and evaluation.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod learn;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod pointflow;
pub mod tensor;

pub use autodiff::{AdjointCtx, AdjointFn, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Fill, Real, Tensor};
