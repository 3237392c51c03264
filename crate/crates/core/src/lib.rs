//! Keypoint detection toolkit.
//!
//! The crate contains everything needed to train and evaluate the detector on
//! a CPU: a small tensor type with tape-based reverse-mode differentiation, the
//! fixed derivative filter bank, the multi-scale network, the multi-window
//! index proposal loss, a synthetic homography pair generator and the
//! repeatability benchmark.

// Negated comparisons reject NaN on purpose; `Var` arithmetic returns
// `Result`, so the operator traits do not fit.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod autograd;
pub mod config;
pub mod datagen;
pub mod eval;
pub mod filters;
pub mod geometry;
pub mod kernels;
pub mod model;
pub mod msip;
pub mod pgm;
pub mod real;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var, Variable};
pub use real::Real;
pub use tensor::{Tensor, TensorError, TensorResult};
