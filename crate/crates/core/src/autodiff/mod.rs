//! Minimal reverse-mode automatic differentiation over dense NCHW tensors:
//! exactly the layer vocabulary the U-Net and the perceptual loss network
//! need, plus a finite-difference gradient checker.
//!
//! All storage and compute is f64. Gradient checks are only meaningful in
//! double precision; single-precision finite differences are too noisy.

mod array;
mod conv;
mod gradcheck;
mod graph;

pub use array::Array;
pub use gradcheck::{grad_check, op_gradcheck_suite, GradCheckResult};
pub use graph::{Graph, TensorId};
