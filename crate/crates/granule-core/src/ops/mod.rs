//! Numeric kernels behind the autograd ops.
//!
//! Each submodule pairs a forward routine with its analytic backward;
//! [`crate::autograd::Graph`] wires them into the tape.

pub mod conv;
pub mod dense;
pub mod gemm;
pub mod norm;
pub mod pool;
pub mod softmax;
