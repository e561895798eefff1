//! Classification toolkit for starch-microscopy images.
//!
//! The crate covers the full journey from a directory of class-labelled
//! images to an evaluation report:
//!
//! * [`tensor`] / [`autograd`] — row-major tensors and a tape-based
//!   reverse-mode differentiation engine with the op set a ResNet-18
//!   classifier needs;
//! * [`model`] — the ResNet-18 backbone with a 500→100→K fully connected
//!   head, checkpoint loading with optional backbone freezing;
//! * [`data`] — dataset discovery, seeded stratified splitting, decoding,
//!   bilinear resizing, flip/rotate augmentation and normalization;
//! * [`train`] — Adam, the epoch loop with early stopping on validation
//!   loss, and a bit-exact binary checkpoint container;
//! * [`metrics`] — confusion matrix, per-class precision/recall/F1 and
//!   support-weighted aggregates;
//! * [`gradcheck`] — finite-difference verification of every backward rule.
//!
//! Everything randomized flows from a single `u64` seed (see [`seed`]), so
//! identical invocations produce byte-identical artifacts.

pub mod autograd;
// pub mod data;
pub mod error;
pub mod gradcheck;
// pub mod metrics;
// pub mod model;
pub mod ops;
pub mod par;
pub mod seed;
pub mod tensor;
// pub mod train;

pub use error::{Error, Result};
pub use tensor::{Dtype, Element, Tensor};

/// Whether batch statistics and dropout masks are live (`Train`) or frozen
/// (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
