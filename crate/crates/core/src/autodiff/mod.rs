//! Minimal reverse-mode differentiation engine.
//!
//! Provides exactly the operator set the segmenter and its losses need,
//! plus a finite-difference harness for verifying gradients.

mod check;
mod tape;
mod tensor;

pub use check::{finite_difference_check, FdBlockReport, FdReport, FdSettings, ParamBlock};
pub use tape::{sigmoid, softplus, OpKind, Tape, ValueId};
pub use tensor::Tensor;
