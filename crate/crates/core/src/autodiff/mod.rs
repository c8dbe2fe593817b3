//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! the tape as named leaves; [`Tape::backward`] walks the records in reverse
//! and returns the gradient of a scalar loss for each trainable parameter,
//! keyed by parameter name.

mod kernels;
mod ops;
mod param;
mod tape;
mod tensor;

pub use ops::{softmax_rows, BatchNormOutput, RunningStats};
pub use param::{sgd_step, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

