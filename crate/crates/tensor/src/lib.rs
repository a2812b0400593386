//! Dense `f32` tensors and a tape-based reverse-mode autodiff engine.
//!
//! [`Tensor`] is a plain value. Differentiable computation happens on a
//! [`Tape`]: each op appends a node and, if any input needs a gradient, the
//! state its backward rule needs. [`Tape::backward`] sweeps the tape in reverse.

mod error;
pub mod gradcheck;
mod ops;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::{Axis, BatchStats, PoolMode};
pub use params::{Param, ParamId, ParamKind, ParamStore};
pub use tape::{BackwardRecord, Op, Tape, Var};
pub use tensor::{numel, Tensor};

/// Numerically stable logistic function.
pub fn sigmoid(x: f32) -> f32 {
    ops::sigmoid_f32(x)
}
