//! Dense tensor kernel with reverse-mode differentiation.
//!
//! [`Tensor`] is an immutable row-major value; [`Tape`](tape::Tape) records
//! tensor-level primitives and computes gradients by walking the record in
//! reverse. Every public operation traps non-finite outputs. [`grad_check`]
//! compares tape gradients against central finite differences and excludes
//! coordinates whose perturbation flips a branch (ReLU sign, max argmax).

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, Evaluation, GradCheckReport};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("index out of range in {op}: {detail}")]
    IndexOutOfRange { op: &'static str, detail: String },
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

pub type NumericsResult<T> = std::result::Result<T, NumericsError>;
