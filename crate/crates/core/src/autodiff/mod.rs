//! Dense-tensor reverse-mode differentiation.
//!
//! A [`Tape`] records primitives applied to [`Tensor`]s in evaluation order;
//! [`Tape::backward`] walks it once in reverse. [`finite_diff_check`] is the
//! independent oracle every loss and model in this crate is tested against.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_against, finite_diff_check, numeric_gradient, relative_error, GradReport};
pub use tape::{Gradients, NodeId, Primitive, Tape};
pub use tensor::Tensor;

pub(crate) use tape::{matmul_raw, softmax_raw};
