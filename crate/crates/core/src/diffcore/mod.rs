//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] as they run and differentiated with
//! [`Tape::backward`]. Binary ops broadcast only a one-element operand or an
//! operand matching the other's trailing axes; everything else must be
//! reshaped or broadcast explicitly.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{max_gradient_error, GRADCHECK_FLOOR};
pub use tape::{sigmoid, softplus, Gradients, Tape, UnaryKind, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
