//! Reverse-mode automatic differentiation over dense 2-D `f64` matrices.
//!
//! Rank-3 quantities (a window of K daily matrices) are handled as slices of
//! 2-D tensors. Forward passes record onto a [`Tape`]; [`Tape::backward`]
//! returns the gradients of trainable leaves and clears the tape.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{Activation, BinaryOp, Gradients, OpKind, Reduction, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
