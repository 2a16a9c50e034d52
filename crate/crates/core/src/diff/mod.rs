//! Dense tensors with reverse-mode differentiation.
//!
//! Every learnable operation in the crate is composed from the op catalog
//! on [`Tape`]. Values are 64-bit throughout so the finite-difference
//! checker in [`check`] can verify gradients tightly.

pub mod check;
mod kernels;
mod tape;
mod tensor;

pub use check::{grad_check, rel_err, rel_err_floor, GradCheck, GradCheckReport};
pub use tape::{mix, sigmoid, softplus, DropoutStream, Tape, Unary, Var};
pub use tensor::Tensor;
