//! Dense tensors, raw kernels and the reverse-mode tape.

mod finite_diff;
pub mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use finite_diff::{finite_diff_grad, finite_diff_vjp, max_relative_error, GRAD_FLOOR};
pub use scalar::Scalar;
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::{Tensor, MAX_RANK};

#[cfg(test)]
mod tests;
