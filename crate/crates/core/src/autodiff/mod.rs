//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Build a fresh [`Tape`] per forward pass, record parameters as leaves, run
//! ops, then call [`Tape::backward`] on a scalar loss and read gradients back
//! with [`Tape::grad`].

mod tape;
mod tensor;

pub use tape::{argmax, DiffTensor, Elementwise, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use tape::matmul_raw;
