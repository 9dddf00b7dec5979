// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense tensors, shared kernels, reverse-mode gradients and statistics.

pub mod kernels;
pub mod optim;
mod scalar;
pub mod stats;
pub mod tape;
mod tensor;

pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{dot, gemm, MatMut, MatRef, Tensor};
