// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-wise decoding of transformer residual streams.

pub mod aitchison;
pub mod anomaly;
pub mod causal;
pub mod container;
pub mod diagnostics;
pub mod difficulty;
pub mod error;
pub mod lens;
pub mod model;
pub mod numerics;
pub mod staticlens;
pub mod synth;

pub use error::{Error, Result};

/// Single-precision instantiations.
pub type ModelF32 = model::TransformerModel<f32>;
pub type TunedLensF32 = lens::TunedLens<f32>;
pub type TensorF32 = numerics::Tensor<f32>;

/// Double-precision instantiations, used for gradient checks.
pub type ModelF64 = model::TransformerModel<f64>;
pub type TunedLensF64 = lens::TunedLens<f64>;
pub type TensorF64 = numerics::Tensor<f64>;
