// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a pre-LN decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub eps: f64,
}

impl ModelConfig {
    /// Six layers, width 128, byte vocabulary.
    pub fn desk() -> Self {
        Self {
            n_layers: 6,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: super::tokenizer::VOCAB_SIZE,
            max_seq_len: 256,
            eps: 1e-5,
        }
    }

    pub fn tiny(n_layers: usize, d_model: usize, n_heads: usize) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            d_ff: 4 * d_model,
            vocab_size: super::tokenizer::VOCAB_SIZE,
            max_seq_len: 64,
            eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::InvalidArgument("n_layers must be at least 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidArgument("vocab_size must be at least 2".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::InvalidArgument("d_ff and max_seq_len must be positive".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
