// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale pre-LN transformer: forward passes with hidden-state taps,
//! suffix execution, layer deletion, training and checkpoint files.

mod checkpoint;
mod config;
pub mod graph;
pub mod tokenizer;
mod train;
mod transformer;

pub use config::ModelConfig;
pub use tokenizer::{detokenize, tokenize, PAD, VOCAB_SIZE};
pub use train::{train_base_model, TrainConfig, TrainOutcome};
pub use transformer::{Block, ForwardTrace, Layer, TransformerModel, BLOCK_FIELDS};

/// Consecutive windows of `seq + 1` tokens (inputs plus shifted targets),
/// stride `seq`. A trailing partial window is kept if it has at least two
/// tokens.
pub fn windows(stream: &[usize], seq: usize) -> Vec<&[usize]> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < stream.len() {
        let end = (start + seq + 1).min(stream.len());
        out.push(&stream[start..end]);
        start += seq;
    }
    out
}

/// Split `len` items into contiguous train / lens-train / eval ranges in
/// 90/5/5 proportion.
pub fn split_ranges(len: usize) -> [std::ops::Range<usize>; 3] {
    let a = len * 90 / 100;
    let b = len * 95 / 100;
    [0..a, a..b, b..len]
}

/// Inputs of the first `n_seqs` full windows of `seq + 1` tokens, laid out
/// as one batch.
pub fn batch_windows(
    stream: &[usize],
    seq: usize,
    n_seqs: usize,
) -> crate::error::Result<(Vec<usize>, crate::numerics::kernels::SeqLayout)> {
    let full: Vec<&[usize]> = windows(stream, seq).into_iter().filter(|w| w.len() == seq + 1).take(n_seqs).collect();
    if full.is_empty() || seq == 0 {
        return Err(crate::error::Error::Empty("full-length window"));
    }
    let ids = full.iter().flat_map(|w| w[..seq].iter().copied()).collect();
    Ok((ids, crate::numerics::kernels::SeqLayout { batch: full.len(), seq }))
}
