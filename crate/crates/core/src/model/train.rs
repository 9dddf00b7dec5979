// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::graph::{record_forward, ModelVars};
use super::tokenizer::tokenize;
use super::transformer::TransformerModel;
use crate::error::{Error, Result};
use crate::numerics::kernels::SeqLayout;
use crate::numerics::optim::{clip_grad_norm, cosine_lr, Adam};
use crate::numerics::{Scalar, Tape};

/// Base-model optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup: usize,
    pub clip: f64,
    /// Keep a snapshot every this many steps (0 keeps none besides the end).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            seq_len: 64,
            lr: 3e-4,
            warmup: 50,
            clip: 1.0,
            checkpoint_every: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: TransformerModel<T>,
    /// `(step, snapshot)` pairs in training order; the final model is last.
    pub checkpoints: Vec<(usize, TransformerModel<T>)>,
    /// Mean training loss (nats/token) at every step.
    pub losses: Vec<f64>,
}

/// Train a freshly initialized model on next-byte prediction with Adam.
pub fn train_base_model<T: Scalar>(
    corpus: &[u8],
    config: ModelConfig,
    train: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    if corpus.len() < 2 {
        return Err(Error::Empty("training corpus"));
    }
    if train.steps == 0 || train.batch_size == 0 || train.seq_len == 0 {
        return Err(Error::InvalidArgument("steps, batch_size and seq_len must be positive".into()));
    }
    let model = TransformerModel::<T>::init(config, train.seed)?;
    train_from(model, corpus, train)
}

/// Continue training an existing model.
pub fn train_from<T: Scalar>(
    mut model: TransformerModel<T>,
    corpus: &[u8],
    train: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let stream = tokenize(corpus);
    let seq = train.seq_len.min(stream.len() - 1).min(model.config.max_seq_len);
    let layout = SeqLayout {
        batch: train.batch_size,
        seq,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x7472_6169_6e00);
    let shapes: Vec<Vec<usize>> = model.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut adam = Adam::<T>::new(&shape_refs);
    let mut losses = Vec::with_capacity(train.steps);
    let mut checkpoints = Vec::new();
    let mut ids = Vec::with_capacity(layout.tokens());
    let mut targets = Vec::with_capacity(layout.tokens());
    for step in 0..train.steps {
        ids.clear();
        targets.clear();
        for _ in 0..layout.batch {
            let start = rng.random_range(0..stream.len() - seq);
            ids.extend_from_slice(&stream[start..start + seq]);
            targets.extend(stream[start + 1..start + seq + 1].iter().map(|&t| Some(t)));
        }
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, &model, true);
        let trace = record_forward(&mut tape, &model, &vars, &ids, layout)?;
        let loss = tape.cross_entropy(trace.logits, targets.clone())?;
        let value = tape.scalar(loss).as_f64();
        if !value.is_finite() {
            return Err(Error::Diverged(format!("loss {value} at step {step}")));
        }
        losses.push(value);
        let mut grads = tape.backward(loss)?;
        let mut g: Vec<_> = vars.all().into_iter().map(|v| grads.take(v)).collect();
        drop(tape);
        clip_grad_norm(&mut g, train.clip);
        let lr = cosine_lr(train.lr, step, train.steps, train.warmup);
        adam.step(&mut model.tensors_mut(), &g, lr);
        let done = step + 1;
        if train.checkpoint_every > 0 && done % train.checkpoint_every == 0 && done != train.steps {
            checkpoints.push((done, model.clone()));
        }
    }
    checkpoints.push((train.steps, model.clone()));
    Ok(TrainOutcome {
        model,
        checkpoints,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_inputs() {
        let cfg = ModelConfig::tiny(1, 8, 2);
        let t = TrainConfig::default();
        assert!(train_base_model::<f32>(b"", cfg.clone(), &t).is_err());
        let zero = TrainConfig { steps: 0, ..t };
        assert!(train_base_model::<f32>(b"abc", cfg, &zero).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = ModelConfig::tiny(1, 8, 2);
        let t = TrainConfig {
            steps: 5,
            batch_size: 2,
            seq_len: 8,
            lr: 1e-2,
            warmup: 0,
            checkpoint_every: 2,
            ..Default::default()
        };
        let a = train_base_model::<f32>(b"the quick brown fox", cfg.clone(), &t).unwrap();
        let b = train_base_model::<f32>(b"the quick brown fox", cfg, &t).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.model, b.model);
        let steps: Vec<usize> = a.checkpoints.iter().map(|(s, _)| *s).collect();
        assert_eq!(steps, vec![2, 4, 5]);
    }

    #[test]
    fn single_symbol_corpus_is_learned_at_once() {
        let cfg = ModelConfig::tiny(1, 16, 2);
        let t = TrainConfig {
            steps: 60,
            batch_size: 2,
            seq_len: 16,
            lr: 1e-2,
            warmup: 0,
            ..Default::default()
        };
        let out = train_base_model::<f32>(&[b'a'; 64], cfg, &t).unwrap();
        assert!(*out.losses.last().unwrap() < 0.05, "{:?}", out.losses.last());
    }
}
