// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TunedLens;
use crate::error::{Error, Result};
use crate::model::graph::record_block;
use crate::model::{Layer, TransformerModel};
use crate::numerics::kernels::{log_softmax_row, SeqLayout};
use crate::numerics::optim::{clip_grad_norm, linear_lr, Sgd};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Translator optimization settings. Defaults: 250 steps of Nesterov SGD
/// (momentum 0.9) with linear decay, base lr 1.0 (0.25 with the final
/// block), weight decay 1e-3 towards the identity, per-translator gradient
/// clipping at 1, and 2^14 tokens per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensTrainConfig {
    pub steps: usize,
    pub lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub batch_tokens: usize,
    pub seq_len: usize,
    pub include_final_block: bool,
    /// When false only the biases train, which yields the debiased lens.
    pub train_matrix: bool,
    pub seed: u64,
}

impl Default for LensTrainConfig {
    fn default() -> Self {
        Self {
            steps: 250,
            lr: None,
            momentum: 0.9,
            weight_decay: 1e-3,
            clip: 1.0,
            batch_tokens: 1 << 14,
            seq_len: 64,
            include_final_block: false,
            train_matrix: true,
            seed: 0,
        }
    }
}

impl LensTrainConfig {
    pub fn base_lr(&self) -> f64 {
        self.lr
            .unwrap_or(if self.include_final_block { 0.25 } else { 1.0 })
    }
}

/// Distillation loss (nats) per step and layer.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LensTrainLog {
    pub losses: Vec<Vec<f64>>,
}

/// Cached hidden states and final log-probabilities of a token stream cut
/// into equal-length sequences.
struct StatePool<T> {
    seq: usize,
    n_seqs: usize,
    hidden: Vec<Tensor<T>>,
    target_log_probs: Tensor<T>,
}

impl<T: Scalar> StatePool<T> {
    fn build(model: &TransformerModel<T>, stream: &[usize], seq: usize) -> Result<Self> {
        let seq = seq.min(stream.len()).min(model.config.max_seq_len);
        let n_seqs = stream.len() / seq;
        let (d, v, l) = (model.d_model(), model.vocab_size(), model.n_layers());
        let rows = n_seqs * seq;
        let mut hidden: Vec<Tensor<T>> = (0..l).map(|_| Tensor::zeros(&[rows, d])).collect();
        let mut targets = Tensor::zeros(&[rows, v]);
        let chunk = 16;
        for start in (0..n_seqs).step_by(chunk) {
            let count = chunk.min(n_seqs - start);
            let ids = &stream[start * seq..(start + count) * seq];
            let layout = SeqLayout { batch: count, seq };
            let trace = model.forward_batch(ids, layout)?;
            let base = start * seq * d;
            for (dst, src) in hidden.iter_mut().zip(&trace.hidden) {
                dst.data_mut()[base..base + src.len()].copy_from_slice(src.data());
            }
            for r in 0..count * seq {
                log_softmax_row(trace.logits.row(r), targets.row_mut(start * seq + r));
            }
        }
        Ok(Self {
            seq,
            n_seqs,
            hidden,
            target_log_probs: targets,
        })
    }

    fn gather(t: &Tensor<T>, picks: &[usize], seq: usize) -> Tensor<T> {
        let w = t.cols();
        let mut out = Tensor::zeros(&[picks.len() * seq, w]);
        for (i, &s) in picks.iter().enumerate() {
            out.data_mut()[i * seq * w..(i + 1) * seq * w]
                .copy_from_slice(&t.data()[s * seq * w..(s + 1) * seq * w]);
        }
        out
    }
}

/// Record the tuned-lens logits for translated state `z` with all model
/// weights held constant.
pub fn record_lens_head<T: Scalar>(
    tape: &mut Tape<T>,
    model: &TransformerModel<T>,
    z: Var,
    include_final_block: bool,
    layout: SeqLayout,
) -> Result<Var> {
    let mut z = z;
    if include_final_block {
        if let Layer::Block(b) = &model.layers[model.n_layers() - 1] {
            let p = b.tensors().map(|t| tape.constant(t.clone()));
            z = record_block(tape, &p, z, layout, model.config.n_heads, model.eps())?.1;
        }
    }
    let g = tape.constant(model.ln_f_gamma.clone());
    let beta = tape.constant(model.ln_f_beta.clone());
    let u = tape.constant(model.unembed.clone());
    let n = tape.layer_norm(z, g, beta, model.eps());
    Ok(tape.matmul(n, u))
}

/// Train one translator per layer by distillation: minimize
/// `KL(final || tuned)` with the model frozen.
pub fn train_translators<T: Scalar>(
    model: &TransformerModel<T>,
    stream: &[usize],
    cfg: &LensTrainConfig,
) -> Result<(TunedLens<T>, LensTrainLog)> {
    if stream.len() < 2 {
        return Err(Error::Empty("lens training stream"));
    }
    if cfg.steps == 0 || cfg.batch_tokens == 0 || cfg.seq_len == 0 {
        return Err(Error::InvalidArgument("steps, batch_tokens and seq_len must be positive".into()));
    }
    let pool = StatePool::build(model, stream, cfg.seq_len)?;
    let n_layers = model.n_layers();
    let d = model.d_model();
    let mut lens = TunedLens::identity(&model.config, cfg.include_final_block);
    let mut opts: Vec<Sgd<T>> = (0..n_layers).map(|_| Sgd::new(2, cfg.momentum, true)).collect();
    let eye = Tensor::<T>::eye(d);
    let per_step = (cfg.batch_tokens / pool.seq).max(1);
    let layout = SeqLayout {
        batch: per_step,
        seq: pool.seq,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = LensTrainLog::default();
    let wd = T::of(cfg.weight_decay);
    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..per_step).map(|_| rng.random_range(0..pool.n_seqs)).collect();
        let target = StatePool::gather(&pool.target_log_probs, &picks, pool.seq);
        let lr = linear_lr(cfg.base_lr(), step, cfg.steps);
        let mut step_losses = Vec::with_capacity(n_layers);
        for (l, (tr, opt)) in lens.translators.iter_mut().zip(opts.iter_mut()).enumerate() {
            let h = StatePool::gather(&pool.hidden[l], &picks, pool.seq);
            let mut tape = Tape::new();
            let hv = tape.constant(h);
            let a = tape.leaf(tr.a.clone(), cfg.train_matrix);
            let b = tape.leaf(tr.b.clone(), true);
            let z = tape.matmul_t(hv, a);
            let z = tape.add_row(z, b);
            let logits = record_lens_head(&mut tape, model, z, cfg.include_final_block, layout)?;
            let loss = tape.kl_from_target(logits, target.clone())?;
            let value = tape.scalar(loss).as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged(format!("layer {l} loss {value} at step {step}")));
            }
            step_losses.push(value);
            let mut grads = tape.gradient(loss, &[a, b])?;
            drop(tape);
            if !cfg.train_matrix {
                grads[0] = Tensor::zeros(&[d, d]);
            }
            clip_grad_norm(&mut grads, cfg.clip);
            if cfg.train_matrix {
                let offset = tr.a.sub(&eye)?;
                grads[0].axpy(wd, &offset);
            }
            grads[1].axpy(wd, &tr.b);
            opt.step(&mut [&mut tr.a, &mut tr.b], &grads, lr);
        }
        log.losses.push(step_losses);
    }
    Ok((lens, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lens::{Lens, LogitLens};
    use crate::model::ModelConfig;
    use crate::numerics::stats::{kl_from_log_probs, log_softmax};
    use crate::numerics::tape::{finite_difference, relative_error};

    fn toy() -> TransformerModel<f64> {
        let mut cfg = ModelConfig::tiny(2, 8, 2);
        cfg.vocab_size = 13;
        TransformerModel::init(cfg, 5).unwrap()
    }

    /// Distillation loss gradient against central differences at random
    /// translator values.
    #[test]
    fn translator_gradient_matches_finite_differences() {
        let m = toy();
        let ids = [1, 7, 3, 12, 5, 5];
        let layout = SeqLayout::single(6);
        let trace = m.forward_trace(&ids).unwrap();
        let mut target = Tensor::zeros(&[6, 13]);
        for r in 0..6 {
            log_softmax_row(trace.logits.row(r), target.row_mut(r));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for include_final_block in [false, true] {
            for _ in 0..10 {
                let a0 = Tensor::from_fn(&[8, 8], |i| {
                    (if i % 9 == 0 { 1.0 } else { 0.0 }) + rng.random_range(-0.3..0.3)
                });
                let b0 = Tensor::from_fn(&[8], |_| rng.random_range(-0.3..0.3));
                let loss_at = |a: &Tensor<f64>, b: &Tensor<f64>| {
                    let mut tape = Tape::new();
                    let h = tape.constant(trace.hidden[1].clone());
                    let av = tape.leaf(a.clone(), true);
                    let bv = tape.leaf(b.clone(), true);
                    let z = tape.matmul_t(h, av);
                    let z = tape.add_row(z, bv);
                    let logits = record_lens_head(&mut tape, &m, z, include_final_block, layout).unwrap();
                    let loss = tape.kl_from_target(logits, target.clone()).unwrap();
                    (tape, av, bv, loss)
                };
                let (tape, av, bv, loss) = loss_at(&a0, &b0);
                let g = tape.gradient(loss, &[av, bv]).unwrap();
                let fd_a = finite_difference(&a0, 1e-5, |a| {
                    let (t, _, _, l) = loss_at(a, &b0);
                    t.scalar(l)
                });
                let fd_b = finite_difference(&b0, 1e-5, |b| {
                    let (t, _, _, l) = loss_at(&a0, b);
                    t.scalar(l)
                });
                assert!(relative_error(&g[0], &fd_a, 1e-8) < 1e-4);
                assert!(relative_error(&g[1], &fd_b, 1e-8) < 1e-4);
            }
        }
    }

    #[test]
    fn first_step_loss_is_logit_lens_kl() {
        let m = toy().cast::<f32>();
        let stream: Vec<usize> = (0..96).map(|i| (i * 5 + i / 7) % 13).collect();
        let cfg = LensTrainConfig {
            steps: 1,
            batch_tokens: 96,
            seq_len: 16,
            ..Default::default()
        };
        let (_, log) = train_translators(&m, &stream, &cfg).unwrap();
        // one step samples 6 sequences with replacement; recompute with the same picks
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let picks: Vec<usize> = (0..6).map(|_| rng.random_range(0..6)).collect();
        for l in 0..2 {
            let mut total = 0.0;
            for &s in &picks {
                let ids = &stream[s * 16..(s + 1) * 16];
                let t = m.forward_trace(ids).unwrap();
                let z = LogitLens::Plain.logits(&m, l, &t.hidden[l], t.layout).unwrap();
                for r in 0..16 {
                    total += kl_from_log_probs(&log_softmax(t.logits.row(r)), &log_softmax(z.row(r)));
                }
            }
            let want = total / 96.0;
            assert!((log.losses[0][l] - want).abs() < 1e-4, "{} vs {want}", log.losses[0][l]);
        }
    }

    #[test]
    fn training_leaves_model_untouched_and_reduces_loss() {
        let m = toy().cast::<f32>();
        let before = m.clone();
        let stream: Vec<usize> = (0..512).map(|i| (i * i + 3 * i) % 13).collect();
        let cfg = LensTrainConfig {
            steps: 40,
            batch_tokens: 128,
            seq_len: 16,
            lr: Some(0.5),
            ..Default::default()
        };
        let (lens, log) = train_translators(&m, &stream, &cfg).unwrap();
        assert_eq!(m, before);
        assert!(lens.translators.iter().all(|t| t.is_finite()));
        for l in 0..2 {
            let first = log.losses[0][l];
            let last: f64 = log.losses[35..].iter().map(|s| s[l]).sum::<f64>() / 5.0;
            assert!(last < first, "layer {l}: {first} -> {last}");
        }
    }
}
