// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::kernels::{attention_forward, gelu, layer_norm_forward, SeqLayout};
use crate::numerics::{Scalar, Tensor};

/// Parameters of one residual block `F(h) = Attn(LN1(h)) + MLP(LN2(h + Attn(LN1(h))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub w_in: Tensor<T>,
    pub b_in: Tensor<T>,
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
}

/// Tensor names inside a block, in storage order.
pub const BLOCK_FIELDS: [&str; 16] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.w_q",
    "attn.b_q",
    "attn.w_k",
    "attn.b_k",
    "attn.w_v",
    "attn.b_v",
    "attn.w_o",
    "attn.b_o",
    "ln2.gamma",
    "ln2.beta",
    "mlp.w_in",
    "mlp.b_in",
    "mlp.w_out",
    "mlp.b_out",
];

impl<T: Scalar> Block<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        Self {
            ln1_gamma: Tensor::full(&[d], T::one()),
            ln1_beta: Tensor::zeros(&[d]),
            w_q: Tensor::zeros(&[d, d]),
            b_q: Tensor::zeros(&[d]),
            w_k: Tensor::zeros(&[d, d]),
            b_k: Tensor::zeros(&[d]),
            w_v: Tensor::zeros(&[d, d]),
            b_v: Tensor::zeros(&[d]),
            w_o: Tensor::zeros(&[d, d]),
            b_o: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::full(&[d], T::one()),
            ln2_beta: Tensor::zeros(&[d]),
            w_in: Tensor::zeros(&[d, f]),
            b_in: Tensor::zeros(&[f]),
            w_out: Tensor::zeros(&[f, d]),
            b_out: Tensor::zeros(&[d]),
        }
    }

    pub fn tensors(&self) -> [&Tensor<T>; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w_in,
            &self.b_in,
            &self.w_out,
            &self.b_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 16] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    /// Residual update `F(h)` for a `[batch*seq, d]` stack of states.
    pub fn residual(&self, h: &Tensor<T>, layout: SeqLayout, n_heads: usize, eps: T) -> Tensor<T> {
        let (a, _) = layer_norm_forward(h, self.ln1_gamma.data(), self.ln1_beta.data(), eps);
        let q = affine(&a, &self.w_q, &self.b_q);
        let k = affine(&a, &self.w_k, &self.b_k);
        let v = affine(&a, &self.w_v, &self.b_v);
        let (att, _) = attention_forward(&q, &k, &v, layout, n_heads);
        let o = affine(&att, &self.w_o, &self.b_o);
        let h1 = h.add(&o).expect("same shape");
        let (m, _) = layer_norm_forward(&h1, self.ln2_gamma.data(), self.ln2_beta.data(), eps);
        let u = affine(&m, &self.w_in, &self.b_in).map(gelu);
        let f = affine(&u, &self.w_out, &self.b_out);
        o.add(&f).expect("same shape")
    }
}

fn affine<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut y = x.matmul(w).expect("checked widths");
    y.add_row(b.data());
    y
}

/// A residual layer: a trained block, or the identity left by deletion.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Block(Arc<Block<T>>),
    Identity,
}

impl<T> Layer<T> {
    pub fn block(&self) -> Option<&Block<T>> {
        match self {
            Layer::Block(b) => Some(b),
            Layer::Identity => None,
        }
    }
}

/// Hidden states recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub layout: SeqLayout,
    /// `h_0 ..= h_L`, each `[batch*seq, d]`.
    pub hidden: Vec<Tensor<T>>,
    /// `F_0 .. F_{L-1}` evaluated on the matching hidden state.
    pub residuals: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn n_layers(&self) -> usize {
        self.residuals.len()
    }

    pub fn final_hidden(&self) -> &Tensor<T> {
        self.hidden.last().expect("at least the embedding state")
    }
}

/// Pre-LN decoder-only transformer with learned positional embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel<T> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<Layer<T>>,
    pub ln_f_gamma: Tensor<T>,
    pub ln_f_beta: Tensor<T>,
    /// `[d, V]`
    pub unembed: Tensor<T>,
}

impl<T: Scalar> TransformerModel<T> {
    /// All weights zero except LayerNorm gains; every block is then a zero
    /// residual and every logit vector is uniform.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, v) = (config.d_model, config.vocab_size);
        Ok(Self {
            tok_emb: Tensor::zeros(&[v, d]),
            pos_emb: Tensor::zeros(&[config.max_seq_len, d]),
            layers: (0..config.n_layers)
                .map(|_| Layer::Block(Arc::new(Block::zeros(&config))))
                .collect(),
            ln_f_gamma: Tensor::full(&[d], T::one()),
            ln_f_beta: Tensor::zeros(&[d]),
            unembed: Tensor::zeros(&[d, v]),
            config,
        })
    }

    /// GPT-2 style initialization: N(0, 0.02) weights, output projections
    /// scaled by `1/sqrt(2L)`, zero biases, unit LayerNorm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let proj_std = std / (2.0 * model.config.n_layers as f64).sqrt();
        let fill = |t: &mut Tensor<T>, s: f64, rng: &mut ChaCha8Rng| {
            let normal = Normal::new(0.0, s).expect("positive std");
            for x in t.data_mut() {
                *x = T::of(normal.sample(rng));
            }
        };
        fill(&mut model.tok_emb, std, &mut rng);
        fill(&mut model.pos_emb, std, &mut rng);
        for layer in model.layers.iter_mut() {
            let Layer::Block(b) = layer else { continue };
            let b = Arc::make_mut(b);
            fill(&mut b.w_q, std, &mut rng);
            fill(&mut b.w_k, std, &mut rng);
            fill(&mut b.w_v, std, &mut rng);
            fill(&mut b.w_o, proj_std, &mut rng);
            fill(&mut b.w_in, std, &mut rng);
            fill(&mut b.w_out, proj_std, &mut rng);
        }
        fill(&mut model.unembed, std, &mut rng);
        Ok(model)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn eps(&self) -> T {
        T::of(self.config.eps)
    }

    /// Named tensors in canonical order. Deleted layers contribute nothing.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(b) = layer.block() {
                for (name, t) in BLOCK_FIELDS.iter().zip(b.tensors()) {
                    out.push((format!("blocks.{i}.{name}"), t));
                }
            }
        }
        out.push(("ln_f.gamma".to_string(), &self.ln_f_gamma));
        out.push(("ln_f.beta".to_string(), &self.ln_f_beta));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    /// Mutable tensors in the order of [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in self.layers.iter_mut() {
            if let Layer::Block(b) = layer {
                out.extend(Arc::make_mut(b).tensors_mut());
            }
        }
        out.push(&mut self.ln_f_gamma);
        out.push(&mut self.ln_f_beta);
        out.push(&mut self.unembed);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> TransformerModel<U> {
        let cast_block = |b: &Block<T>| {
            let mut out = Block::<U>::zeros(&self.config);
            for (dst, src) in out.tensors_mut().into_iter().zip(b.tensors()) {
                *dst = src.cast();
            }
            out
        };
        TransformerModel {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Block(b) => Layer::Block(Arc::new(cast_block(b))),
                    Layer::Identity => Layer::Identity,
                })
                .collect(),
            ln_f_gamma: self.ln_f_gamma.cast(),
            ln_f_beta: self.ln_f_beta.cast(),
            unembed: self.unembed.cast(),
        }
    }

    fn check_tokens(&self, ids: &[usize], layout: SeqLayout) -> Result<()> {
        if ids.len() != layout.tokens() {
            return Err(Error::Shape(format!(
                "{} ids for a {}x{} layout",
                ids.len(),
                layout.batch,
                layout.seq
            )));
        }
        if layout.seq > self.config.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} exceeds max_seq_len {}",
                layout.seq, self.config.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::OutOfRange(format!("token id {bad}")));
        }
        Ok(())
    }

    /// `h_0`: token plus positional embedding, `[batch*seq, d]`.
    pub fn embed(&self, ids: &[usize], layout: SeqLayout) -> Result<Tensor<T>> {
        self.check_tokens(ids, layout)?;
        let d = self.d_model();
        let mut h = Tensor::zeros(&[ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            let pos = r % layout.seq;
            let out = h.row_mut(r);
            for ((o, &a), &b) in out.iter_mut().zip(self.tok_emb.row(id)).zip(self.pos_emb.row(pos)) {
                *o = a + b;
            }
        }
        Ok(h)
    }

    /// `F_layer(h)`; zero for a deleted layer.
    pub fn residual(&self, layer: usize, h: &Tensor<T>, layout: SeqLayout) -> Tensor<T> {
        match &self.layers[layer] {
            Layer::Block(b) => b.residual(h, layout, self.config.n_heads, self.eps()),
            Layer::Identity => Tensor::zeros(h.shape()),
        }
    }

    /// `h + F_layer(h)`.
    pub fn apply_layer(&self, layer: usize, h: &Tensor<T>, layout: SeqLayout) -> Tensor<T> {
        match &self.layers[layer] {
            Layer::Block(_) => h.add(&self.residual(layer, h, layout)).expect("same shape"),
            Layer::Identity => h.clone(),
        }
    }

    /// `LayerNorm_f(h) W_U`.
    pub fn unembed_hidden(&self, h: &Tensor<T>) -> Tensor<T> {
        let (n, _) = layer_norm_forward(h, self.ln_f_gamma.data(), self.ln_f_beta.data(), self.eps());
        n.matmul(&self.unembed).expect("checked widths")
    }

    pub fn forward_batch(&self, ids: &[usize], layout: SeqLayout) -> Result<ForwardTrace<T>> {
        let h0 = self.embed(ids, layout)?;
        let mut hidden = Vec::with_capacity(self.n_layers() + 1);
        let mut residuals = Vec::with_capacity(self.n_layers());
        hidden.push(h0);
        for l in 0..self.n_layers() {
            let h = hidden.last().expect("nonempty");
            let r = self.residual(l, h, layout);
            let next = h.add(&r).expect("same shape");
            residuals.push(r);
            hidden.push(next);
        }
        let logits = self.unembed_hidden(hidden.last().expect("nonempty"));
        Ok(ForwardTrace {
            layout,
            hidden,
            residuals,
            logits,
        })
    }

    /// Trace of a single sequence.
    pub fn forward_trace(&self, ids: &[usize]) -> Result<ForwardTrace<T>> {
        if ids.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        self.forward_batch(ids, SeqLayout::single(ids.len()))
    }

    /// Final logits only, without keeping intermediate states.
    pub fn logits(&self, ids: &[usize], layout: SeqLayout) -> Result<Tensor<T>> {
        let mut h = self.embed(ids, layout)?;
        for l in 0..self.n_layers() {
            h = self.apply_layer(l, &h, layout);
        }
        Ok(self.unembed_hidden(&h))
    }

    /// Hidden state after `layer` blocks for a batch, `h_layer`.
    pub fn hidden_at(&self, ids: &[usize], layout: SeqLayout, layer: usize) -> Result<Tensor<T>> {
        if layer > self.n_layers() {
            return Err(Error::OutOfRange(format!("layer {layer}")));
        }
        let mut h = self.embed(ids, layout)?;
        for l in 0..layer {
            h = self.apply_layer(l, &h, layout);
        }
        Ok(h)
    }

    /// Run the layers after `h_layer`, then the final LayerNorm and
    /// unembedding.
    pub fn run_suffix(&self, layer: usize, h: &Tensor<T>, layout: SeqLayout) -> Result<Tensor<T>> {
        if layer > self.n_layers() {
            return Err(Error::OutOfRange(format!(
                "layer {layer} of {}",
                self.n_layers()
            )));
        }
        if h.cols() != self.d_model() || h.rows() != layout.tokens() {
            return Err(Error::Shape(format!("hidden state {:?}", h.shape())));
        }
        let mut h = h.clone();
        for l in layer..self.n_layers() {
            h = self.apply_layer(l, &h, layout);
        }
        Ok(self.unembed_hidden(&h))
    }

    /// Copy of the model with block `layer` (1-based) replaced by the
    /// identity. Surviving blocks are shared, not copied.
    pub fn delete_layer(&self, layer: usize) -> Result<Self> {
        if layer == 0 || layer > self.n_layers() {
            return Err(Error::OutOfRange(format!(
                "layer {layer} not in 1..={}",
                self.n_layers()
            )));
        }
        let mut out = self.clone();
        out.layers[layer - 1] = Layer::Identity;
        Ok(out)
    }

    /// Mean next-token cross entropy in nats over consecutive windows of a
    /// token stream.
    pub fn mean_cross_entropy(&self, stream: &[usize], seq: usize) -> Result<f64> {
        let windows = super::windows(stream, seq);
        if windows.is_empty() {
            return Err(Error::Empty("evaluation stream"));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for w in windows {
            let layout = SeqLayout::single(w.len() - 1);
            let logits = self.logits(&w[..w.len() - 1], layout)?;
            for (r, &target) in w[1..].iter().enumerate() {
                let lp = crate::numerics::stats::log_softmax(logits.row(r));
                total -= lp[target];
                count += 1;
            }
        }
        Ok(total / count as f64)
    }
}
