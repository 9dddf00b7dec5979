// SPDX-License-Identifier: MIT OR Apache-2.0

//! The transformer forward pass recorded on a gradient tape. Operation
//! order matches the plain forward pass, so recorded values agree with it
//! exactly.

use super::transformer::{Layer, TransformerModel};
use crate::error::Result;
use crate::numerics::kernels::SeqLayout;
use crate::numerics::{Scalar, Tape, Var};

/// Tape handles for every model tensor.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<Option<[Var; 16]>>,
    pub ln_f_gamma: Var,
    pub ln_f_beta: Var,
    pub unembed: Var,
}

impl ModelVars {
    /// Place the model's tensors on `tape` as leaves.
    pub fn register<T: Scalar>(tape: &mut Tape<T>, model: &TransformerModel<T>, trainable: bool) -> Self {
        let tok_emb = tape.leaf(model.tok_emb.clone(), trainable);
        let pos_emb = tape.leaf(model.pos_emb.clone(), trainable);
        let blocks = model
            .layers
            .iter()
            .map(|l| match l {
                Layer::Block(b) => Some(b.tensors().map(|t| tape.leaf(t.clone(), trainable))),
                Layer::Identity => None,
            })
            .collect();
        Self {
            tok_emb,
            pos_emb,
            blocks,
            ln_f_gamma: tape.leaf(model.ln_f_gamma.clone(), trainable),
            ln_f_beta: tape.leaf(model.ln_f_beta.clone(), trainable),
            unembed: tape.leaf(model.unembed.clone(), trainable),
        }
    }

    /// Handles in the order of [`TransformerModel::tensors_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for b in self.blocks.iter().flatten() {
            out.extend_from_slice(b);
        }
        out.extend([self.ln_f_gamma, self.ln_f_beta, self.unembed]);
        out
    }
}

/// Handles to the recorded hidden states and logits.
#[derive(Clone, Debug)]
pub struct GraphTrace {
    pub hidden: Vec<Var>,
    pub residuals: Vec<Var>,
    pub logits: Var,
}

fn affine<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

/// Record `F(h)` for one block; returns `(F(h), h + F(h))`.
pub fn record_block<T: Scalar>(
    tape: &mut Tape<T>,
    p: &[Var; 16],
    h: Var,
    layout: SeqLayout,
    n_heads: usize,
    eps: T,
) -> Result<(Var, Var)> {
    let [ln1_g, ln1_b, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o, ln2_g, ln2_b, w_in, b_in, w_out, b_out] =
        *p;
    let a = tape.layer_norm(h, ln1_g, ln1_b, eps);
    let q = affine(tape, a, w_q, b_q);
    let k = affine(tape, a, w_k, b_k);
    let v = affine(tape, a, w_v, b_v);
    let att = tape.attention(q, k, v, layout, n_heads)?;
    let o = affine(tape, att, w_o, b_o);
    let h1 = tape.add(h, o);
    let m = tape.layer_norm(h1, ln2_g, ln2_b, eps);
    let u = affine(tape, m, w_in, b_in);
    let u = tape.gelu(u);
    let f = affine(tape, u, w_out, b_out);
    let r = tape.add(o, f);
    let next = tape.add(h, r);
    Ok((r, next))
}

/// Record `LayerNorm_f(h) W_U`.
pub fn record_unembed<T: Scalar>(tape: &mut Tape<T>, vars: &ModelVars, h: Var, eps: T) -> Var {
    let n = tape.layer_norm(h, vars.ln_f_gamma, vars.ln_f_beta, eps);
    tape.matmul(n, vars.unembed)
}

/// Record the embedding and every layer from token ids.
pub fn record_forward<T: Scalar>(
    tape: &mut Tape<T>,
    model: &TransformerModel<T>,
    vars: &ModelVars,
    ids: &[usize],
    layout: SeqLayout,
) -> Result<GraphTrace> {
    // validates ids and layout
    model.embed(ids, layout)?;
    let tok = tape.gather(vars.tok_emb, ids.to_vec())?;
    let positions = (0..ids.len()).map(|r| r % layout.seq).collect();
    let pos = tape.gather(vars.pos_emb, positions)?;
    let h0 = tape.add(tok, pos);
    record_from(tape, model, vars, 0, h0, layout)
}

/// Record layers `start..L` applied to a hidden state already on the tape.
pub fn record_from<T: Scalar>(
    tape: &mut Tape<T>,
    model: &TransformerModel<T>,
    vars: &ModelVars,
    start: usize,
    h: Var,
    layout: SeqLayout,
) -> Result<GraphTrace> {
    let mut hidden = vec![h];
    let mut residuals = Vec::new();
    let eps = model.eps();
    for block in vars.blocks.iter().skip(start) {
        let h = *hidden.last().expect("nonempty");
        match block {
            Some(p) => {
                let (r, next) = record_block(tape, p, h, layout, model.config.n_heads, eps)?;
                residuals.push(r);
                hidden.push(next);
            }
            None => {
                let zero = tape.scale(h, T::zero());
                residuals.push(zero);
                hidden.push(h);
            }
        }
    }
    let logits = record_unembed(tape, vars, *hidden.last().expect("nonempty"), eps);
    Ok(GraphTrace {
        hidden,
        residuals,
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::tape::{finite_difference, relative_error};
    use crate::numerics::Tensor;

    #[test]
    fn recorded_forward_matches_plain_forward() {
        let m = TransformerModel::<f32>::init(ModelConfig::tiny(2, 16, 4), 1).unwrap();
        let ids = [10, 20, 30, 40, 50, 60];
        let layout = SeqLayout { batch: 2, seq: 3 };
        let plain = m.forward_batch(&ids, layout).unwrap();
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, &m, false);
        let g = record_forward(&mut tape, &m, &vars, &ids, layout).unwrap();
        for (a, b) in g.hidden.iter().zip(&plain.hidden) {
            assert_eq!(tape.value(*a), b);
        }
        assert_eq!(tape.value(g.logits), &plain.logits);
    }

    /// Cross-entropy gradient with respect to a sample of model weights on a
    /// width-8 toy, against central differences.
    #[test]
    fn model_backward_matches_finite_differences() {
        let mut cfg = ModelConfig::tiny(2, 8, 2);
        cfg.d_ff = 16;
        cfg.vocab_size = 11;
        let m = TransformerModel::<f64>::init(cfg, 9).unwrap();
        let ids = [1, 4, 2, 9, 3, 3];
        let targets = vec![Some(4), Some(2), Some(9), Some(3), Some(3), None];
        let layout = SeqLayout::single(6);
        let loss_of = |model: &TransformerModel<f64>| {
            let mut tape = Tape::new();
            let vars = ModelVars::register(&mut tape, model, true);
            let g = record_forward(&mut tape, model, &vars, &ids, layout).unwrap();
            let loss = tape.cross_entropy(g.logits, targets.clone()).unwrap();
            (tape, vars, loss)
        };
        let (tape, vars, loss) = loss_of(&m);
        let grads = tape.backward(loss).unwrap();
        let all = vars.all();
        for (idx, (name, t)) in m.named_tensors().into_iter().enumerate() {
            let analytic = grads.wrt(all[idx]);
            let base = t.clone();
            let fd = finite_difference(&base, 1e-5, |probe: &Tensor<f64>| {
                let mut mm = m.clone();
                *mm.tensors_mut()[idx] = probe.clone();
                let (tape, _, loss) = loss_of(&mm);
                tape.scalar(loss)
            });
            let err = relative_error(&analytic, &fd, 1e-6);
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }
}
