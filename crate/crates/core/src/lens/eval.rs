// SPDX-License-Identifier: MIT OR Apache-2.0

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use super::{Lens, TunedLens};
use crate::error::{Error, Result};
use crate::model::{windows, TransformerModel};
use crate::numerics::kernels::SeqLayout;
use crate::numerics::stats::{kl_bits, kl_from_log_probs, log_softmax, perplexity};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    /// Mean next-token cross entropy in nats.
    pub cross_entropy: f64,
    pub perplexity: f64,
    /// Mean `KL(final || lens)` in bits.
    pub kl_bits: f64,
    /// KL between the dataset-averaged final and lens distributions, bits.
    pub bias_bits: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensReport {
    pub lens: String,
    pub n_tokens: usize,
    pub layers: Vec<LayerStats>,
}

impl LensReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "perplexity", "kl_bits", "bias_bits"])?;
        for s in &self.layers {
            w.write_record([
                s.layer.to_string(),
                format!("{:.9}", s.perplexity),
                format!("{:.9}", s.kl_bits),
                format!("{:.9}", s.bias_bits),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Lens log-probabilities (`f64`) at every layer `0..=L` for one batch,
/// indexed `[layer][row]`.
pub fn layer_distributions<T: Scalar>(
    lens: &dyn Lens<T>,
    model: &TransformerModel<T>,
    ids: &[usize],
    layout: SeqLayout,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let trace = model.forward_batch(ids, layout)?;
    (0..=model.n_layers())
        .map(|l| {
            let z = lens.logits(model, l, &trace.hidden[l], layout)?;
            Ok((0..z.rows()).map(|r| log_softmax(z.row(r))).collect())
        })
        .collect()
}

struct Accumulator {
    ce: Vec<f64>,
    kl: Vec<f64>,
    q_sum: Vec<Vec<f64>>,
    p_sum: Vec<f64>,
    n: usize,
}

fn accumulate<T: Scalar>(
    lens: &dyn Lens<T>,
    model: &TransformerModel<T>,
    stream: &[usize],
    seq: usize,
    layers: &[usize],
) -> Result<Accumulator> {
    let wins = windows(stream, seq);
    if wins.is_empty() {
        return Err(Error::Empty("evaluation stream"));
    }
    let v = model.vocab_size();
    let mut acc = Accumulator {
        ce: vec![0.0; layers.len()],
        kl: vec![0.0; layers.len()],
        q_sum: vec![vec![0.0; v]; layers.len()],
        p_sum: vec![0.0; v],
        n: 0,
    };
    for w in wins {
        let (inputs, targets) = (&w[..w.len() - 1], &w[1..]);
        let layout = SeqLayout::single(inputs.len());
        let trace = model.forward_batch(inputs, layout)?;
        let finals: Vec<Vec<f64>> = (0..inputs.len()).map(|r| log_softmax(trace.logits.row(r))).collect();
        for lp in &finals {
            for (s, &x) in acc.p_sum.iter_mut().zip(lp) {
                *s += x.exp();
            }
        }
        for (i, &l) in layers.iter().enumerate() {
            let z = lens.logits(model, l, &trace.hidden[l], layout)?;
            for (r, &t) in targets.iter().enumerate() {
                let lq = log_softmax(z.row(r));
                acc.ce[i] -= lq[t];
                acc.kl[i] += kl_from_log_probs(&finals[r], &lq);
                for (s, &x) in acc.q_sum[i].iter_mut().zip(&lq) {
                    *s += x.exp();
                }
            }
        }
        acc.n += inputs.len();
    }
    Ok(acc)
}

/// `KL(mean p || mean q)` in bits, averaging token-level distributions
/// with equal weight per token.
pub fn marginal_bias_from_probs(p_rows: &[Vec<f64>], q_rows: &[Vec<f64>]) -> Result<f64> {
    if p_rows.is_empty() || p_rows.len() != q_rows.len() {
        return Err(Error::Empty("marginal distributions"));
    }
    let v = p_rows[0].len();
    let mean = |rows: &[Vec<f64>]| {
        let mut m = vec![0.0; v];
        for r in rows {
            for (s, &x) in m.iter_mut().zip(r) {
                *s += x;
            }
        }
        let n = rows.len() as f64;
        m.iter_mut().for_each(|x| *x /= n);
        m
    };
    kl_bits(&mean(p_rows), &mean(q_rows))
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

/// Per-layer cross entropy, KL to the final distribution and marginal bias.
pub fn eval_per_layer<T: Scalar>(
    lens: &dyn Lens<T>,
    model: &TransformerModel<T>,
    stream: &[usize],
    seq: usize,
) -> Result<LensReport> {
    let layers: Vec<usize> = (0..=model.n_layers()).collect();
    let acc = accumulate(lens, model, stream, seq, &layers)?;
    let n = acc.n as f64;
    let p_bar = normalized(&acc.p_sum);
    let stats = layers
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let ce = acc.ce[i] / n;
            Ok(LayerStats {
                layer: l,
                cross_entropy: ce,
                perplexity: perplexity(ce),
                kl_bits: acc.kl[i] / n / LN_2,
                bias_bits: kl_bits(&p_bar, &normalized(&acc.q_sum[i]))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LensReport {
        lens: lens.name(),
        n_tokens: acc.n,
        layers: stats,
    })
}

/// Marginal bias of one layer, in bits.
pub fn marginal_bias<T: Scalar>(
    lens: &dyn Lens<T>,
    model: &TransformerModel<T>,
    stream: &[usize],
    seq: usize,
    layer: usize,
) -> Result<f64> {
    if layer > model.n_layers() {
        return Err(Error::OutOfRange(format!("layer {layer}")));
    }
    let acc = accumulate(lens, model, stream, seq, &[layer])?;
    kl_bits(&normalized(&acc.p_sum), &normalized(&acc.q_sum[0]))
}

/// Entry `[l][m]`: cross entropy of translator `l` applied to `h_m`, minus
/// that of translator `m` on `h_m`, in nats.
pub fn transfer_penalty_matrix<T: Scalar>(
    lens: &TunedLens<T>,
    model: &TransformerModel<T>,
    stream: &[usize],
    seq: usize,
) -> Result<Vec<Vec<f64>>> {
    lens.check_model(model)?;
    let wins = windows(stream, seq);
    if wins.is_empty() {
        return Err(Error::Empty("evaluation stream"));
    }
    let l_count = model.n_layers();
    let mut ce = vec![vec![0.0; l_count]; l_count];
    let mut n = 0usize;
    for w in wins {
        let (inputs, targets) = (&w[..w.len() - 1], &w[1..]);
        let layout = SeqLayout::single(inputs.len());
        let trace = model.forward_batch(inputs, layout)?;
        for (probe, row) in ce.iter_mut().enumerate() {
            for (layer, cell) in row.iter_mut().enumerate() {
                let z = lens.logits_using(model, probe, &trace.hidden[layer], layout)?;
                for (r, &t) in targets.iter().enumerate() {
                    *cell -= log_softmax(z.row(r))[t];
                }
            }
        }
        n += inputs.len();
    }
    let n = n as f64;
    Ok((0..l_count)
        .map(|p| (0..l_count).map(|l| ce[p][l] / n - ce[l][l] / n).collect())
        .collect())
}

impl<T: Scalar> TunedLens<T> {
    /// Decode `h` with translator `translator`, whatever layer `h` came from.
    pub fn logits_using(
        &self,
        model: &TransformerModel<T>,
        translator: usize,
        h: &Tensor<T>,
        layout: SeqLayout,
    ) -> Result<Tensor<T>> {
        self.check_model(model)?;
        let t = self
            .translators
            .get(translator)
            .ok_or_else(|| Error::OutOfRange(format!("translator {translator}")))?;
        let mut z = t.apply(h)?;
        if self.include_final_block {
            z = model.apply_layer(model.n_layers() - 1, &z, layout);
        }
        Ok(model.unembed_hidden(&z))
    }
}

/// Covariance `[d, d]` of the hidden states at `layer` over every token.
pub fn covariance<T: Scalar>(
    model: &TransformerModel<T>,
    stream: &[usize],
    seq: usize,
    layer: usize,
) -> Result<Tensor<f64>> {
    if layer > model.n_layers() {
        return Err(Error::OutOfRange(format!("layer {layer}")));
    }
    let d = model.d_model();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for w in windows(stream, seq) {
        let inputs = &w[..w.len() - 1];
        let h = model.hidden_at(inputs, SeqLayout::single(inputs.len()), layer)?;
        rows.extend((0..h.rows()).map(|r| h.row(r).iter().map(|x| x.as_f64()).collect::<Vec<_>>()));
    }
    if rows.len() < 2 {
        return Err(Error::Empty("need at least two hidden states"));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in &rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n;
        }
    }
    let mut cov = Tensor::zeros(&[d, d]);
    for r in &rows {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            let out = cov.row_mut(i);
            for j in 0..d {
                out[j] += c[i] * c[j];
            }
        }
    }
    Ok(cov.scale(1.0 / (n - 1.0)))
}

/// `<A, B>_F / (|A|_F |B|_F)`.
pub fn frobenius_cosine(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Undefined("zero covariance".into()));
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Frobenius cosine between hidden-state covariances of two layers, after
/// dropping the `drop_outlier_dims` coordinates with the largest combined
/// variance.
pub fn covariance_similarity<T: Scalar>(
    model: &TransformerModel<T>,
    stream: &[usize],
    seq: usize,
    layer_a: usize,
    layer_b: usize,
    drop_outlier_dims: usize,
) -> Result<f64> {
    let ca = covariance(model, stream, seq, layer_a)?;
    let cb = covariance(model, stream, seq, layer_b)?;
    let d = ca.rows();
    if drop_outlier_dims >= d {
        return Err(Error::InvalidArgument("cannot drop every coordinate".into()));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| (cb.at(j, j) + ca.at(j, j)).total_cmp(&(ca.at(i, i) + cb.at(i, i))));
    let mut keep: Vec<usize> = order[drop_outlier_dims..].to_vec();
    keep.sort_unstable();
    let sub = |c: &Tensor<f64>| Tensor::from_fn(&[keep.len(), keep.len()], |k| c.at(keep[k / keep.len()], keep[k % keep.len()]));
    frobenius_cosine(&sub(&ca), &sub(&cb))
}

/// Evaluate a lens trained on one model against another model of the same
/// configuration, e.g. a different checkpoint of the same run.
pub fn transfer_lens<T: Scalar>(
    lens: &TunedLens<T>,
    target: &TransformerModel<T>,
    stream: &[usize],
    seq: usize,
) -> Result<LensReport> {
    if lens.config != target.config {
        return Err(Error::InvalidArgument("lens and target model configurations differ".into()));
    }
    eval_per_layer(lens, target, stream, seq)
}

/// Top-1 token and its probability under a lens, `[layer][position]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionGrid {
    pub tokens: Vec<Vec<usize>>,
    pub probs: Vec<Vec<f64>>,
}

impl PredictionGrid {
    pub fn n_layers(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_positions(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    /// Top-1 tokens of one position across layers `0..=L`.
    pub fn column(&self, position: usize) -> Vec<usize> {
        self.tokens.iter().map(|row| row[position]).collect()
    }
}

/// Lens predictions at every layer and position of one sequence. Ties go
/// to the lowest token id.
pub fn prediction_grid<T: Scalar>(lens: &dyn Lens<T>, model: &TransformerModel<T>, ids: &[usize]) -> Result<PredictionGrid> {
    if ids.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    let layout = SeqLayout::single(ids.len());
    let trace = model.forward_batch(ids, layout)?;
    let mut tokens = Vec::with_capacity(trace.hidden.len());
    let mut probs = Vec::with_capacity(trace.hidden.len());
    for (l, h) in trace.hidden.iter().enumerate() {
        let z = lens.logits(model, l, h, layout)?;
        let (mut tr, mut pr) = (Vec::with_capacity(ids.len()), Vec::with_capacity(ids.len()));
        for r in 0..z.rows() {
            let lp = log_softmax(z.row(r));
            let top = crate::numerics::stats::argmax(&lp);
            tr.push(top);
            pr.push(lp[top].exp());
        }
        tokens.push(tr);
        probs.push(pr);
    }
    Ok(PredictionGrid { tokens, probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lens::LogitLens;
    use crate::model::ModelConfig;
    use crate::numerics::stats::{kl_bits, softmax};

    fn model() -> TransformerModel<f32> {
        TransformerModel::init(ModelConfig::tiny(2, 16, 2), 8).unwrap()
    }

    fn stream() -> Vec<usize> {
        (0..200).map(|i| (i * 31 + 7) % 97).collect()
    }

    #[test]
    fn identity_lens_final_layer_is_exact() {
        let m = model();
        let lens = TunedLens::identity(&m.config, false);
        let r = eval_per_layer(&lens, &m, &stream(), 32).unwrap();
        let last = r.layers.last().unwrap();
        assert_eq!(last.kl_bits, 0.0);
        assert!(last.bias_bits < 1e-9);
        let own = m.mean_cross_entropy(&stream(), 32).unwrap();
        assert_eq!(last.cross_entropy, own);
        assert_eq!(r.layers.len(), 3);
        let plain = eval_per_layer(&LogitLens::Plain, &m, &stream(), 32).unwrap();
        assert_eq!(plain.layers, r.layers);
    }

    #[test]
    fn uniform_model_has_vocab_perplexity() {
        let m = TransformerModel::<f32>::zeros(ModelConfig::tiny(2, 8, 2)).unwrap();
        let r = eval_per_layer(&LogitLens::Plain, &m, &stream(), 16).unwrap();
        for s in &r.layers {
            assert!((s.perplexity - 257.0).abs() < 1e-6);
        }
    }

    #[test]
    fn marginal_bias_hand_example() {
        // two positions: p = [.5,.5], [1,0] -> mean [.75,.25]
        //               q = [.25,.75], [.25,.75] -> mean [.25,.75]
        let p = vec![vec![0.5, 0.5], vec![1.0, 0.0]];
        let q = vec![vec![0.25, 0.75], vec![0.25, 0.75]];
        let want = 0.75 * (0.75f64 / 0.25).log2() + 0.25 * (0.25f64 / 0.75).log2();
        assert!((marginal_bias_from_probs(&p, &q).unwrap() - want).abs() < 1e-12);
        assert_eq!(marginal_bias_from_probs(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn marginal_bias_matches_report() {
        let m = model();
        let r = eval_per_layer(&LogitLens::Plain, &m, &stream(), 32).unwrap();
        let b = marginal_bias(&LogitLens::Plain, &m, &stream(), 32, 1).unwrap();
        assert!((b - r.layers[1].bias_bits).abs() < 1e-12);
    }

    #[test]
    fn transfer_matrix_against_brute_force() {
        let m = model();
        let mut lens = TunedLens::identity(&m.config, false);
        lens.translators[0].a = lens.translators[0].a.scale(0.8);
        lens.translators[1].b = Tensor::full(&[16], 0.1);
        let s = stream();
        let mat = transfer_penalty_matrix(&lens, &m, &s, 32).unwrap();
        let ce = |probe: usize, layer: usize| {
            let mut total = 0.0;
            let mut n = 0;
            for w in windows(&s, 32) {
                let t = m.forward_trace(&w[..w.len() - 1]).unwrap();
                let z = lens.logits_using(&m, probe, &t.hidden[layer], t.layout).unwrap();
                for (r, &tok) in w[1..].iter().enumerate() {
                    let q = softmax(z.row(r)).unwrap();
                    total -= q.probs()[tok].ln();
                    n += 1;
                }
            }
            total / n as f64
        };
        for p in 0..2 {
            assert_eq!(mat[p][p], 0.0);
            for l in 0..2 {
                assert!((mat[p][l] - (ce(p, l) - ce(l, l))).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn frobenius_cosine_examples() {
        let a = Tensor::from_vec(&[2, 2], vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        assert!((frobenius_cosine(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((frobenius_cosine(&a, &a.scale(-1.0)).unwrap() + 1.0).abs() < 1e-15);
        let b = Tensor::from_vec(&[2, 2], vec![1.0, -0.25, -0.25, 3.0]).unwrap();
        let want = (2.0 - 0.125 - 0.125 + 3.0) / ((4.0f64 + 0.25 + 0.25 + 1.0).sqrt() * (1.0f64 + 0.0625 + 0.0625 + 9.0).sqrt());
        assert!((frobenius_cosine(&a, &b).unwrap() - want).abs() < 1e-15);
        assert!(frobenius_cosine(&a, &Tensor::zeros(&[2, 2])).is_err());
        let m = model();
        assert!((covariance_similarity(&m, &stream(), 32, 1, 1, 0).unwrap() - 1.0).abs() < 1e-12);
        assert!(covariance_similarity(&m, &stream(), 32, 0, 2, 4).unwrap().abs() <= 1.0);
    }

    #[test]
    fn transfer_requires_matching_config() {
        let m = model();
        let lens = TunedLens::<f32>::identity(&m.config, false);
        let same = transfer_lens(&lens, &m, &stream(), 32).unwrap();
        assert_eq!(same, eval_per_layer(&lens, &m, &stream(), 32).unwrap());
        let other = TransformerModel::<f32>::init(ModelConfig::tiny(3, 16, 2), 1).unwrap();
        assert!(transfer_lens(&lens, &other, &stream(), 32).is_err());
        let _ = kl_bits(&[1.0], &[1.0]);
    }

    #[test]
    fn grid_rows_are_per_layer_argmax() {
        let m = model();
        let ids = &stream()[..9];
        let grid = prediction_grid(&LogitLens::Plain, &m, ids).unwrap();
        assert_eq!((grid.n_layers(), grid.n_positions()), (3, 9));
        let trace = m.forward_batch(ids, SeqLayout::single(9)).unwrap();
        for pos in 0..9 {
            let p = softmax(trace.logits.row(pos)).unwrap().into_vec();
            let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
            assert_eq!(grid.tokens[2][pos], best);
            assert!((grid.probs[2][pos] - p[best]).abs() < 1e-6);
        }
        let col = grid.column(4);
        assert_eq!(col.len(), 3);
        assert!(prediction_grid(&LogitLens::Plain, &m, &[]).is_err());
    }
}
