// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual updates against the loss gradient, a random-direction
//! reference for the resulting cosines, and per-layer deletion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::graph::{record_from, record_unembed, ModelVars};
use crate::model::{windows, TransformerModel};
use crate::numerics::kernels::SeqLayout;
use crate::numerics::stats::{cosine, percentile, perplexity};
use crate::numerics::{Scalar, Tape, Tensor};

/// Cosine between a layer's residual update and the loss gradient at its
/// input, both flattened over the whole window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSample {
    pub layer: usize,
    pub window: usize,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub layer: usize,
    pub p5: f64,
    pub p50: f64,
    pub p95: f64,
    pub frac_negative: f64,
    pub n: usize,
}

/// Residual updates `F_l(h_l)` and gradients of the summed next-token loss
/// with respect to `h_l`, for `l` in `0..L`.
pub fn residual_gradients<T: Scalar>(
    model: &TransformerModel<T>,
    window: &[usize],
) -> Result<(Vec<Tensor<f64>>, Vec<Tensor<f64>>)> {
    if window.len() < 2 {
        return Err(Error::Empty("window needs an input and a target"));
    }
    let ids = &window[..window.len() - 1];
    let layout = SeqLayout::single(ids.len());
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, model, false);
    let h0 = tape.leaf(model.embed(ids, layout)?, true);
    let trace = record_from(&mut tape, model, &vars, 0, h0, layout)?;
    let logits = record_unembed(&mut tape, &vars, *trace.hidden.last().expect("nonempty"), model.eps());
    let targets = window[1..].iter().map(|&t| Some(t)).collect();
    let mean = tape.cross_entropy(logits, targets)?;
    let total = tape.scale(mean, T::of(ids.len() as f64));
    let grads = tape.backward(total)?;
    let residuals = trace.residuals.iter().map(|&r| tape.value(r).cast()).collect();
    let gradients = trace.hidden[..model.n_layers()].iter().map(|&h| grads.wrt(h).cast()).collect();
    Ok((residuals, gradients))
}

/// One sample per (window, layer). Identity layers have no residual and
/// contribute nothing.
pub fn alignment_samples<T: Scalar>(
    model: &TransformerModel<T>,
    stream: &[usize],
    seq: usize,
) -> Result<Vec<AlignmentSample>> {
    let ws = windows(stream, seq);
    if ws.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut out = Vec::new();
    for (window, w) in ws.into_iter().enumerate() {
        let (residuals, gradients) = residual_gradients(model, w)?;
        for (layer, (r, g)) in residuals.iter().zip(&gradients).enumerate() {
            match cosine(r.data(), g.data()) {
                Ok(cosine) => out.push(AlignmentSample { layer, window, cosine }),
                Err(Error::Undefined(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

/// Percentiles per layer, in layer order; layers without samples are absent.
pub fn summarize_alignment(samples: &[AlignmentSample]) -> Result<Vec<AlignmentSummary>> {
    let Some(top) = samples.iter().map(|s| s.layer).max() else {
        return Err(Error::Empty("alignment samples"));
    };
    let mut out = Vec::new();
    for layer in 0..=top {
        let c: Vec<f64> = samples.iter().filter(|s| s.layer == layer).map(|s| s.cosine).collect();
        if c.is_empty() {
            continue;
        }
        out.push(AlignmentSummary {
            layer,
            p5: percentile(&c, 5.0)?,
            p50: percentile(&c, 50.0)?,
            p95: percentile(&c, 95.0)?,
            frac_negative: c.iter().filter(|&&x| x < 0.0).count() as f64 / c.len() as f64,
            n: c.len(),
        });
    }
    Ok(out)
}

pub fn grad_residual_alignment<T: Scalar>(
    model: &TransformerModel<T>,
    stream: &[usize],
    seq: usize,
) -> Result<Vec<AlignmentSummary>> {
    summarize_alignment(&alignment_samples(model, stream, seq)?)
}

pub fn alignment_csv(rows: &[AlignmentSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "p5", "p50", "p95", "frac_negative"])?;
    for r in rows {
        w.write_record([
            r.layer.to_string(),
            format!("{:.9}", r.p5),
            format!("{:.9}", r.p50),
            format!("{:.9}", r.p95),
            format!("{:.9}", r.frac_negative),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Columns generated per pass when building the Gram matrix.
const COSINE_CHUNK: usize = 4096;

/// All pairwise cosines of `n` standard Gaussian vectors in `dim`
/// dimensions. Vector `i` draws from its own stream of a generator seeded
/// with `seed`, so no `n x dim` matrix is ever held.
pub fn random_pairwise_cosines(dim: usize, n: usize, seed: u64) -> Result<Vec<f64>> {
    if dim < 2 {
        return Err(Error::InvalidArgument(format!("dimension {dim} < 2")));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!("{n} vectors, need at least two")));
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    let mut gram = vec![0.0f64; n * n];
    let mut start = 0;
    while start < dim {
        let width = COSINE_CHUNK.min(dim - start);
        let mut block = Tensor::<f32>::zeros(&[n, width]);
        for (i, rng) in rngs.iter_mut().enumerate() {
            for x in block.row_mut(i) {
                *x = StandardNormal.sample(rng);
            }
        }
        let partial = block.matmul_t(&block)?;
        for (g, &p) in gram.iter_mut().zip(partial.data()) {
            *g += p as f64;
        }
        start += width;
    }
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let c = gram[i * n + j] / (gram[i * n + i] * gram[j * n + j]).sqrt();
            out.push(c.clamp(-1.0, 1.0));
        }
    }
    Ok(out)
}

/// Percentile (0..=100) of the pairwise cosines of random Gaussian vectors.
pub fn random_cosine_baseline(dim: usize, n: usize, pct: f64, seed: u64) -> Result<f64> {
    percentile(&random_pairwise_cosines(dim, n, seed)?, pct)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeletionReport {
    pub baseline: f64,
    /// Entry `l - 1` deletes block `l`.
    pub deleted: Vec<f64>,
}

impl DeletionReport {
    /// Baseline first, then one perplexity per deleted block.
    pub fn entries(&self) -> Vec<f64> {
        std::iter::once(self.baseline).chain(self.deleted.iter().copied()).collect()
    }

    /// The intact row is labeled `none`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "perplexity_deleted", "perplexity_baseline"])?;
        let base = format!("{:.9}", self.baseline);
        w.write_record(["none".to_string(), base.clone(), base.clone()])?;
        for (i, p) in self.deleted.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format!("{p:.9}"), base.clone()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Perplexity with each block replaced by the identity in turn.
pub fn layer_deletion_sweep<T: Scalar>(model: &TransformerModel<T>, stream: &[usize], seq: usize) -> Result<DeletionReport> {
    let baseline = perplexity(model.mean_cross_entropy(stream, seq)?);
    let deleted = (1..=model.n_layers())
        .map(|l| Ok(perplexity(model.delete_layer(l)?.mean_cross_entropy(stream, seq)?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(DeletionReport { baseline, deleted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{tokenize, ModelConfig};
    use crate::numerics::stats::log_softmax;
    use crate::numerics::tape::{finite_difference, relative_error};

    fn summed_loss(model: &TransformerModel<f64>, layer: usize, h: &Tensor<f64>, targets: &[usize]) -> f64 {
        let z = model.run_suffix(layer, h, SeqLayout::single(targets.len())).unwrap();
        targets.iter().enumerate().map(|(r, &t)| -log_softmax(z.row(r))[t]).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = TransformerModel::<f64>::init(ModelConfig::tiny(3, 8, 2), 5).unwrap();
        let window = tokenize(b"residual!");
        let ids = &window[..window.len() - 1];
        let (residuals, gradients) = residual_gradients(&model, &window).unwrap();
        assert_eq!(residuals.len(), 3);
        let layout = SeqLayout::single(ids.len());
        for layer in 0..3 {
            let h = model.hidden_at(ids, layout, layer).unwrap();
            let fd = finite_difference(&h, 1e-5, |x| summed_loss(&model, layer, x, &window[1..]));
            let err = relative_error(&gradients[layer], &fd, 1e-8);
            assert!(err < 1e-3, "layer {layer}: {err}");
            let update = model.residual(layer, &h, layout);
            assert!(update.max_abs_diff(&residuals[layer]) < 1e-12);
        }
    }

    #[test]
    fn summaries_of_planted_cosines() {
        let g = [0.3, -1.0, 2.0, 0.5];
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        assert!((cosine(&neg, &g).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0, 0.0, 0.0], &[0.0, 2.0, 0.0, 0.0]).unwrap(), 0.0);

        let samples: Vec<AlignmentSample> = (0..21)
            .map(|i| AlignmentSample {
                layer: 2,
                window: i,
                cosine: -1.0 + 0.1 * i as f64,
            })
            .collect();
        let s = summarize_alignment(&samples).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].layer, 2);
        assert!((s[0].p50 - 0.0).abs() < 1e-12);
        assert!((s[0].p5 + 0.9).abs() < 1e-12);
        assert_eq!(s[0].frac_negative, 10.0 / 21.0);
        assert!(summarize_alignment(&[]).is_err());
    }

    #[test]
    fn samples_are_bounded_and_skip_identity_layers() {
        let model = TransformerModel::<f32>::init(ModelConfig::tiny(3, 8, 2), 2).unwrap();
        let model = model.delete_layer(2).unwrap();
        let stream = tokenize(b"the quick brown fox jumps over the lazy dog");
        let samples = alignment_samples(&model, &stream, 12).unwrap();
        assert!(samples.iter().all(|s| (-1.0..=1.0).contains(&s.cosine)));
        assert!(samples.iter().all(|s| s.layer != 1));
        let rows = grad_residual_alignment(&model, &stream, 12).unwrap();
        assert_eq!(rows.iter().map(|r| r.layer).collect::<Vec<_>>(), vec![0, 2]);
        assert!(alignment_csv(&rows).unwrap().starts_with("layer,p5,p50,p95,frac_negative\n"));
        assert!(alignment_samples(&model, &stream[..1], 12).is_err());
    }

    #[test]
    fn two_dimensional_cosines_follow_the_angle_law() {
        // cos of a uniform angle: P(cos <= c) = 1 - arccos(c) / pi
        let c = random_pairwise_cosines(2, 400, 3).unwrap();
        for p in [5.0, 25.0, 50.0, 75.0, 95.0] {
            let want = (std::f64::consts::PI * (1.0 - p / 100.0)).cos();
            let got = percentile(&c, p).unwrap();
            assert!((got - want).abs() < 0.02, "{p}: {got} vs {want}");
        }
        assert!(random_cosine_baseline(1, 10, 5.0, 0).is_err());
        assert!(random_cosine_baseline(10, 1, 5.0, 0).is_err());
    }

    #[test]
    fn baseline_is_seeded_and_stable_in_n() {
        let a = random_cosine_baseline(1024, 100, 5.0, 7).unwrap();
        assert_eq!(a, random_cosine_baseline(1024, 100, 5.0, 7).unwrap());
        let b = random_cosine_baseline(1024, 200, 5.0, 7).unwrap();
        assert!((a - b).abs() / b.abs() < 0.2, "{a} {b}");
        let analytic = -1.645 / 1024f64.sqrt();
        assert!((b - analytic).abs() / analytic.abs() < 0.15, "{b}");
        // chunk boundaries do not matter to the draw order of a vector
        let odd = random_pairwise_cosines(COSINE_CHUNK + 3, 3, 1).unwrap();
        assert!(odd.iter().all(|c| c.abs() < 0.1));
    }

    #[test]
    fn deletion_matches_reruns() {
        let model = TransformerModel::<f32>::init(ModelConfig::tiny(3, 8, 2), 4).unwrap();
        let stream = tokenize(b"abcabcabcabc deletion sweep");
        let report = layer_deletion_sweep(&model, &stream, 8).unwrap();
        assert_eq!(report.entries().len(), 4);
        for l in 1..=3 {
            let direct = perplexity(model.delete_layer(l).unwrap().mean_cross_entropy(&stream, 8).unwrap());
            assert_eq!(report.deleted[l - 1], direct);
        }
        let mut zeroed = model.clone();
        zeroed.layers[1] = crate::model::Layer::Block(std::sync::Arc::new(crate::model::Block::zeros(&model.config)));
        let r = layer_deletion_sweep(&zeroed, &stream, 8).unwrap();
        assert_eq!(r.deleted[1], r.baseline);
        let csv = report.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(layer_deletion_sweep(&model, &stream[..1], 8).is_err());
    }
}
