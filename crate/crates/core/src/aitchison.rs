// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weighted Aitchison geometry on the probability simplex, and the
//! stimulus/response alignment of lens and model under resampling
//! ablation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::causal::CausalBasis;
use crate::error::{Error, Result};
use crate::lens::Lens;
use crate::model::TransformerModel;
use crate::numerics::kernels::SeqLayout;
use crate::numerics::stats::{log_softmax, softmax, Distribution};
use crate::numerics::{Scalar, Tensor};

/// Entries are clamped to this before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Clamp at [`PROB_FLOOR`] and renormalize.
pub fn floor_probs(p: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = p.iter().map(|&x| x.max(PROB_FLOOR)).collect();
    let s: f64 = clamped.iter().sum();
    clamped.into_iter().map(|x| x / s).collect()
}

/// Positive weights over the vocabulary, normalized to sum 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AitchisonWeights {
    w: Vec<f64>,
}

impl AitchisonWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Empty("weights"));
        }
        if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::Support);
        }
        let s: f64 = w.iter().sum();
        Ok(Self {
            w: w.into_iter().map(|x| x / s).collect(),
        })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            w: vec![1.0 / n as f64; n],
        }
    }

    /// Weights from a distribution that may contain zeros.
    pub fn from_distribution(p: &[f64]) -> Result<Self> {
        Self::new(floor_probs(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

fn check_positive(p: &[f64], n: usize) -> Result<()> {
    if p.len() != n {
        return Err(Error::Shape(format!("composition of length {} for {n} weights", p.len())));
    }
    if p.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::Support);
    }
    Ok(())
}

/// `log p_i - sum_j w_j log p_j`.
fn centered_log(p: &[f64], w: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = p.iter().map(|x| x.ln()).collect();
    let g: f64 = logs.iter().zip(w).map(|(l, wi)| l * wi).sum();
    logs.into_iter().map(|l| l - g).collect()
}

/// Weighted inner product of two strictly positive compositions.
pub fn aitchison_inner(p1: &[f64], p2: &[f64], w: &AitchisonWeights) -> Result<f64> {
    let w = w.as_slice();
    check_positive(p1, w.len())?;
    check_positive(p2, w.len())?;
    let (c1, c2) = (centered_log(p1, w), centered_log(p2, w));
    Ok(w.iter().zip(c1.iter().zip(&c2)).map(|(wi, (a, b))| wi * (a * b)).sum())
}

pub fn aitchison_norm(p: &[f64], w: &AitchisonWeights) -> Result<f64> {
    Ok(aitchison_inner(p, p, w)?.max(0.0).sqrt())
}

/// `softmax(log p1 - log p2)`.
pub fn aitchison_sub(p1: &[f64], p2: &[f64]) -> Result<Distribution> {
    check_positive(p1, p1.len())?;
    check_positive(p2, p1.len())?;
    let diff: Vec<f64> = p1.iter().zip(p2).map(|(a, b)| a.ln() - b.ln()).collect();
    softmax(&diff)
}

/// Perturbation `p ⊕ q`: componentwise product, renormalized.
pub fn perturb(p: &[f64], q: &[f64]) -> Result<Distribution> {
    check_positive(p, p.len())?;
    check_positive(q, p.len())?;
    let logs: Vec<f64> = p.iter().zip(q).map(|(a, b)| a.ln() + b.ln()).collect();
    softmax(&logs)
}

/// Powering `p^α`, renormalized.
pub fn power(p: &[f64], alpha: f64) -> Result<Distribution> {
    check_positive(p, p.len())?;
    let logs: Vec<f64> = p.iter().map(|a| alpha * a.ln()).collect();
    softmax(&logs)
}

/// Cosine under the weighted inner product. Errors when either argument is
/// the neutral (uniform) element.
pub fn aitchison_similarity(s: &[f64], r: &[f64], w: &AitchisonWeights) -> Result<f64> {
    let ns = aitchison_norm(s, w)?;
    let nr = aitchison_norm(r, w)?;
    if ns < 1e-12 || nr < 1e-12 {
        return Err(Error::Undefined("similarity with the neutral element".into()));
    }
    Ok((aitchison_inner(s, r, w)? / (ns * nr)).clamp(-1.0, 1.0))
}

/// Whether two differences point the same way (positive inner product).
pub fn same_direction(p1: &[f64], p2: &[f64], w: &AitchisonWeights) -> Result<bool> {
    Ok(aitchison_inner(p1, p2, w)? > 0.0)
}

fn row_probs<T: Scalar>(z: &Tensor<T>, r: usize) -> Vec<f64> {
    floor_probs(&log_softmax(z.row(r)).iter().map(|x| x.exp()).collect::<Vec<_>>())
}

fn row_differences<T: Scalar>(after: &Tensor<T>, before: &Tensor<T>) -> Result<Vec<Distribution>> {
    (0..after.rows())
        .map(|r| aitchison_sub(&row_probs(after, r), &row_probs(before, r)))
        .collect()
}

/// `lens(g(h)) - lens(h)` per position, where `intervened = g(h)`.
pub fn stimulus<T: Scalar>(
    lens: &dyn Lens<T>,
    model: &TransformerModel<T>,
    layer: usize,
    h: &Tensor<T>,
    intervened: &Tensor<T>,
    layout: SeqLayout,
) -> Result<Vec<Distribution>> {
    let before = lens.logits(model, layer, h, layout)?;
    let after = lens.logits(model, layer, intervened, layout)?;
    row_differences(&after, &before)
}

/// `M_{>layer}(g(h)) - M_{>layer}(h)` per position.
pub fn response<T: Scalar>(
    model: &TransformerModel<T>,
    layer: usize,
    h: &Tensor<T>,
    intervened: &Tensor<T>,
    layout: SeqLayout,
) -> Result<Vec<Distribution>> {
    let before = model.run_suffix(layer, h, layout)?;
    let after = model.run_suffix(layer, intervened, layout)?;
    row_differences(&after, &before)
}

fn check_orthonormal(basis: &[Vec<f64>], d: usize) -> Result<()> {
    for (i, a) in basis.iter().enumerate() {
        if a.len() != d {
            return Err(Error::Shape(format!("basis vector of length {}", a.len())));
        }
        for (j, b) in basis.iter().enumerate().skip(i) {
            let g: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            if (g - want).abs() > 1e-6 {
                return Err(Error::InvalidArgument("basis is not orthonormal".into()));
            }
        }
    }
    Ok(())
}

/// Replace the coordinates of `h` in `span(basis)` with those of `donor`.
pub fn resampling_ablate(h: &[f64], donor: &[f64], basis: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_orthonormal(basis, h.len())?;
    if donor.len() != h.len() {
        return Err(Error::Shape("donor width".into()));
    }
    let mut out = h.to_vec();
    for b in basis {
        let c: f64 = b.iter().zip(donor.iter().zip(h)).map(|(bi, (di, hi))| bi * (di - hi)).sum();
        out.iter_mut().zip(b).for_each(|(x, bi)| *x += c * bi);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    /// Basis vectors resampled per layer.
    pub m: usize,
    pub seed: u64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self { m: 10, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub layer: usize,
    pub mean_similarity: f64,
    pub n_tokens: usize,
    /// Tokens whose stimulus or response was the neutral element.
    pub n_skipped: usize,
}

pub fn alignment_csv(rows: &[AlignmentRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "mean_similarity", "n_tokens"])?;
    for r in rows {
        w.write_record([r.layer.to_string(), format!("{:.9}", r.mean_similarity), r.n_tokens.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Mean stimulus/response similarity per layer.
///
/// For each basis (one per layer), each token of each sequence in `ids`
/// (laid out by `layout`) has its top-`m` basis coordinates replaced by the
/// same position's coordinates from a random other sequence. Lens and
/// model are then compared at that position, with weights from the
/// model's unablated output there.
pub fn alignment_sweep<T: Scalar>(
    model: &TransformerModel<T>,
    lens: &dyn Lens<T>,
    bases: &[CausalBasis],
    ids: &[usize],
    layout: SeqLayout,
    config: &AlignmentConfig,
) -> Result<Vec<AlignmentRow>> {
    if layout.batch < 2 {
        return Err(Error::InvalidArgument("donor sampling needs at least two sequences".into()));
    }
    let trace = model.forward_batch(ids, layout)?;
    let (seq, d) = (layout.seq, model.d_model());
    let weights: Vec<AitchisonWeights> = (0..layout.tokens())
        .map(|r| AitchisonWeights::from_distribution(&row_probs(&trace.logits, r)))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rows = Vec::with_capacity(bases.len());
    for basis in bases {
        let layer = basis.layer;
        if layer > model.n_layers() {
            return Err(Error::OutOfRange(format!("basis layer {layer}")));
        }
        let top = basis.top(config.m);
        check_orthonormal(top, d)?;
        let h = &trace.hidden[layer];
        let mut total = 0.0;
        let (mut n_tokens, mut n_skipped) = (0usize, 0usize);
        for s in 0..layout.batch {
            let subject = h.slice_rows(s * seq, (s + 1) * seq);
            // one copy of the sequence per intervened position
            let copies = SeqLayout { batch: seq, seq };
            let base = Tensor::vstack(&vec![&subject; seq])?;
            let mut edited = base.clone();
            for t in 0..seq {
                let mut donor = rng.random_range(0..layout.batch - 1);
                if donor >= s {
                    donor += 1;
                }
                let f64_row = |x: &[T]| x.iter().map(|v| v.as_f64()).collect::<Vec<_>>();
                let row = resampling_ablate(&f64_row(subject.row(t)), &f64_row(h.row(donor * seq + t)), top)?;
                for (x, v) in edited.row_mut(t * seq + t).iter_mut().zip(row) {
                    *x = T::of(v);
                }
            }
            let lens_before = lens.logits(model, layer, &base, copies)?;
            let lens_after = lens.logits(model, layer, &edited, copies)?;
            let model_before = model.run_suffix(layer, &base, copies)?;
            let model_after = model.run_suffix(layer, &edited, copies)?;
            for t in 0..seq {
                let r = t * seq + t;
                let st = aitchison_sub(&row_probs(&lens_after, r), &row_probs(&lens_before, r))?;
                let re = aitchison_sub(&row_probs(&model_after, r), &row_probs(&model_before, r))?;
                match aitchison_similarity(st.probs(), re.probs(), &weights[s * seq + t]) {
                    Ok(sim) => {
                        total += sim;
                        n_tokens += 1;
                    }
                    Err(Error::Undefined(_)) => n_skipped += 1,
                    Err(e) => return Err(e),
                }
            }
        }
        if n_tokens == 0 {
            return Err(Error::Undefined(format!("no token at layer {layer} had a defined similarity")));
        }
        rows.push(AlignmentRow {
            layer,
            mean_similarity: total / n_tokens as f64,
            n_tokens,
            n_skipped,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lens::{LogitLens, TunedLens};
    use crate::model::ModelConfig;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, prop_oneof, proptest, Strategy};

    fn positive(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    #[test]
    fn three_outcome_hand_value() {
        let p1 = [0.5, 0.25, 0.25];
        let p2 = [0.25, 0.5, 0.25];
        let w = AitchisonWeights::uniform(3);
        // centered logs: p1 -> ln2 * (2/3, -1/3, -1/3), p2 -> ln2 * (-1/3, 2/3, -1/3)
        let l = std::f64::consts::LN_2;
        let want = (1.0 / 3.0) * l * l * ((2.0 / 3.0) * (-1.0 / 3.0) * 2.0 + (1.0 / 9.0));
        assert!((aitchison_inner(&p1, &p2, &w).unwrap() - want).abs() < 1e-15);
        assert_eq!(aitchison_inner(&[1.0 / 3.0; 3], &p2, &w).unwrap().abs() < 1e-15, true);
        assert!(aitchison_inner(&[0.5, 0.5, 0.0], &p2, &w).is_err());
    }

    #[test]
    fn subtraction_examples() {
        let p = [0.2, 0.3, 0.5];
        let d = aitchison_sub(&p, &p).unwrap();
        assert!(d.probs().iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        let q = [0.6, 0.1, 0.3];
        let diff = aitchison_sub(&p, &q).unwrap();
        let back = perturb(diff.probs(), &q).unwrap();
        assert!(back.probs().iter().zip(&p).all(|(a, b)| (a - b).abs() < 1e-9));
        let raw: Vec<f64> = p.iter().zip(&q).map(|(a, b)| a / b).collect();
        let s: f64 = raw.iter().sum();
        assert!(diff.probs().iter().zip(&raw).all(|(a, b)| (a - b / s).abs() < 1e-15));
        assert!(aitchison_sub(&[1.0, 0.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn similarity_extremes() {
        let w = AitchisonWeights::new(vec![0.5, 0.3, 0.2]).unwrap();
        let s = [0.6, 0.3, 0.1];
        assert!((aitchison_similarity(&s, &s, &w).unwrap() - 1.0).abs() < 1e-12);
        let neg = power(&s, -1.0).unwrap();
        assert!((aitchison_similarity(&s, neg.probs(), &w).unwrap() + 1.0).abs() < 1e-12);
        assert!(aitchison_similarity(&s, &[1.0 / 3.0; 3], &w).is_err());
        assert!(same_direction(&s, &s, &w).unwrap());
        assert!(AitchisonWeights::new(vec![1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_and_bilinear(p in positive(5), q in positive(5), r in positive(5), w in positive(5)) {
            let w = AitchisonWeights::new(w).unwrap();
            prop_assert_eq!(aitchison_inner(&p, &q, &w).unwrap(), aitchison_inner(&q, &p, &w).unwrap());
            let pq = perturb(&p, &q).unwrap();
            let lhs = aitchison_inner(pq.probs(), &r, &w).unwrap();
            let rhs = aitchison_inner(&p, &r, &w).unwrap() + aitchison_inner(&q, &r, &w).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn sub_uniform_is_identity(p in positive(6)) {
            let d = aitchison_sub(&p, &[1.0 / 6.0; 6]).unwrap();
            for (a, b) in d.probs().iter().zip(&p) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn similarity_bounded_and_power_invariant(
            s in positive(4), r in positive(4), w in positive(4), alpha in prop_oneof![-3.0f64..-0.1, 0.1f64..3.0]
        ) {
            let w = AitchisonWeights::new(w).unwrap();
            if let Ok(sim) = aitchison_similarity(&s, &r, &w) {
                prop_assert!((-1.0..=1.0).contains(&sim));
                let sp = power(&s, alpha).unwrap();
                let powered = aitchison_similarity(sp.probs(), &r, &w).unwrap();
                prop_assert!((powered - alpha.signum() * sim).abs() < 1e-9);
            }
        }

        #[test]
        fn resampling_keeps_complement(h in prop::collection::vec(-3.0f64..3.0, 4), donor in prop::collection::vec(-3.0f64..3.0, 4)) {
            let s = 0.5f64.sqrt();
            let basis = vec![vec![s, s, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]];
            let out = resampling_ablate(&h, &donor, &basis).unwrap();
            let proj = |x: &[f64], b: &[f64]| x.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            for b in &basis {
                prop_assert!((proj(&out, b) - proj(&donor, b)).abs() < 1e-9);
            }
            // orthogonal complement: e_4 and (1,-1,0,0)/√2
            prop_assert_eq!(out[3], h[3]);
            prop_assert!(((out[0] - out[1]) - (h[0] - h[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn resampling_examples() {
        let h = [1.0, 2.0, 3.0];
        let e: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        assert_eq!(resampling_ablate(&h, &h, &e[..2]).unwrap(), h.to_vec());
        assert_eq!(resampling_ablate(&h, &[7.0, 8.0, 9.0], &e).unwrap(), vec![7.0, 8.0, 9.0]);
        assert!(resampling_ablate(&h, &h, &[vec![1.0, 1.0, 0.0]]).is_err());
    }

    #[test]
    fn stimulus_and_response_definitions() {
        let m = TransformerModel::<f64>::init(ModelConfig::tiny(2, 8, 2), 2).unwrap();
        let layout = SeqLayout::single(5);
        let t = m.forward_batch(&[5, 1, 9, 3, 3], layout).unwrap();
        let h = &t.hidden[1];
        let lens = LogitLens::Plain;
        let same = stimulus(&lens, &m, 1, h, h, layout).unwrap();
        assert!(same.iter().all(|d| d.probs().iter().all(|x| (x - 1.0 / 257.0).abs() < 1e-15)));
        let mut shifted = h.clone();
        shifted.add_row(&[0.5, -0.3, 0.0, 0.2, 0.0, 0.0, 0.1, -0.4]);
        let s = stimulus(&lens, &m, 1, h, &shifted, layout).unwrap();
        let (z0, z1) = (m.unembed_hidden(h), m.unembed_hidden(&shifted));
        let diff: Vec<f64> = z1.row(2).iter().zip(z0.row(2)).map(|(a, b)| a - b).collect();
        let want = softmax(&diff).unwrap();
        assert!(s[2].probs().iter().zip(want.probs()).all(|(a, b)| (a - b).abs() < 1e-12));
        let r = response(&m, 1, h, &shifted, layout).unwrap();
        assert_eq!(r.len(), 5);
        assert!(response(&m, 1, h, h, layout).unwrap()[0].probs()[0] - 1.0 / 257.0 < 1e-15);
    }

    #[test]
    fn final_layer_alignment_is_one() {
        let m = TransformerModel::<f64>::init(ModelConfig::tiny(2, 8, 2), 6).unwrap();
        let lens = TunedLens::identity(&m.config, false);
        let s = 0.5f64.sqrt();
        let mut v0 = vec![0.0; 8];
        v0[0] = s;
        v0[3] = -s;
        let mut v1 = vec![0.0; 8];
        v1[5] = 1.0;
        let bases = vec![
            CausalBasis {
                layer: 2,
                vectors: vec![v0.clone(), v1.clone()],
                influences: vec![1.0, 0.5],
            },
            CausalBasis {
                layer: 1,
                vectors: vec![v0, v1],
                influences: vec![1.0, 0.5],
            },
        ];
        let ids: Vec<usize> = (0..3 * 6).map(|i| (i * 37 + 11) % 250).collect();
        let layout = SeqLayout { batch: 3, seq: 6 };
        let cfg = AlignmentConfig { m: 10, seed: 4 };
        let rows = alignment_sweep(&m, &lens, &bases, &ids, layout, &cfg).unwrap();
        assert!((rows[0].mean_similarity - 1.0).abs() < 1e-9);
        assert_eq!(rows[0].n_tokens + rows[0].n_skipped, 18);
        assert!(rows.iter().all(|r| (-1.0..=1.0).contains(&r.mean_similarity)));
        assert_eq!(rows, alignment_sweep(&m, &lens, &bases, &ids, layout, &cfg).unwrap());
        let csv = alignment_csv(&rows).unwrap();
        assert!(csv.starts_with("layer,mean_similarity,n_tokens\n"));
    }

    #[test]
    fn random_pairs_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = AitchisonWeights::uniform(7);
        for _ in 0..1000 {
            let mut draw = || floor_probs(&(0..7).map(|_| rng.random_range(0.001..1.0)).collect::<Vec<f64>>());
            let (a, b) = (draw(), draw());
            let s = aitchison_similarity(&a, &b, &w).unwrap();
            assert!((-1.0..=1.0).contains(&s));
        }
    }
}
