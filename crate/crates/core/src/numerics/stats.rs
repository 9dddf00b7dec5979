// SPDX-License-Identifier: MIT OR Apache-2.0

//! Probability and statistics primitives. All arithmetic here is `f64`.

use std::f64::consts::LN_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernels::layer_norm_forward;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Probability vector over a finite outcome set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates nonnegativity and normalization (within `1e-9`).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("distribution"));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidArgument(
                "probabilities must be finite and nonnegative".into(),
            ));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {s}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Normalize an arbitrary nonnegative vector.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        let s: f64 = weights.iter().sum();
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidArgument("weights have no mass".into()));
        }
        Self::new(weights.into_iter().map(|w| w / s).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    /// Index of the largest probability; lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Index of the maximum; the lowest index wins exact ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Distribution> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite logit".into()));
    }
    let m = logits
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|x| (x.as_f64() - m).exp()).collect();
    let s: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= s;
    }
    Ok(Distribution { probs })
}

/// Log-softmax in `f64`.
pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let m = logits
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = logits
        .iter()
        .map(|x| (x.as_f64() - m).exp())
        .sum::<f64>()
        .ln()
        + m;
    logits.iter().map(|x| x.as_f64() - lse).collect()
}

/// Row-wise LayerNorm.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    if x.is_empty() {
        return Err(Error::Empty("layer_norm input"));
    }
    if gamma.len() != x.cols() || beta.len() != x.cols() {
        return Err(Error::Shape(format!(
            "layer_norm width {} vs gamma {} / beta {}",
            x.cols(),
            gamma.len(),
            beta.len()
        )));
    }
    Ok(layer_norm_forward(x, gamma, beta, eps).0)
}

/// `KL(p || q)` in bits.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64> {
    kl_bits(p.probs(), q.probs())
}

/// `KL(p || q)` in bits over raw probability slices.
pub fn kl_bits(p: &[f64], q: &[f64]) -> Result<f64> {
    Ok(kl_nats(p, q)? / LN_2)
}

pub fn kl_nats(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("kl over {} vs {}", p.len(), q.len())));
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::Support);
            }
            acc += pi * (pi.ln() - qi.ln());
        }
    }
    Ok(acc.max(0.0))
}

/// KL in nats between two log-probability vectors (`p` is the reference).
pub fn kl_from_log_probs(log_p: &[f64], log_q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&lp, &lq) in log_p.iter().zip(log_q) {
        let p = lp.exp();
        if p > 0.0 {
            acc += p * (lp - lq);
        }
    }
    acc.max(0.0)
}

pub fn perplexity(mean_nats: f64) -> f64 {
    mean_nats.exp()
}

/// Average ranks (1-based) with ties sharing their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} vs {} samples", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation of a constant sequence".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation using average ranks for ties.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} vs {} samples", x.len(), y.len())));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Area under the ROC curve via the Mann-Whitney identity; ties count one half.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Empty("auroc class"));
    }
    let mut all: Vec<f64> = pos.iter().chain(neg).copied().collect();
    if all.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let ranks = average_ranks(&all);
    let n1 = pos.len() as f64;
    let n2 = neg.len() as f64;
    let rank_sum: f64 = ranks[..pos.len()].iter().sum();
    let u = rank_sum - n1 * (n1 + 1.0) / 2.0;
    let total = n1 * n2;
    all.clear();
    // Evaluate the smaller side directly so that swapping the classes yields
    // an exact complement.
    if 2.0 * u <= total {
        Ok(u / total)
    } else {
        Ok(1.0 - (total - u) / total)
    }
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Percentile (0..=100) of unsorted data.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile input"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(quantile(&v, p / 100.0))
}

/// Percentile bootstrap interval. Each group is resampled with replacement
/// independently (stratified), and `statistic` is evaluated on the
/// resampled groups.
pub fn bootstrap_ci<F>(
    groups: &[&[f64]],
    statistic: F,
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)>
where
    F: Fn(&[Vec<f64>]) -> Result<f64>,
{
    if n_resamples < 100 {
        return Err(Error::InvalidArgument(format!(
            "bootstrap needs at least 100 resamples, got {n_resamples}"
        )));
    }
    if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
        return Err(Error::Empty("bootstrap group"));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level {level}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(n_resamples);
    let mut resampled: Vec<Vec<f64>> = groups.iter().map(|g| Vec::with_capacity(g.len())).collect();
    for _ in 0..n_resamples {
        for (g, out) in groups.iter().zip(resampled.iter_mut()) {
            out.clear();
            out.extend((0..g.len()).map(|_| g[rng.random_range(0..g.len())]));
        }
        stats.push(statistic(&resampled)?);
    }
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((quantile(&stats, alpha), quantile(&stats, 1.0 - alpha)))
}

/// Bootstrap interval for [`auroc`].
pub fn auroc_ci(pos: &[f64], neg: &[f64], n_resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    bootstrap_ci(
        &[pos, neg],
        |g| auroc(&g[0], &g[1]),
        n_resamples,
        level,
        seed,
    )
}

/// Cosine similarity of two equally long vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine over {} vs {}", a.len(), b.len())));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Undefined("cosine with a zero vector".into()));
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0f64, 0.0]).unwrap().probs(), &[0.5, 0.5]);
        for c in [-7.5f64, 0.0, 3.0, 1e3] {
            let p = softmax(&[c, c, c]).unwrap();
            for &x in p.probs() {
                assert!((x - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let p = softmax(&[1.0f64.ln(), 3.0f64.ln()]).unwrap();
        assert!((p.probs()[0] - 0.25).abs() < 1e-15);
        assert!((p.probs()[1] - 0.75).abs() < 1e-15);
        assert!(matches!(softmax::<f64>(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let x = Tensor::<f64>::vector(vec![3.0, 3.0, 3.0, 3.0]);
        let y = layer_norm(&x, &[2.0; 4], &[0.5, -1.0, 0.0, 7.0], 1e-5).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 0.0, 7.0]);

        let x = Tensor::<f64>::vector(vec![1.0, -1.0]);
        let y = layer_norm(&x, &[1.0; 2], &[0.0; 2], 0.0).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0]);

        let x = Tensor::<f64>::vector(vec![2.0, 2.0, 2.0]);
        let beta = [0.1, 0.2, 0.3];
        let y = layer_norm(&x, &[1.0; 3], &beta, 1e-5).unwrap();
        for (a, b) in y.data().iter().zip(beta) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn kl_examples() {
        let p = Distribution::new(vec![0.3, 0.7]).unwrap();
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let p = Distribution::new(vec![1.0, 0.0]).unwrap();
        let q = Distribution::new(vec![0.5, 0.5]).unwrap();
        assert!((kl_divergence(&p, &q).unwrap() - 1.0).abs() < 1e-12);
        // Direct summation: 0.25 log2(1/3) + 0.75 log2(3) = 0.5 log2(3).
        let p = Distribution::new(vec![0.25, 0.75]).unwrap();
        let q = Distribution::new(vec![0.75, 0.25]).unwrap();
        let oracle = 0.25 * (0.25f64 / 0.75).log2() + 0.75 * (0.75f64 / 0.25).log2();
        let got = kl_divergence(&p, &q).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 0.7925).abs() < 5e-5);
        let q = Distribution::new(vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            kl_divergence(&Distribution::uniform(2), &q),
            Err(Error::Support)
        ));
    }

    #[test]
    fn perplexity_examples() {
        assert_eq!(perplexity(0.0), 1.0);
        assert!((perplexity(257f64.ln()) - 257.0).abs() < 1e-9);
        // Three tokens with probabilities 1/2, 1/4, 1/8.
        let probs = [0.5f64, 0.25, 0.125];
        let mean = probs.iter().map(|p| -p.ln()).sum::<f64>() / 3.0;
        let direct = (probs.iter().product::<f64>()).powf(-1.0 / 3.0);
        assert!((perplexity(mean) - direct).abs() < 1e-12);
        assert!((perplexity(mean) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman_rho(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let y = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman_rho(&x, &y).unwrap() + 1.0).abs() < 1e-15);
        // Rank formula: 1 - 6 * sum(d^2) / (n (n^2 - 1)) = 1 - 6*2/24.
        let r = spearman_rho(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert!((r - 0.5).abs() < 1e-15);
        assert!(spearman_rho(&[1.0, 2.0], &[1.0]).is_err());
        assert!(matches!(
            spearman_rho(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn average_ranks_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    fn pairwise_auroc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut c = 0.0;
        for &p in pos {
            for &n in neg {
                c += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        c / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0], &[1.0]).unwrap(), 0.5);
        assert_eq!(pairwise_auroc(&[3.0, 1.0], &[2.0, 0.0]), 0.75);
        assert_eq!(auroc(&[3.0, 1.0], &[2.0, 0.0]).unwrap(), 0.75);
        assert!(auroc(&[], &[1.0]).is_err());
    }

    #[test]
    fn bootstrap_examples() {
        let (lo, hi) = bootstrap_ci(&[&[1.0, 2.0, 3.0]], |_| Ok(4.2), 200, 0.95, 0).unwrap();
        assert_eq!((lo, hi), (4.2, 4.2));
        let (lo, hi) = auroc_ci(&[5.0, 6.0, 7.0], &[0.0, 1.0], 500, 0.95, 1).unwrap();
        assert_eq!((lo, hi), (1.0, 1.0));
        let pos = [0.9, 0.4, 0.8, 0.7, 0.35, 0.6];
        let neg = [0.1, 0.5, 0.3, 0.2, 0.65, 0.45];
        let point = auroc(&pos, &neg).unwrap();
        let (lo, hi) = auroc_ci(&pos, &neg, 1000, 0.95, 7).unwrap();
        assert!(lo <= point && point <= hi, "{lo} {point} {hi}");
        assert_eq!((lo, hi), auroc_ci(&pos, &neg, 1000, 0.95, 7).unwrap());
        assert!(bootstrap_ci(&[&[1.0]], |_| Ok(0.0), 99, 0.95, 0).is_err());
        assert!(bootstrap_ci(&[&[]], |_| Ok(0.0), 100, 0.95, 0).is_err());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(z in prop::collection::vec(-30.0f64..30.0, 1..40), c in -100.0f64..100.0) {
            let a = softmax(&z).unwrap();
            let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn kl_nonnegative(a in prop::collection::vec(0.01f64..1.0, 2..20), b in prop::collection::vec(0.01f64..1.0, 20)) {
            let p = Distribution::normalized(a.clone()).unwrap();
            let q = Distribution::normalized(b[..a.len()].to_vec()).unwrap();
            let kl = kl_divergence(&p, &q).unwrap();
            prop_assert!(kl >= 0.0);
            let max_diff = p.probs().iter().zip(q.probs()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            if kl == 0.0 {
                prop_assert!(max_diff < 1e-12 || kl_nats(p.probs(), q.probs()).unwrap() < 1e-15);
            }
        }

        #[test]
        fn auroc_matches_pairs_and_complements(
            pos in prop::collection::vec(0i32..6, 1..15),
            neg in prop::collection::vec(0i32..6, 1..15),
        ) {
            let pos: Vec<f64> = pos.into_iter().map(f64::from).collect();
            let neg: Vec<f64> = neg.into_iter().map(f64::from).collect();
            let a = auroc(&pos, &neg).unwrap();
            prop_assert!((a - pairwise_auroc(&pos, &neg)).abs() <= 1e-15);
            prop_assert_eq!(a + auroc(&neg, &pos).unwrap(), 1.0);
        }
    }
}
