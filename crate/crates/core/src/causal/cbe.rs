// SPDX-License-Identifier: MIT OR Apache-2.0

use std::f64::consts::LN_2;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CausalBasis, ErasureContext, LatentFn};
use crate::error::{Error, Result};
use crate::numerics::kernels::SeqLayout;
use crate::numerics::optim::{lbfgs, LbfgsConfig};
use crate::numerics::stats::log_softmax;
use crate::numerics::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CbeConfig {
    pub k: usize,
    pub max_iter: usize,
    pub tolerance_grad: f64,
    /// Seeds the random starts used once the initial directions run out.
    pub seed: u64,
}

impl Default for CbeConfig {
    fn default() -> Self {
        Self {
            k: 16,
            max_iter: 100,
            tolerance_grad: 1e-6,
            seed: 0,
        }
    }
}

/// Influence of erasing `v` on one fixed batch, as a function of `v`.
///
/// The erasure `h + v <x̄ - h, v>` is recorded once and replayed for each
/// new `v`, so repeated evaluations only pay for the forward and backward
/// sweeps.
pub struct InfluenceObjective<T: Scalar> {
    tape: Tape<T>,
    v: Var,
    out: Var,
    d: usize,
}

impl<T: Scalar> InfluenceObjective<T> {
    pub fn new(f: &dyn LatentFn<T>, h: &Tensor<T>, layout: SeqLayout, ctx: &ErasureContext) -> Result<Self> {
        if h.rows() == 0 {
            return Err(Error::Empty("influence dataset"));
        }
        let d = ctx.dim();
        if h.cols() != d || f.dim() != d {
            return Err(Error::Shape(format!("states {:?} for width {d}", h.shape())));
        }
        let base = f.logits(h, layout)?;
        let mut target = Tensor::zeros(base.shape());
        for r in 0..base.rows() {
            for (t, x) in target.row_mut(r).iter_mut().zip(log_softmax(base.row(r))) {
                *t = T::of(x);
            }
        }
        let mut deviation = h.clone();
        for r in 0..h.rows() {
            for (x, m) in deviation.row_mut(r).iter_mut().zip(&ctx.mean) {
                *x = T::of(m - x.as_f64());
            }
        }
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let dev = tape.constant(deviation);
        let v = tape.leaf(Tensor::zeros(&[1, d]), true);
        let c = tape.matmul_t(dev, v);
        let delta = tape.matmul(c, v);
        let ablated = tape.add(hv, delta);
        let z = f.record(&mut tape, ablated, layout)?;
        let kl = tape.kl_from_target(z, target)?;
        let out = tape.scale(kl, T::of(1.0 / LN_2));
        Ok(Self { tape, v, out, d })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Influence in bits and its Euclidean gradient in `v`. For unit `v`
    /// the value equals [`super::influence`].
    pub fn evaluate(&mut self, v: &[f64]) -> Result<(f64, Vec<f64>)> {
        if v.len() != self.d {
            return Err(Error::Shape(format!("direction of length {}", v.len())));
        }
        self.tape
            .set_leaf(self.v, Tensor::from_fn(&[1, self.d], |i| T::of(v[i])))?;
        self.tape.replay();
        let value = self.tape.scalar(self.out).as_f64();
        let g = self.tape.backward(self.out)?.wrt(self.v);
        Ok((value, g.data().iter().map(|x| x.as_f64()).collect()))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Remove the components along `basis` (Gram-Schmidt, two passes).
fn orthogonalize(u: &[f64], basis: &[Vec<f64>]) -> Vec<f64> {
    let mut w = u.to_vec();
    for _ in 0..2 {
        for b in basis {
            let c = dot(&w, b);
            w.iter_mut().zip(b).for_each(|(x, bi)| *x -= c * bi);
        }
    }
    w
}

fn normalized(mut w: Vec<f64>) -> Option<Vec<f64>> {
    let n = norm(&w);
    if !(n > 0.0 && n.is_finite()) {
        return None;
    }
    w.iter_mut().for_each(|x| *x /= n);
    Some(w)
}

/// Right singular vectors of `a`, by descending singular value.
pub fn right_singular_vectors(a: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
    if a.shape().len() != 2 {
        return Err(Error::Shape(format!("{:?}", a.shape())));
    }
    let m = DMatrix::from_row_slice(a.rows(), a.cols(), a.data());
    let svd = m.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Undefined("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    Ok(order.into_iter().map(|i| v_t.row(i).iter().copied().collect()).collect())
}

/// Largest principal angle (radians) between the spans of two orthonormal
/// families of equal size.
pub fn largest_principal_angle(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} vectors", a.len(), b.len())));
    }
    let d = a[0].len();
    let residual: Vec<f64> = b.iter().flat_map(|v| orthogonalize(v, a)).collect();
    if residual.len() != b.len() * d {
        return Err(Error::Shape("vectors of unequal length".into()));
    }
    let r = DMatrix::from_row_slice(b.len(), d, &residual);
    let sine = r.singular_values().max();
    Ok(sine.min(1.0).asin())
}

/// Greedy orthonormal directions of maximal influence, sorted by
/// descending influence.
///
/// Each direction is found by L-BFGS on `v = Q u / |Q u|`, where `Q`
/// projects out the directions already found. Starts come from `init`
/// (projected into the feasible set) and then from seeded random draws.
#[allow(clippy::too_many_arguments)]
pub fn causal_basis_extraction<T: Scalar>(
    f: &dyn LatentFn<T>,
    layer: usize,
    h: &Tensor<T>,
    layout: SeqLayout,
    ctx: &ErasureContext,
    init: &[Vec<f64>],
    config: &CbeConfig,
) -> Result<CausalBasis> {
    let d = ctx.dim();
    if config.k == 0 || config.k > d {
        return Err(Error::InvalidArgument(format!("k = {} for width {d}", config.k)));
    }
    let mut objective = InfluenceObjective::new(f, h, layout, ctx)?;
    let lbfgs_config = LbfgsConfig {
        max_iter: config.max_iter,
        tolerance_grad: config.tolerance_grad,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut starts = init.iter();
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(config.k);
    let mut influences = Vec::with_capacity(config.k);
    for i in 0..config.k {
        let start = loop {
            let candidate = match starts.next() {
                Some(c) if c.len() == d => c.clone(),
                Some(c) => return Err(Error::Shape(format!("initial direction of length {}", c.len()))),
                None => (0..d).map(|_| StandardNormal.sample(&mut rng)).collect(),
            };
            let scale = norm(&candidate);
            let w = orthogonalize(&candidate, &vectors);
            if norm(&w) > 1e-3 * scale {
                if let Some(v) = normalized(w) {
                    break v;
                }
            }
        };
        let basis = &vectors;
        let obj = &mut objective;
        let outcome = lbfgs(
            start,
            &lbfgs_config,
            |u: &[f64]| {
                let w = orthogonalize(u, basis);
                let n = norm(&w);
                let v = normalized(w).ok_or_else(|| Error::Diverged("direction collapsed".into()))?;
                let (value, g) = obj.evaluate(&v)?;
                let radial = dot(&g, &v);
                let tangent: Vec<f64> = g.iter().zip(&v).map(|(gi, vi)| gi - radial * vi).collect();
                let grad = orthogonalize(&tangent, basis).iter().map(|x| -x / n).collect();
                Ok((-value, grad))
            },
            Some(|u: &mut [f64]| {
                if let Some(v) = normalized(orthogonalize(u, basis)) {
                    u.copy_from_slice(&v);
                }
            }),
        )
        .map_err(|e| match e {
            Error::Diverged(msg) => Error::Diverged(format!("layer {layer}, direction {i}: {msg}")),
            other => other,
        })?;
        let v = normalized(orthogonalize(&outcome.x, &vectors))
            .ok_or_else(|| Error::Diverged(format!("layer {layer}, direction {i} collapsed")))?;
        let (value, _) = objective.evaluate(&v)?;
        if !value.is_finite() {
            return Err(Error::Diverged(format!("layer {layer}, direction {i}: influence {value}")));
        }
        vectors.push(v);
        influences.push(value);
    }
    let mut order: Vec<usize> = (0..config.k).collect();
    order.sort_by(|&a, &b| influences[b].total_cmp(&influences[a]));
    Ok(CausalBasis {
        layer,
        vectors: order.iter().map(|&i| vectors[i].clone()).collect(),
        influences: order.iter().map(|&i| influences[i]).collect(),
    })
}
