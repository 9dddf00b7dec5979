// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward and backward kernels shared by the plain forward pass and the
//! gradient tape. Both paths call the same functions, so a recorded tape
//! reproduces the plain forward values exactly.

use super::tensor::{gemm, MatMut, MatRef};
use super::{Scalar, Tensor};

/// Row-wise LayerNorm statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LnCache<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// `y = gamma * (x - mean) / sqrt(var + eps) + beta` for each row.
pub fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Tensor<T>, LnCache<T>) {
    let (n, d) = (x.rows(), x.cols());
    let inv_d = T::one() / T::of_usize(d);
    let mut y = Tensor::zeros(x.shape());
    let mut mean = Vec::with_capacity(n);
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mu = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        let out = y.row_mut(i);
        for j in 0..d {
            out[j] = gamma[j] * ((row[j] - mu) * r) + beta[j];
        }
        mean.push(mu);
        rstd.push(r);
    }
    (y, LnCache { mean, rstd })
}

/// Gradients of LayerNorm with respect to `x`, `gamma`, `beta`.
pub fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    cache: &LnCache<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, d) = (x.rows(), x.cols());
    let inv_d = T::one() / T::of_usize(d);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    let mut g = vec![T::zero(); d];
    for i in 0..n {
        let row = x.row(i);
        let dyr = dy.row(i);
        let (mu, r) = (cache.mean[i], cache.rstd[i]);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for j in 0..d {
            xhat[j] = (row[j] - mu) * r;
            dgamma[j] += dyr[j] * xhat[j];
            dbeta[j] += dyr[j];
            g[j] = dyr[j] * gamma[j];
            sum_g += g[j];
            sum_gx += g[j] * xhat[j];
        }
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = r * (g[j] - inv_d * sum_g - xhat[j] * inv_d * sum_gx);
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + fast_tanh(c * (x + k * x * x * x)))
}

/// `tanh` through a single `exp`; libm's `tanh` dominates the MLP cost
/// otherwise.
#[inline]
fn fast_tanh<T: Scalar>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = fast_tanh(u);
    let du = c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let inv = T::one() / s;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Log-softmax of one row into `out`.
pub fn log_softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Layout of a flattened batch of equally long sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub seq: usize,
}

impl SeqLayout {
    pub fn single(seq: usize) -> Self {
        Self { batch: 1, seq }
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.seq
    }
}

/// Causal multi-head attention over a `[batch*seq, d]` layout.
///
/// Returns the attended values and the attention probabilities
/// `[batch, heads, seq, seq]` needed for the backward pass.
pub fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    layout: SeqLayout,
    n_heads: usize,
) -> (Tensor<T>, Vec<T>) {
    let d = q.cols();
    let dh = d / n_heads;
    let t = layout.seq;
    let scale = T::one() / T::of_usize(dh).sqrt();
    let mut out = Tensor::zeros(q.shape());
    let mut probs = vec![T::zero(); layout.batch * n_heads * t * t];
    for b in 0..layout.batch {
        for h in 0..n_heads {
            let base = b * t * d + h * dh;
            let p_off = (b * n_heads + h) * t * t;
            let p = &mut probs[p_off..p_off + t * t];
            gemm(
                scale,
                MatRef::strided(q.data(), base, t, dh, d as isize, 1),
                MatRef::strided(k.data(), base, t, dh, d as isize, 1).t(),
                T::zero(),
                MatMut::new(p, t, t),
            );
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                for x in row[i + 1..].iter_mut() {
                    *x = T::neg_infinity();
                }
                softmax_in_place(&mut row[..=i]);
                for x in row[i + 1..].iter_mut() {
                    *x = T::zero();
                }
            }
            gemm(
                T::one(),
                MatRef::new(p, t, t),
                MatRef::strided(v.data(), base, t, dh, d as isize, 1),
                T::zero(),
                MatMut::strided(out.data_mut(), base, t, dh, d as isize, 1),
            );
        }
    }
    (out, probs)
}

/// Backward pass of [`attention_forward`]: returns `(dq, dk, dv)`.
pub fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    dout: &Tensor<T>,
    layout: SeqLayout,
    n_heads: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = q.cols();
    let dh = d / n_heads;
    let t = layout.seq;
    let scale = T::one() / T::of_usize(dh).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut dp = vec![T::zero(); t * t];
    for b in 0..layout.batch {
        for h in 0..n_heads {
            let base = b * t * d + h * dh;
            let p_off = (b * n_heads + h) * t * t;
            let p = &probs[p_off..p_off + t * t];
            // dV = P^T dO
            gemm(
                T::one(),
                MatRef::new(p, t, t).t(),
                MatRef::strided(dout.data(), base, t, dh, d as isize, 1),
                T::zero(),
                MatMut::strided(dv.data_mut(), base, t, dh, d as isize, 1),
            );
            // dP = dO V^T
            gemm(
                T::one(),
                MatRef::strided(dout.data(), base, t, dh, d as isize, 1),
                MatRef::strided(v.data(), base, t, dh, d as isize, 1).t(),
                T::zero(),
                MatMut::new(&mut dp, t, t),
            );
            // dS = P * (dP - rowsum(dP * P)), then fold in the score scale
            for i in 0..t {
                let pr = &p[i * t..(i + 1) * t];
                let dr = &mut dp[i * t..(i + 1) * t];
                let s: T = pr[..=i].iter().zip(&dr[..=i]).map(|(&a, &b)| a * b).sum();
                for j in 0..t {
                    dr[j] = if j <= i { pr[j] * (dr[j] - s) * scale } else { T::zero() };
                }
            }
            gemm(
                T::one(),
                MatRef::new(&dp, t, t),
                MatRef::strided(k.data(), base, t, dh, d as isize, 1),
                T::zero(),
                MatMut::strided(dq.data_mut(), base, t, dh, d as isize, 1),
            );
            gemm(
                T::one(),
                MatRef::new(&dp, t, t).t(),
                MatRef::strided(q.data(), base, t, dh, d as isize, 1),
                T::zero(),
                MatMut::strided(dk.data_mut(), base, t, dh, d as isize, 1),
            );
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_tanh_tracks_libm() {
        for i in -400..=400 {
            let x = i as f64 * 0.05;
            assert!((fast_tanh(x) - x.tanh()).abs() < 1e-15, "{x}");
            assert!((fast_tanh(x as f32) - (x as f32).tanh()).abs() < 1e-6, "{x}");
        }
        assert_eq!(fast_tanh(1e4f32), 1.0);
        assert_eq!(fast_tanh(-1e4f32), -1.0);
    }
}
