// SPDX-License-Identifier: MIT OR Apache-2.0

//! First- and quasi-second-order optimizers.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Scale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = T::of(max_norm / (total + 1e-6));
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    total
}

/// Cosine decay from `base` to zero over `total` steps after a linear warmup.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Linear decay from `base` to zero over `total` steps.
pub fn linear_lr(base: f64, step: usize, total: usize) -> f64 {
    base * (1.0 - step as f64 / total.max(1) as f64).max(0.0)
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(shapes: &[&[usize]]) -> Self {
        let zeros = |s: &&[usize]| vec![T::zero(); s.iter().product()];
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(zeros).collect(),
            v: shapes.iter().map(zeros).collect(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count");
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let step_size = T::of(lr / c1);
        let c2_sqrt = T::of(c2.sqrt());
        let eps = T::of(self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *x -= step_size * *mi / (vi.sqrt() / c2_sqrt + eps);
            }
        }
    }
}

/// SGD with (optionally Nesterov) momentum, PyTorch update convention:
/// the buffer starts at the first gradient, then `buf = mu * buf + g`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub nesterov: bool,
    buffers: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(n_params: usize, momentum: f64, nesterov: bool) -> Self {
        Self {
            momentum,
            nesterov,
            buffers: vec![None; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) {
        assert_eq!(params.len(), self.buffers.len(), "parameter count");
        let mu = T::of(self.momentum);
        let lr = T::of(lr);
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(self.buffers.iter_mut()) {
            if self.momentum == 0.0 {
                p.axpy(-lr, g);
                continue;
            }
            match slot {
                None => *slot = Some(g.data().to_vec()),
                Some(buf) => {
                    for (b, &gi) in buf.iter_mut().zip(g.data()) {
                        *b = mu * *b + gi;
                    }
                }
            }
            let buf = slot.as_ref().expect("initialized above");
            for ((x, &gi), &b) in p.data_mut().iter_mut().zip(g.data()).zip(buf) {
                let u = if self.nesterov { gi + mu * b } else { b };
                *x -= lr * u;
            }
        }
    }
}

/// Settings for [`lbfgs`].
#[derive(Clone, Debug)]
pub struct LbfgsConfig {
    pub max_iter: usize,
    pub history: usize,
    /// Stop once the gradient L2 norm falls below this.
    pub tolerance_grad: f64,
    /// Stop once a step or objective change falls below this.
    pub tolerance_change: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            history: 100,
            tolerance_grad: 1e-6,
            tolerance_change: 1e-9,
            max_line_search: 25,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub grad_norm: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cubic_interpolate(
    x1: f64,
    f1: f64,
    g1: f64,
    x2: f64,
    f2: f64,
    g2: f64,
    bounds: Option<(f64, f64)>,
) -> f64 {
    let (lo, hi) = bounds.unwrap_or(if x1 <= x2 { (x1, x2) } else { (x2, x1) });
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        let pos = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if pos.is_finite() {
            return pos.max(lo).min(hi);
        }
    }
    0.5 * (lo + hi)
}

struct Probe {
    t: f64,
    f: f64,
    g: Vec<f64>,
    gtd: f64,
}

/// Line search satisfying the strong Wolfe conditions
/// (`c1 = 1e-4`, `c2 = 0.9`), bracketing then zooming with cubic
/// interpolation.
#[allow(clippy::too_many_arguments)]
fn strong_wolfe<F>(
    eval: &mut F,
    x: &[f64],
    t0: f64,
    d: &[f64],
    f: f64,
    g: &[f64],
    gtd: f64,
    tolerance_change: f64,
    max_ls: usize,
) -> Result<(Probe, usize)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let d_norm = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut evals = 0usize;
    let mut at = |t: f64, evals: &mut usize| -> Result<Probe> {
        let xt: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + t * b).collect();
        let (f, g) = eval(&xt)?;
        *evals += 1;
        let gtd = dot(&g, d);
        Ok(Probe { t, f, g, gtd })
    };

    let mut prev = Probe {
        t: 0.0,
        f,
        g: g.to_vec(),
        gtd,
    };
    let mut cur = at(t0, &mut evals)?;
    let mut ls_iter = 0usize;
    let mut bracket: Vec<Probe>;
    let mut done = false;
    loop {
        if ls_iter >= max_ls {
            let origin = Probe {
                t: 0.0,
                f,
                g: g.to_vec(),
                gtd,
            };
            bracket = vec![origin, cur];
            break;
        }
        if cur.f > f + C1 * cur.t * gtd || (ls_iter > 1 && cur.f >= prev.f) {
            bracket = vec![prev, cur];
            break;
        }
        if cur.gtd.abs() <= -C2 * gtd {
            bracket = vec![cur];
            done = true;
            break;
        }
        if cur.gtd >= 0.0 {
            bracket = vec![prev, cur];
            break;
        }
        let min_step = cur.t + 0.01 * (cur.t - prev.t);
        let max_step = cur.t * 10.0;
        let t = cubic_interpolate(
            prev.t,
            prev.f,
            prev.gtd,
            cur.t,
            cur.f,
            cur.gtd,
            Some((min_step, max_step)),
        );
        let next = at(t, &mut evals)?;
        prev = std::mem::replace(&mut cur, next);
        ls_iter += 1;
    }
    if bracket.len() == 1 {
        return Ok((bracket.pop().expect("one entry"), evals));
    }

    let mut insufficient = false;
    let (mut lo, mut hi) = if bracket[0].f <= bracket[1].f { (0, 1) } else { (1, 0) };
    while !done && ls_iter < max_ls {
        let (b0, b1) = (bracket[0].t, bracket[1].t);
        if (b1 - b0).abs() * d_norm < tolerance_change {
            break;
        }
        let mut t = cubic_interpolate(
            b0,
            bracket[0].f,
            bracket[0].gtd,
            b1,
            bracket[1].f,
            bracket[1].gtd,
            None,
        );
        let (bmin, bmax) = (b0.min(b1), b0.max(b1));
        let eps = 0.1 * (bmax - bmin);
        if (bmax - t).min(t - bmin) < eps {
            if insufficient || t >= bmax || t <= bmin {
                t = if (t - bmax).abs() < (t - bmin).abs() {
                    bmax - eps
                } else {
                    bmin + eps
                };
                insufficient = false;
            } else {
                insufficient = true;
            }
        } else {
            insufficient = false;
        }
        let probe = at(t, &mut evals)?;
        ls_iter += 1;
        if probe.f > f + C1 * probe.t * gtd || probe.f >= bracket[lo].f {
            bracket[hi] = probe;
            (lo, hi) = if bracket[0].f <= bracket[1].f { (0, 1) } else { (1, 0) };
        } else {
            if probe.gtd.abs() <= -C2 * gtd {
                done = true;
            } else if probe.gtd * (bracket[hi].t - bracket[lo].t) >= 0.0 {
                bracket.swap(lo, hi);
            }
            bracket[lo] = probe;
        }
    }
    let best = bracket.swap_remove(lo);
    Ok((best, evals))
}

/// Minimize `eval` with L-BFGS and a strong Wolfe line search.
///
/// `retract` runs after every accepted step and may move the iterate to an
/// equivalent point (the objective is re-evaluated there), which lets
/// constrained problems be solved through a scale-invariant
/// parametrization.
pub fn lbfgs<F, R>(
    x0: Vec<f64>,
    config: &LbfgsConfig,
    mut eval: F,
    mut retract: Option<R>,
) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    R: FnMut(&mut [f64]),
{
    let mut checked = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (f, g) = eval(x)?;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!("non-finite objective {f}")));
        }
        Ok((f, g))
    };
    let mut x = x0;
    let (mut f, mut g) = checked(&x)?;
    let mut evaluations = 1usize;
    let mut iterations = 0usize;
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut h_diag = 1.0;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;

    while norm(&g) > config.tolerance_grad && iterations < config.max_iter {
        iterations += 1;
        if let Some((px, pg)) = prev.take() {
            let s: Vec<f64> = x.iter().zip(&px).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g.iter().zip(&pg).map(|(a, b)| a - b).collect();
            let ys = dot(&y, &s);
            if ys > 1e-10 {
                if s_hist.len() == config.history {
                    s_hist.remove(0);
                    y_hist.remove(0);
                }
                h_diag = ys / dot(&y, &y);
                s_hist.push(s);
                y_hist.push(y);
            }
        }
        // two-loop recursion
        let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = vec![0.0; s_hist.len()];
        for i in (0..s_hist.len()).rev() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            alphas[i] = rho * dot(&s_hist[i], &q);
            for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
                *qj -= alphas[i] * yj;
            }
        }
        for v in q.iter_mut() {
            *v *= h_diag;
        }
        for i in 0..s_hist.len() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            let beta = rho * dot(&y_hist[i], &q);
            for (qj, sj) in q.iter_mut().zip(&s_hist[i]) {
                *qj += (alphas[i] - beta) * sj;
            }
        }
        let d = q;
        let gtd = dot(&g, &d);
        if gtd > -config.tolerance_change {
            break;
        }
        let t0 = if iterations == 1 {
            (1.0f64).min(1.0 / g.iter().map(|v| v.abs()).sum::<f64>())
        } else {
            1.0
        };
        let (probe, evals) = strong_wolfe(
            &mut checked,
            &x,
            t0,
            &d,
            f,
            &g,
            gtd,
            config.tolerance_change,
            config.max_line_search,
        )?;
        evaluations += evals;
        let prev_f = f;
        let old_x = x.clone();
        for (xi, di) in x.iter_mut().zip(&d) {
            *xi += probe.t * di;
        }
        f = probe.f;
        let old_g = std::mem::replace(&mut g, probe.g);
        if let Some(r) = retract.as_mut() {
            r(&mut x);
            let (fr, gr) = checked(&x)?;
            evaluations += 1;
            f = fr;
            g = gr;
        }
        let step_max = x
            .iter()
            .zip(&old_x)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        prev = Some((old_x, old_g));
        if step_max <= config.tolerance_change || (f - prev_f).abs() < config.tolerance_change {
            break;
        }
    }
    let grad_norm = norm(&g);
    Ok(LbfgsOutcome {
        x,
        value: f,
        iterations,
        evaluations,
        grad_norm,
    })
}
