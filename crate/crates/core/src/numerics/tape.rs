// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records tensor-valued operations as they are evaluated. Each
//! call returns a [`Var`] handle; [`Tape::backward`] then walks the record in
//! reverse and accumulates adjoints for every node that depends on a
//! trainable leaf. Operations are coarse (matrix products, fused LayerNorm,
//! fused causal attention, fused softmax losses) so that the bookkeeping
//! stays negligible next to the arithmetic.
//!
//! ```
//! use tlens::numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::vector(vec![3.0]), true);
//! let y = tape.mul(x, x);
//! let y = tape.sum(y);
//! let g = tape.gradient(y, &[x]).unwrap();
//! assert_eq!(g[0].data(), &[6.0]);
//! ```

use super::kernels::{
    attention_backward, attention_forward, gelu, gelu_grad, layer_norm_backward,
    layer_norm_forward, log_softmax_row, LnCache, SeqLayout,
};
use super::tensor::{gemm, MatMut, MatRef};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    /// `a [m,k] * b [k,n]`
    MatMul(Var, Var),
    /// `a [m,k] * b[n,k]^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Broadcast a row vector over the rows of a matrix.
    AddRow(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: SeqLayout,
        heads: usize,
    },
    /// Gather rows of `table` by index.
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    /// Mean next-token cross entropy (nats) over rows with a target.
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
    },
    /// Mean over rows of `KL(p || softmax(logits))` in nats, `p` fixed.
    KlFromTarget {
        logits: Var,
        target_log_probs: Tensor<T>,
    },
    Sum(Var),
}

#[derive(Clone, Debug)]
enum Cache<T> {
    None,
    Ln(LnCache<T>),
    Probs(Vec<T>),
    LogProbs(Tensor<T>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    cache: Cache<T>,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient with respect to `v`; disconnected inputs yield zeros.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Record an input. `trainable` leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, Cache::None, trainable)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Overwrite a leaf value; call [`Tape::replay`] to propagate.
    pub fn set_leaf(&mut self, v: Var, value: Tensor<T>) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::InvalidArgument("set_leaf on a computed node".into()));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "leaf {:?} vs {:?}",
                node.value.shape(),
                value.shape()
            )));
        }
        node.value = value;
        Ok(())
    }

    /// Recompute every non-leaf node from its recorded inputs.
    pub fn replay(&mut self) {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let (value, cache) = self.eval(&op);
            self.nodes[i].value = value;
            self.nodes[i].cache = cache;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, cache: Cache<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            cache,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op<T>) -> Var {
        let requires_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        let (value, cache) = self.eval(&op);
        self.push(value, op, cache, requires_grad)
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Gelu(a) | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } | Op::KlFromTarget { logits, .. } => vec![*logits],
        }
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn eval(&self, op: &Op<T>) -> (Tensor<T>, Cache<T>) {
        match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => (self.val(*a).matmul(self.val(*b)).expect("checked"), Cache::None),
            Op::MatMulT(a, b) => (
                self.val(*a).matmul_t(self.val(*b)).expect("checked"),
                Cache::None,
            ),
            Op::Add(a, b) => (self.val(*a).add(self.val(*b)).expect("checked"), Cache::None),
            Op::Sub(a, b) => (self.val(*a).sub(self.val(*b)).expect("checked"), Cache::None),
            Op::Mul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
                (Tensor::from_vec(x.shape(), data).expect("checked"), Cache::None)
            }
            Op::AddRow(a, b) => {
                let mut out = self.val(*a).clone();
                out.add_row(self.val(*b).data());
                (out, Cache::None)
            }
            Op::Scale(a, s) => (self.val(*a).scale(*s), Cache::None),
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (y, c) = layer_norm_forward(
                    self.val(*x),
                    self.val(*gamma).data(),
                    self.val(*beta).data(),
                    *eps,
                );
                (y, Cache::Ln(c))
            }
            Op::Gelu(a) => (self.val(*a).map(gelu), Cache::None),
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
            } => {
                let (out, probs) =
                    attention_forward(self.val(*q), self.val(*k), self.val(*v), *layout, *heads);
                (out, Cache::Probs(probs))
            }
            Op::Gather { table, ids } => {
                let t = self.val(*table);
                let d = t.cols();
                let mut out = Tensor::zeros(&[ids.len(), d]);
                for (r, &id) in ids.iter().enumerate() {
                    out.row_mut(r).copy_from_slice(t.row(id));
                }
                (out, Cache::None)
            }
            Op::CrossEntropy { logits, targets } => {
                let z = self.val(*logits);
                let mut lp = Tensor::zeros(z.shape());
                let mut total = 0.0f64;
                let mut count = 0usize;
                for (r, tgt) in targets.iter().enumerate() {
                    log_softmax_row(z.row(r), lp.row_mut(r));
                    if let Some(t) = tgt {
                        total -= lp.row(r)[*t].as_f64();
                        count += 1;
                    }
                }
                let mean = if count == 0 { 0.0 } else { total / count as f64 };
                (Tensor::vector(vec![T::of(mean)]), Cache::LogProbs(lp))
            }
            Op::KlFromTarget {
                logits,
                target_log_probs,
            } => {
                let z = self.val(*logits);
                let mut lq = Tensor::zeros(z.shape());
                let mut total = 0.0f64;
                for r in 0..z.rows() {
                    log_softmax_row(z.row(r), lq.row_mut(r));
                    for (&lp, &l) in target_log_probs.row(r).iter().zip(lq.row(r)) {
                        let p = lp.exp();
                        if p > T::zero() {
                            total += (p * (lp - l)).as_f64();
                        }
                    }
                }
                let mean = total / z.rows().max(1) as f64;
                (Tensor::vector(vec![T::of(mean)]), Cache::LogProbs(lq))
            }
            Op::Sum(a) => (Tensor::vector(vec![self.val(*a).sum()]), Cache::None),
        }
    }

    fn check_cols(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.val(a).cols() != self.val(b).cols() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.val(a).shape(),
                self.val(b).shape()
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).cols(), self.val(b).rows(), "matmul inner dimension");
        self.record(Op::MatMul(a, b))
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).cols(), self.val(b).cols(), "matmul_t inner dimension");
        self.record(Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "add shapes");
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "sub shapes");
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "mul shapes");
        self.record(Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        assert_eq!(self.val(a).cols(), self.val(bias).len(), "bias width");
        self.record(Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.record(Op::Scale(a, s))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        assert_eq!(self.val(x).cols(), self.val(gamma).len(), "layer_norm gamma");
        assert_eq!(self.val(x).cols(), self.val(beta).len(), "layer_norm beta");
        self.record(Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.record(Op::Gelu(a))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: SeqLayout, heads: usize) -> Result<Var> {
        self.check_cols(q, k, "attention")?;
        self.check_cols(q, v, "attention")?;
        if self.val(q).rows() != layout.tokens() || self.val(q).cols() % heads != 0 {
            return Err(Error::Shape("attention layout".into()));
        }
        Ok(self.record(Op::Attention {
            q,
            k,
            v,
            layout,
            heads,
        }))
    }

    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let n = self.val(table).rows();
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::OutOfRange(format!("row {bad} of {n}")));
        }
        Ok(self.record(Op::Gather { table, ids }))
    }

    /// Mean cross entropy over rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        let z = self.val(logits);
        if targets.len() != z.rows() {
            return Err(Error::Shape("one target slot per row".into()));
        }
        if targets.iter().flatten().any(|&t| t >= z.cols()) {
            return Err(Error::OutOfRange("target id".into()));
        }
        Ok(self.record(Op::CrossEntropy { logits, targets }))
    }

    /// Mean distillation loss `KL(p || softmax(logits))` in nats, with the
    /// reference given as fixed log-probabilities.
    pub fn kl_from_target(&mut self, logits: Var, target_log_probs: Tensor<T>) -> Result<Var> {
        if self.val(logits).shape() != target_log_probs.shape() {
            return Err(Error::Shape("target log-probs must match logits".into()));
        }
        Ok(self.record(Op::KlFromTarget {
            logits,
            target_log_probs,
        }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.record(Op::Sum(a))
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.val(output).len() != 1 {
            return Err(Error::Shape("backward needs a scalar output".into()));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(self.val(output).shape(), T::one()));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad && i != output.0 {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Gradients of `output` with respect to each of `inputs`.
    pub fn gradient(&self, output: Var, inputs: &[Var]) -> Result<Vec<Tensor<T>>> {
        let g = self.backward(output)?;
        Ok(inputs.iter().map(|&v| g.wrt(v)).collect())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let acc = |v: Var, delta: Tensor<T>, grads: &mut [Option<Tensor<T>>]| {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.needs(*a) {
                    let mut da = Tensor::zeros(av.shape());
                    gemm(
                        T::one(),
                        MatRef::new(g.data(), m, n),
                        MatRef::new(bv.data(), k, n).t(),
                        T::zero(),
                        MatMut::new(da.data_mut(), m, k),
                    );
                    acc(*a, da, grads);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(bv.shape());
                    gemm(
                        T::one(),
                        MatRef::new(av.data(), m, k).t(),
                        MatRef::new(g.data(), m, n),
                        T::zero(),
                        MatMut::new(db.data_mut(), k, n),
                    );
                    acc(*b, db, grads);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.needs(*a) {
                    let mut da = Tensor::zeros(av.shape());
                    gemm(
                        T::one(),
                        MatRef::new(g.data(), m, n),
                        MatRef::new(bv.data(), n, k),
                        T::zero(),
                        MatMut::new(da.data_mut(), m, k),
                    );
                    acc(*a, da, grads);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(bv.shape());
                    gemm(
                        T::one(),
                        MatRef::new(g.data(), m, n).t(),
                        MatRef::new(av.data(), m, k),
                        T::zero(),
                        MatMut::new(db.data_mut(), n, k),
                    );
                    acc(*b, db, grads);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone(), grads);
                }
                if self.needs(*b) {
                    acc(*b, g.clone(), grads);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone(), grads);
                }
                if self.needs(*b) {
                    acc(*b, g.scale(-T::one()), grads);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    acc(*a, Tensor::from_vec(av.shape(), d).expect("same shape"), grads);
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    acc(*b, Tensor::from_vec(bv.shape(), d).expect("same shape"), grads);
                }
            }
            Op::AddRow(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone(), grads);
                }
                if self.needs(*b) {
                    let bv = self.val(*b);
                    let mut db = vec![T::zero(); bv.len()];
                    for r in 0..g.rows() {
                        for (x, &y) in db.iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    acc(*b, Tensor::from_vec(bv.shape(), db).expect("same shape"), grads);
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    acc(*a, g.scale(*s), grads);
                }
            }
            Op::LayerNorm { x, gamma, beta, .. } => {
                let Cache::Ln(c) = &node.cache else { unreachable!() };
                let (dx, dg, db) =
                    layer_norm_backward(self.val(*x), self.val(*gamma).data(), c, g);
                if self.needs(*x) {
                    acc(*x, dx, grads);
                }
                if self.needs(*gamma) {
                    let s = self.val(*gamma).shape().to_vec();
                    acc(*gamma, Tensor::from_vec(&s, dg).expect("width"), grads);
                }
                if self.needs(*beta) {
                    let s = self.val(*beta).shape().to_vec();
                    acc(*beta, Tensor::from_vec(&s, db).expect("width"), grads);
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let av = self.val(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&gy, &x)| gy * gelu_grad(x))
                        .collect();
                    acc(*a, Tensor::from_vec(av.shape(), d).expect("same shape"), grads);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
            } => {
                let Cache::Probs(p) = &node.cache else { unreachable!() };
                let (dq, dk, dv) = attention_backward(
                    self.val(*q),
                    self.val(*k),
                    self.val(*v),
                    p,
                    g,
                    *layout,
                    *heads,
                );
                if self.needs(*q) {
                    acc(*q, dq, grads);
                }
                if self.needs(*k) {
                    acc(*k, dk, grads);
                }
                if self.needs(*v) {
                    acc(*v, dv, grads);
                }
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let tv = self.val(*table);
                    let mut dt = Tensor::zeros(tv.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (x, &y) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    acc(*table, dt, grads);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.needs(*logits) {
                    let Cache::LogProbs(lp) = &node.cache else { unreachable!() };
                    let count = targets.iter().flatten().count().max(1);
                    let s = g.data()[0] / T::of_usize(count);
                    let mut dz = Tensor::zeros(lp.shape());
                    for (r, tgt) in targets.iter().enumerate() {
                        if let Some(t) = tgt {
                            let out = dz.row_mut(r);
                            for (o, &l) in out.iter_mut().zip(lp.row(r)) {
                                *o = l.exp() * s;
                            }
                            out[*t] -= s;
                        }
                    }
                    acc(*logits, dz, grads);
                }
            }
            Op::KlFromTarget {
                logits,
                target_log_probs,
            } => {
                if self.needs(*logits) {
                    let Cache::LogProbs(lq) = &node.cache else { unreachable!() };
                    let s = g.data()[0] / T::of_usize(lq.rows().max(1));
                    let mut dz = Tensor::zeros(lq.shape());
                    for r in 0..lq.rows() {
                        let out = dz.row_mut(r);
                        for ((o, &l), &lp) in out
                            .iter_mut()
                            .zip(lq.row(r))
                            .zip(target_log_probs.row(r))
                        {
                            *o = (l.exp() - lp.exp()) * s;
                        }
                    }
                    acc(*logits, dz, grads);
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let s = g.data()[0];
                    acc(*a, Tensor::full(self.val(*a).shape(), s), grads);
                }
            }
        }
    }
}

/// Central finite-difference gradient of a scalar function of one tensor.
pub fn finite_difference<F>(x: &Tensor<f64>, step: f64, mut f: F) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * step);
    }
    out
}

/// `max |a - b| / max(max |b|, floor)`.
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> f64 {
    let scale = b.data().iter().fold(0.0f64, |m, x| m.max(x.abs())).max(floor);
    a.max_abs_diff(b) / scale
}
