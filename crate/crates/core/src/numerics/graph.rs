//! Tape-based reverse-mode differentiation over whole tensors.
//!
//! A [`Graph`] records every value produced during a forward pass together
//! with the operation that produced it. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients. Parameters enter the tape through
//! [`Graph::param`]; frozen parameters become constant leaves and never
//! receive a gradient.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, LayerNormCache};
use super::param::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused operation with a hand-written backward pass. The forward value is
/// computed by the caller and handed to [`Graph::custom`].
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;

    /// Gradients for each input, in input order. `None` means no gradient
    /// flows into that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `b` is a single row repeated over the rows of `a`.
    Row,
    /// `b` is a single column repeated over the columns of `a`.
    Col,
    Scalar,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Exp,
    Log,
    Silu,
    Sigmoid,
    Softplus,
    Abs,
    Relu,
    Square,
    Recip,
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Binary(Binary, Bcast, Var, Var),
    Min(Var, Var),
    Max(Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Tensor),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm(Var, Var, Var, LayerNormCache),
    Conv1d(Var, Var, bool),
    Unfold(Var, usize),
    ReverseRows(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
    SumAll(Var),
    MeanRows(Var),
    NormalizeRows(Var),
    BceLogits(Var, Tensor),
    Custom(Arc<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn bcast_kind(a: &Tensor, b: &Tensor) -> Option<Bcast> {
    if a.shape() == b.shape() {
        return Some(Bcast::Same);
    }
    if b.len() == 1 {
        return Some(Bcast::Scalar);
    }
    let (m, n) = (a.rows(), a.cols());
    if a.rank() == 2 {
        if b.shape() == [1, n] || b.shape() == [n] {
            return Some(Bcast::Row);
        }
        if b.shape() == [m, 1] {
            return Some(Bcast::Col);
        }
    }
    None
}

#[inline]
fn bindex(kind: Bcast, i: usize, cols: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::Row => i % cols,
        Bcast::Col => i / cols,
        Bcast::Scalar => 0,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
        }
    }

    /// A graph that records values only; nothing requires a gradient.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf holding `value`.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// The leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, !p.frozen);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_a_bt(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulBt(a, b), ng))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = bcast_kind(ta, tb).ok_or_else(|| dim_err("elementwise", ta, tb))?;
        let cols = ta.cols();
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[bindex(bc, i, cols)];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Binary(kind, bc, a, b), ng))
    }

    /// `a + b`; `b` may broadcast as a row, a column or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), f64::min)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Min(a, b), ng))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), f64::max)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Max(a, b), ng))
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Silu => kernels::silu_scalar,
            Unary::Sigmoid => kernels::sigmoid_scalar,
            Unary::Softplus => kernels::softplus_scalar,
            Unary::Abs => f64::abs,
            Unary::Relu => |x| x.max(0.0),
            Unary::Square => |x| x * x,
            Unary::Recip => |x| 1.0 / x,
        };
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, Op::Unary(kind, a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(Unary::Silu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(Unary::Recip, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    /// `c − a`.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, c)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let out = self.value(a).zip_map(&c, |x, y| x * y)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::MulConst(a, c), ng))
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = kernels::softmax(x, x.rank().saturating_sub(1))?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::SoftmaxRows(a), ng))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !x.is_finite() {
            return Err(Error::Numeric {
                what: "log_softmax input".into(),
                step: 0,
            });
        }
        let n = x.cols();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::LogSoftmaxRows(a), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, cache) =
            kernels::layer_norm_cached(self.value(x), self.value(gain), self.value(bias))?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(out, Op::LayerNorm(x, gain, bias, cache), ng))
    }

    pub fn conv1d(&mut self, x: Var, kernel: Var, causal: bool) -> Result<Var> {
        let out = kernels::conv1d(self.value(x), self.value(kernel), causal)?;
        let ng = self.ng(x) || self.ng(kernel);
        Ok(self.push(out, Op::Conv1d(x, kernel, causal), ng))
    }

    pub fn unfold(&mut self, x: Var, width: usize) -> Result<Var> {
        let out = kernels::unfold(self.value(x), width)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Unfold(x, width), ng))
    }

    pub fn reverse_rows(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).reverse_rows()?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::ReverseRows(x), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, end)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceRows(x, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let [m, n] = t.dims2("select_rows")?;
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Shape {
                    op: "select_rows",
                    shape: t.shape().to_vec(),
                    reason: format!("row {r} out of range"),
                });
            }
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::new([rows.len(), n], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SelectRows(x, rows.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Transpose(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over rows: `[m×n] → [1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [m, n] = t.dims2("mean_rows")?;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m.max(1) as f64;
        }
        let out = Tensor::new([1, n], out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::MeanRows(x), ng))
    }

    /// Scales each row to unit L2 norm; zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let out = kernels::normalize_rows(self.value(x))?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::NormalizeRows(x), ng))
    }

    /// Elementwise binary cross-entropy of `logits` against fixed targets in
    /// `[0, 1]`, computed in the numerically stable form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let out = self.value(logits).zip_map(&targets, |z, y| {
            z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
        })?;
        let ng = self.ng(logits);
        Ok(self.push(out, Op::BceLogits(logits, targets), ng))
    }

    /// Records a fused op whose forward value was computed by the caller.
    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Var {
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(output, Op::Custom(op, inputs.to_vec()), ng)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter reached by the last backward.
    pub fn param_grads(&self) -> Gradients {
        let mut g = Gradients::default();
        for (&id, &v) in &self.params {
            if let Some(t) = self.grad(v) {
                g.map.insert(id, t.clone());
            }
        }
        g
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                shape: self.shape(loss).to_vec(),
                reason: "loss must be a scalar".into(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if nodes[a.0].needs_grad {
                    acc(*a, kernels::matmul_a_bt(g, val(*b))?);
                }
                if nodes[b.0].needs_grad {
                    acc(*b, kernels::matmul_at_b(val(*a), g)?);
                }
            }
            Op::MatMulBt(a, b) => {
                if nodes[a.0].needs_grad {
                    acc(*a, kernels::matmul(g, val(*b))?);
                }
                if nodes[b.0].needs_grad {
                    acc(*b, kernels::matmul_at_b(g, val(*a))?);
                }
            }
            Op::Binary(kind, bc, a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let cols = ta.cols();
                let ga = match kind {
                    Binary::Add | Binary::Sub => g.clone(),
                    Binary::Mul => Tensor::from_fn(ta.shape().to_vec(), |k| {
                        g.data()[k] * tb.data()[bindex(*bc, k, cols)]
                    }),
                };
                acc(*a, ga);
                if nodes[b.0].needs_grad {
                    let mut gb = Tensor::zeros(tb.shape().to_vec());
                    for (k, &gv) in g.data().iter().enumerate() {
                        let j = bindex(*bc, k, cols);
                        gb.data_mut()[j] += match kind {
                            Binary::Add => gv,
                            Binary::Sub => -gv,
                            Binary::Mul => gv * ta.data()[k],
                        };
                    }
                    acc(*b, gb);
                }
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(node.op, Op::Min(..));
                let (ta, tb) = (val(*a), val(*b));
                let pick_a = |k: usize| {
                    if is_min {
                        ta.data()[k] <= tb.data()[k]
                    } else {
                        ta.data()[k] >= tb.data()[k]
                    }
                };
                let ga = Tensor::from_fn(g.shape().to_vec(), |k| if pick_a(k) { g.data()[k] } else { 0.0 });
                let gb = Tensor::from_fn(g.shape().to_vec(), |k| if pick_a(k) { 0.0 } else { g.data()[k] });
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Unary(kind, a) => {
                let x = val(*a);
                let y = &node.value;
                let d = Tensor::from_fn(x.shape().to_vec(), |k| {
                    let (xv, yv, gv) = (x.data()[k], y.data()[k], g.data()[k]);
                    gv * match kind {
                        Unary::Exp => yv,
                        Unary::Log => 1.0 / xv,
                        Unary::Recip => -yv * yv,
                        Unary::Silu => kernels::silu_grad_scalar(xv),
                        Unary::Sigmoid => yv * (1.0 - yv),
                        Unary::Softplus => kernels::sigmoid_scalar(xv),
                        Unary::Abs => {
                            if xv > 0.0 {
                                1.0
                            } else if xv < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Relu => {
                            if xv > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Square => 2.0 * xv,
                    }
                });
                acc(*a, d);
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MulConst(a, c) => acc(*a, g.zip_map(c, |x, y| x * y)?),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let n = y.cols().max(1);
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (dv, yv) in drow.iter_mut().zip(yrow) {
                        *dv = yv * (*dv - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let n = y.cols().max(1);
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let s: f64 = drow.iter().sum();
                    for (dv, yv) in drow.iter_mut().zip(yrow) {
                        *dv -= yv.exp() * s;
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm(x, gain, bias, cache) => {
                let (dx, dg, db) = kernels::layer_norm_backward(cache, val(*gain), g);
                acc(*x, dx);
                acc(*gain, dg.reshape(val(*gain).shape().to_vec())?);
                acc(*bias, db.reshape(val(*bias).shape().to_vec())?);
            }
            Op::Conv1d(x, k, causal) => {
                let (dx, dk) = kernels::conv1d_backward(val(*x), val(*k), *causal, g);
                acc(*x, dx);
                acc(*k, dk);
            }
            Op::Unfold(x, w) => {
                let t = val(*x);
                acc(*x, kernels::unfold_backward(t.rows(), t.cols(), *w, g));
            }
            Op::ReverseRows(x) => acc(*x, g.reverse_rows()?),
            Op::SliceRows(x, start) => {
                let t = val(*x);
                let mut d = Tensor::zeros(t.shape().to_vec());
                let n = t.cols();
                d.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                acc(*x, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).len();
                    let d = Tensor::new(val(*p).shape().to_vec(), g.data()[offset..offset + len].to_vec())?;
                    offset += len;
                    acc(*p, d);
                }
            }
            Op::SelectRows(x, rows) => {
                let t = val(*x);
                let n = t.cols();
                let mut d = Tensor::zeros(t.shape().to_vec());
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        d.data_mut()[r * n + j] += g.data()[k * n + j];
                    }
                }
                acc(*x, d);
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(val(*x).shape().to_vec())?),
            Op::Transpose(x) => acc(*x, g.transpose()?),
            Op::SumAll(x) => acc(*x, Tensor::full(val(*x).shape().to_vec(), g.item())),
            Op::MeanRows(x) => {
                let t = val(*x);
                let (m, n) = (t.rows(), t.cols());
                let d = Tensor::from_fn(t.shape().to_vec(), |k| g.data()[k % n] / m as f64);
                acc(*x, d);
            }
            Op::NormalizeRows(x) => {
                let t = val(*x);
                let y = &node.value;
                let n = t.cols().max(1);
                let mut d = Tensor::zeros(t.shape().to_vec());
                for r in 0..t.rows() {
                    let xr = &t.data()[r * n..(r + 1) * n];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d.data_mut()[r * n + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                acc(*x, d);
            }
            Op::BceLogits(z, targets) => {
                let d = val(*z).zip_map(targets, |z, y| kernels::sigmoid_scalar(z) - y)?;
                acc(*z, d.zip_map(g, |a, b| a * b)?);
            }
            Op::Custom(op, inputs) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(&ins, &node.value, g)?;
                if gs.len() != inputs.len() {
                    return Err(Error::Invalid(format!(
                        "custom op `{}` returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (&v, gv) in inputs.iter().zip(gs) {
                    if let Some(gv) = gv {
                        acc(v, gv);
                    }
                }
            }
        }
        Ok(())
    }
}
