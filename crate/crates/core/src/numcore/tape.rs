//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its inputs. [`Tape::backward`] walks the nodes in reverse creation order,
//! which is a valid topological order because inputs always precede outputs.
//! A tape is meant to live for one optimization step and then be dropped.

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};

use super::scalar::{gemm, Scalar};
use super::tensor::{
    axis_split, broadcast_shape, broadcast_zip, check_axis, reduce_to_shape, reduced_shape,
    Tensor,
};

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    AddScalar(usize),
    MulScalar(usize, T),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    Sqrt(usize),
    Square(usize),
    Clamp(usize, T, T),
    MaxScalar(usize, T),
    MatMul(usize, usize),
    SumAll(usize),
    SumAxis(usize, usize),
    /// Input, axis, and the softmax weights when the axis is innermost.
    LogSumExp(usize, usize, Option<Tensor<T>>),
    LogSoftmax(usize, usize),
    Concat(Vec<usize>, usize),
    Slice(usize, usize, usize),
    Transpose(usize),
    Reshape(usize),
    Diag(usize),
    /// Input and softmax weights over the off-diagonal entries of each row.
    OffDiagLogSumExp(usize, Tensor<T>),
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::Clamp(..) => "clamp",
            Op::MaxScalar(..) => "max_scalar",
            Op::MatMul(..) => "matmul",
            Op::SumAll(_) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::LogSumExp(..) => "logsumexp",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Diag(_) => "diag",
            Op::OffDiagLogSumExp(..) => "offdiag_logsumexp",
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    label: Option<String>,
    grad: Option<Tensor<T>>,
}

/// Recording of one forward computation.
pub struct Tape<T: Scalar = f64> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f64> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad, label: None, grad: None });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Trainable input; gradients are accumulated for it.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Named trainable input. The name shows up in non-finite gradient errors.
    pub fn param_named(&self, value: Tensor<T>, name: &str) -> Var<'_, T> {
        let v = self.param(value);
        self.nodes.borrow_mut()[v.id].label = Some(name.to_string());
        v
    }

    /// Input that receives no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reset accumulated gradients.
    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    /// Back-propagate from a scalar `loss`.
    ///
    /// Gradients add onto whatever earlier passes accumulated. Fails if the
    /// loss is not scalar or if any reached gradient is non-finite.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let adjoints = {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.id];
            if root.value.len() != 1 {
                return Err(Error::contract(format!(
                    "backward needs a scalar loss, got shape {:?}",
                    root.value.shape()
                )));
            }
            let mut adj: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
            adj[loss.id] = Some(Tensor::ones(root.value.shape().to_vec()));
            for id in (0..=loss.id).rev() {
                let Some(g) = adj[id].take() else { continue };
                if !nodes[id].requires_grad {
                    continue;
                }
                backprop_node(&nodes, id, &g, &mut adj)?;
                adj[id] = Some(g);
            }
            adj
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in adjoints.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut nodes[id];
            if !node.requires_grad {
                continue;
            }
            if !g.is_finite() {
                let what = match &node.label {
                    Some(l) => format!("gradient of parameter '{l}'"),
                    None => format!("gradient of node {id} ({})", node.op.name()),
                };
                return Err(Error::NonFinite(what));
            }
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut adj[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    g: &Tensor<T>,
    adj: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].requires_grad;
    let unary = |adj: &mut [Option<Tensor<T>>], x: usize, f: &dyn Fn(T, T, T) -> T| {
        if wants(x) {
            let d: Vec<T> = g
                .data()
                .iter()
                .zip(val(x).data())
                .zip(out.data())
                .map(|((&gi, &xi), &yi)| f(gi, xi, yi))
                .collect();
            accumulate(adj, x, Tensor::from_parts(val(x).shape().to_vec(), d));
        }
    };
    match nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if wants(a) {
                accumulate(adj, a, reduce_to_shape(g, val(a).shape()));
            }
            if wants(b) {
                accumulate(adj, b, reduce_to_shape(g, val(b).shape()));
            }
        }
        Op::Sub(a, b) => {
            if wants(a) {
                accumulate(adj, a, reduce_to_shape(g, val(a).shape()));
            }
            if wants(b) {
                accumulate(adj, b, reduce_to_shape(&g.map(|v| -v), val(b).shape()));
            }
        }
        Op::Mul(a, b) => {
            if wants(a) {
                let d = broadcast_zip(g, val(b), g.shape(), |gi, bi| gi * bi);
                accumulate(adj, a, reduce_to_shape(&d, val(a).shape()));
            }
            if wants(b) {
                let d = broadcast_zip(g, val(a), g.shape(), |gi, ai| gi * ai);
                accumulate(adj, b, reduce_to_shape(&d, val(b).shape()));
            }
        }
        Op::Div(a, b) => {
            let gb = broadcast_zip(g, val(b), g.shape(), |gi, bi| gi / bi);
            if wants(b) {
                let d = gb.zip_map(out, |q, y| -q * y)?;
                accumulate(adj, b, reduce_to_shape(&d, val(b).shape()));
            }
            if wants(a) {
                accumulate(adj, a, reduce_to_shape(&gb, val(a).shape()));
            }
        }
        Op::Neg(x) => unary(adj, x, &|gi, _, _| -gi),
        Op::AddScalar(x) => unary(adj, x, &|gi, _, _| gi),
        Op::MulScalar(x, c) => unary(adj, x, &|gi, _, _| gi * c),
        Op::Exp(x) => unary(adj, x, &|gi, _, y| gi * y),
        Op::Log(x) => unary(adj, x, &|gi, xi, _| gi / xi),
        Op::Tanh(x) => unary(adj, x, &|gi, _, y| gi * (T::one() - y * y)),
        Op::Relu(x) => unary(adj, x, &|gi, xi, _| if xi > T::zero() { gi } else { T::zero() }),
        Op::Softplus(x) => unary(adj, x, &|gi, xi, _| gi * sigmoid(xi)),
        Op::Sqrt(x) => unary(adj, x, &|gi, _, y| if y > T::zero() { gi / (y + y) } else { T::zero() }),
        Op::Square(x) => unary(adj, x, &|gi, xi, _| gi * (xi + xi)),
        Op::Clamp(x, lo, hi) => unary(adj, x, &|gi, xi, _| {
            if xi >= lo && xi <= hi {
                gi
            } else {
                T::zero()
            }
        }),
        Op::MaxScalar(x, floor) => {
            unary(adj, x, &|gi, xi, _| if xi >= floor { gi } else { T::zero() })
        }
        Op::MatMul(a, b) => {
            let (m, k) = val(a).dims2()?;
            let (_, n) = val(b).dims2()?;
            if wants(a) {
                let mut d = vec![T::zero(); m * k];
                gemm(g.data(), false, val(b).data(), true, &mut d, m, n, k, false);
                accumulate(adj, a, Tensor::from_parts(vec![m, k], d));
            }
            if wants(b) {
                let mut d = vec![T::zero(); k * n];
                gemm(val(a).data(), true, g.data(), false, &mut d, k, m, n, false);
                accumulate(adj, b, Tensor::from_parts(vec![k, n], d));
            }
        }
        Op::SumAll(x) => {
            if wants(x) {
                accumulate(adj, x, Tensor::full(val(x).shape().to_vec(), g.data()[0]));
            }
        }
        Op::SumAxis(x, axis) => {
            if wants(x) {
                accumulate(adj, x, g.expand_axis(val(x).shape(), axis));
            }
        }
        Op::LogSumExp(x, axis, ref weights) => {
            if wants(x) {
                let xs = val(x);
                if let Some(w) = weights {
                    let n = xs.shape()[axis];
                    let mut d = Vec::with_capacity(xs.len());
                    for (row, &gi) in w.data().chunks(n).zip(g.data()) {
                        d.extend(row.iter().map(|&wi| gi * wi));
                    }
                    accumulate(adj, x, Tensor::from_parts(xs.shape().to_vec(), d));
                    return Ok(());
                }
                let lse = out.expand_axis(xs.shape(), axis);
                let ge = g.expand_axis(xs.shape(), axis);
                let d: Vec<T> = xs
                    .data()
                    .iter()
                    .zip(lse.data())
                    .zip(ge.data())
                    .map(|((&xi, &l), &gi)| {
                        if l == T::neg_infinity() {
                            T::zero()
                        } else {
                            gi * (xi - l).exp()
                        }
                    })
                    .collect();
                accumulate(adj, x, Tensor::from_parts(xs.shape().to_vec(), d));
            }
        }
        Op::LogSoftmax(x, axis) => {
            if wants(x) {
                let shape = out.shape();
                let gsum = g.sum_axis(axis, true)?.expand_axis(shape, axis);
                let d: Vec<T> = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(gsum.data())
                    .map(|((&gi, &y), &s)| gi - y.exp() * s)
                    .collect();
                accumulate(adj, x, Tensor::from_parts(shape.to_vec(), d));
            }
        }
        Op::Concat(ref inputs, axis) => {
            let (outer, _, inner) = axis_split(out.shape(), axis);
            let total = out.shape()[axis];
            let mut start = 0;
            for &inp in inputs {
                let ext = val(inp).shape()[axis];
                if wants(inp) {
                    let mut d = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        d.extend_from_slice(&g.data()[base..base + ext * inner]);
                    }
                    accumulate(adj, inp, Tensor::from_parts(val(inp).shape().to_vec(), d));
                }
                start += ext;
            }
        }
        Op::Slice(x, axis, start) => {
            if wants(x) {
                let full = val(x).shape();
                let (outer, n, inner) = axis_split(full, axis);
                let ext = out.shape()[axis];
                let mut d = vec![T::zero(); val(x).len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * ext * inner;
                    d[dst..dst + ext * inner].copy_from_slice(&g.data()[src..src + ext * inner]);
                }
                accumulate(adj, x, Tensor::from_parts(full.to_vec(), d));
            }
        }
        Op::Transpose(x) => {
            if wants(x) {
                accumulate(adj, x, g.transpose()?);
            }
        }
        Op::Reshape(x) => {
            if wants(x) {
                accumulate(adj, x, g.reshape(val(x).shape().to_vec())?);
            }
        }
        Op::OffDiagLogSumExp(x, ref w) => {
            if wants(x) {
                let c = w.shape()[1];
                let mut d = Vec::with_capacity(w.len());
                for (row, &gi) in w.data().chunks(c).zip(g.data()) {
                    d.extend(row.iter().map(|&wi| gi * wi));
                }
                accumulate(adj, x, Tensor::from_parts(w.shape().to_vec(), d));
            }
        }
        Op::Diag(x) => {
            if wants(x) {
                let n = g.len();
                let mut d = vec![T::zero(); n * n];
                for i in 0..n {
                    d[i * n + i] = g.data()[i];
                }
                accumulate(adj, x, Tensor::from_parts(vec![n, n], d));
            }
        }
    }
    Ok(())
}

/// Log-sum-exp of each contiguous row of length `n`, and the softmax weights.
/// Rows that are entirely `-inf` get weight 0.
fn rowwise_softmax<T: Scalar>(data: &[T], n: usize) -> (Vec<T>, Vec<T>) {
    let mut lse = Vec::with_capacity(data.len() / n);
    let mut w = Vec::with_capacity(data.len());
    for row in data.chunks(n) {
        let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        if m == T::neg_infinity() {
            lse.push(m);
            w.extend(std::iter::repeat_n(T::zero(), n));
            continue;
        }
        let start = w.len();
        w.extend(row.iter().map(|&v| (v - m).exp()));
        let s: T = w[start..].iter().copied().sum();
        let inv = s.recip();
        w[start..].iter_mut().for_each(|e| *e = *e * inv);
        lse.push(m + s.ln());
    }
    (lse, w)
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar value; errors unless the var holds exactly one element.
    pub fn item(&self) -> Result<T> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes combined"
        );
    }

    fn unary_op(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let v = self.value().map(f);
        let rg = self.requires_grad();
        self.tape.push(v, op, rg)
    }

    fn binary_op(
        &self,
        other: &Var<'t, T>,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let value = {
            let a = self.value();
            let b = other.value();
            let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::Shape {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })?;
            broadcast_zip(&a, &b, &shape, f)
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value, op, rg))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_op(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_op(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_op(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_op(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.unary_op(Op::Neg(self.id), |v| -v)
    }

    pub fn add_scalar(&self, c: T) -> Var<'t, T> {
        self.unary_op(Op::AddScalar(self.id), |v| v + c)
    }

    pub fn mul_scalar(&self, c: T) -> Var<'t, T> {
        self.unary_op(Op::MulScalar(self.id, c), |v| v * c)
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary_op(Op::Exp(self.id), |v| v.exp())
    }

    pub fn ln(&self) -> Var<'t, T> {
        self.unary_op(Op::Log(self.id), |v| v.ln())
    }

    pub fn tanh(&self) -> Var<'t, T> {
        self.unary_op(Op::Tanh(self.id), |v| v.tanh_fast())
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary_op(Op::Relu(self.id), |v| v.max(T::zero()))
    }

    /// `log(1 + e^x)`, stable for large `|x|`.
    pub fn softplus(&self) -> Var<'t, T> {
        self.unary_op(Op::Softplus(self.id), softplus)
    }

    pub fn sqrt(&self) -> Var<'t, T> {
        self.unary_op(Op::Sqrt(self.id), |v| v.sqrt())
    }

    pub fn square(&self) -> Var<'t, T> {
        self.unary_op(Op::Square(self.id), |v| v * v)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: T, hi: T) -> Var<'t, T> {
        self.unary_op(Op::Clamp(self.id, lo, hi), |v| v.max(lo).min(hi))
    }

    /// `max(x, floor)` elementwise.
    pub fn max_scalar(&self, floor: T) -> Var<'t, T> {
        self.unary_op(Op::MaxScalar(self.id, floor), |v| v.max(floor))
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let value = self.value().matmul(&other.value())?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Var<'t, T> {
        let s = self.value().sum();
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.id), rg)
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value().len();
        self.sum().mul_scalar(T::lit(1.0 / n as f64))
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        let v = self.value().sum_axis(axis, keepdim)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(v, Op::SumAxis(self.id, axis), rg))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        let n = self.value().shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis, keepdim)?.mul_scalar(T::lit(1.0 / n as f64)))
    }

    /// Log-sum-exp along `axis`, max-shifted.
    pub fn logsumexp(&self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        let rg = self.requires_grad();
        let (v, weights) = {
            let x = self.value();
            check_axis(x.shape(), axis, "logsumexp")?;
            let (_, n, inner) = axis_split(x.shape(), axis);
            if rg && inner == 1 && n > 0 {
                let (lse, w) = rowwise_softmax(x.data(), n);
                let shape = reduced_shape(x.shape(), axis, keepdim);
                (Tensor::from_parts(shape, lse), Some(Tensor::from_parts(x.shape().to_vec(), w)))
            } else {
                (x.logsumexp_axis(axis, keepdim)?, None)
            }
        };
        Ok(self.tape.push(v, Op::LogSumExp(self.id, axis, weights), rg))
    }

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let v = {
            let x = self.value();
            let lse = x.logsumexp_axis(axis, true)?.expand_axis(x.shape(), axis);
            x.zip_map(&lse, |a, l| a - l)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(v, Op::LogSoftmax(self.id, axis), rg))
    }

    /// Softmax along `axis` (exp of [`log_softmax`](Self::log_softmax)).
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        Ok(self.log_softmax(axis)?.exp())
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let tape = first.tape;
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let base = vals[0].shape().to_vec();
            check_axis(&base, axis, "concat")?;
            let mut shape = base.clone();
            shape[axis] = 0;
            for v in &vals {
                let s = v.shape();
                let compatible = s.len() == base.len()
                    && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::Shape {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: s.to_vec(),
                    });
                }
                shape[axis] += s[axis];
            }
            let (outer, _, inner) = axis_split(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for v in &vals {
                    let chunk = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::from_parts(shape, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires(&ids);
        Ok(tape.push(value, Op::Concat(ids, axis), rg))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            check_axis(x.shape(), axis, "slice")?;
            if start > end || end > x.shape()[axis] {
                return Err(Error::contract(format!(
                    "slice {start}..{end} out of range for axis {axis} of {:?}",
                    x.shape()
                )));
            }
            let (outer, n, inner) = axis_split(x.shape(), axis);
            let ext = end - start;
            let mut data = Vec::with_capacity(outer * ext * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                data.extend_from_slice(&x.data()[base..base + ext * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = ext;
            Tensor::from_parts(shape, data)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Slice(self.id, axis, start), rg))
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let v = self.value().transpose()?;
        let rg = self.requires_grad();
        Ok(self.tape.push(v, Op::Transpose(self.id), rg))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let v = self.value().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(v, Op::Reshape(self.id), rg))
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&self) -> Result<Var<'t, T>> {
        let v = {
            let x = self.value();
            let (r, c) = x.dims2()?;
            if r != c {
                return Err(Error::contract(format!("diag of non-square {:?}", x.shape())));
            }
            Tensor::from_parts(vec![r], (0..r).map(|i| x.data()[i * c + i]).collect())
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(v, Op::Diag(self.id), rg))
    }

    /// Row-wise log-sum-exp of a square matrix skipping the diagonal:
    /// `out[i] = log Σ_{j≠i} exp(x[i][j])`.
    pub fn offdiag_logsumexp(&self) -> Result<Var<'t, T>> {
        let (lse, w) = {
            let x = self.value();
            let (r, c) = x.dims2()?;
            if r != c {
                return Err(Error::contract(format!("offdiag_logsumexp of non-square {:?}", x.shape())));
            }
            let mut lse = Vec::with_capacity(r);
            let mut w = Vec::with_capacity(r * c);
            for (i, row) in x.data().chunks(c).enumerate() {
                let mut m = T::neg_infinity();
                for (j, &v) in row.iter().enumerate() {
                    if j != i && v > m {
                        m = v;
                    }
                }
                let start = w.len();
                if m == T::neg_infinity() {
                    w.resize(start + c, T::zero());
                    lse.push(m);
                    continue;
                }
                // The diagonal term is computed with the rest and then dropped.
                w.extend(row.iter().map(|&v| (v - m).exp()));
                let wr = &mut w[start..];
                wr[i] = T::zero();
                let sum: T = wr.iter().copied().sum();
                let inv = sum.recip();
                wr.iter_mut().for_each(|e| *e = *e * inv);
                lse.push(m + sum.ln());
            }
            (Tensor::from_parts(vec![r], lse), Tensor::from_parts(vec![r, c], w))
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(lse, Op::OffDiagLogSumExp(self.id, w), rg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::new();
        let w = tape.param(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        tape.backward(w.sum()).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_twice_w() {
        let tape = Tape::new();
        let w = tape.param(t(&[3], &[1.0, -2.0, 0.25]));
        tape.backward(w.square().sum()).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[2.0, -4.0, 0.5]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let loss = w.square().sum();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[4.0, 8.0]);
        tape.zero_grad();
        assert!(w.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_grad() {
        let tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        tape.backward(w.mul(&c).unwrap().sum()).unwrap();
        assert!(c.grad().is_none());
        assert_eq!(w.grad().unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn non_finite_grad_names_parameter() {
        let tape = Tape::new();
        let w = tape.param_named(t(&[1], &[0.0]), "enc.w0");
        let err = tape.backward(w.ln().sum()).unwrap_err();
        assert!(err.to_string().contains("enc.w0"), "{err}");
    }

    #[test]
    fn broadcast_mismatch_is_shape_error() {
        let tape = Tape::new();
        let a = tape.param(Tensor::<f64>::zeros(vec![2, 3]));
        let b = tape.param(Tensor::<f64>::zeros(vec![2]));
        assert!(matches!(a.add(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn concat_slice_roundtrip() {
        let tape = Tape::new();
        let a = tape.param(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.param(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = c.slice(1, 1, 3).unwrap();
        assert_eq!(*s.value(), *b.value());
    }
}
