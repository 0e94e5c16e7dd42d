//! Append-only gradient tape.
//!
//! Every operation on a [`Var`] appends a node holding its value and operand
//! handles, so operands always precede their results. [`Tape::backward`]
//! walks the nodes once in reverse and accumulates gradients in that fixed
//! order, which makes results bit-reproducible.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use super::ops::{self, ConvGeom};
use super::{numel, Tensor, TensorError};
use crate::scalar::Scalar;

type Id = usize;

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Constant,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Div(Id, Id),
    BroadcastTo(Id),
    Scale(Id, S),
    Offset(Id),
    Exp(Id),
    Ln(Id),
    Sqrt(Id),
    Square(Id),
    Relu(Id),
    ClampMin(Id, S),
    Sum(Id),
    Mean(Id),
    SumAxis(Id, usize),
    MatMul(Id, Id),
    Transpose(Id),
    Reshape(Id),
    Conv2d {
        input: Id,
        weight: Id,
        bias: Option<Id>,
        geom: ConvGeom,
    },
    MaxPool2d {
        input: Id,
        argmax: Vec<usize>,
    },
    L2Normalize {
        input: Id,
        axis: usize,
        norms: Vec<S>,
    },
    PairwiseSqDist(Id, Id),
    Gather {
        input: Id,
        indices: Vec<usize>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass. Confined to one thread.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    consumed: Cell<bool>,
    check_finite: bool,
    non_finite: Cell<usize>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: Id,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradient buffers of the leaves reachable from a loss.
#[derive(Clone)]
pub struct Gradients<S> {
    by_leaf: HashMap<Id, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var<'_, S>) -> Option<&Tensor<S>> {
        self.by_leaf.get(&var.id)
    }

    /// Gradient of a leaf, or zeros if the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_, S>) -> Tensor<S> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            check_finite: false,
            non_finite: Cell::new(0),
        }
    }

    /// A tape that counts operations producing non-finite values, and
    /// panics on the first one in builds with debug assertions.
    pub fn with_finite_check() -> Self {
        Self {
            check_finite: true,
            ..Self::new()
        }
    }

    /// Number of recorded results containing NaN or infinity (finite-check mode only).
    pub fn non_finite_count(&self) -> usize {
        self.non_finite.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable input: gradients are reported for it.
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input: never accumulates gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Constant, false)
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        if self.check_finite && !value.all_finite() {
            self.non_finite.set(self.non_finite.get() + 1);
            debug_assert!(false, "non-finite value produced by {op:?}");
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[Id]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor<S>, op: Op<S>, operands: &[Id]) -> Var<'_, S> {
        let rg = self.requires(operands);
        self.push(value, op, rg)
    }

    /// Reverse pass from a scalar loss. A tape supports a single backward pass.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>, TensorError> {
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![S::one()]);
        let mut by_leaf = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                by_leaf.insert(
                    id,
                    Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"),
                );
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
        }
        Ok(Gradients { by_leaf })
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], id: Id, contrib: Vec<S>) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn backprop<S: Scalar>(
    nodes: &[Node<S>],
    node: &Node<S>,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let val = |i: Id| &nodes[i].value;
    let needs = |i: Id| nodes[i].requires_grad;
    let out_shape = node.value.shape();
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let negate = matches!(node.op, Op::Sub(..));
            if needs(*a) {
                accumulate(grads, *a, unbroadcast(g, val(*a).shape(), out_shape));
            }
            if needs(*b) {
                let mut gb = unbroadcast(g, val(*b).shape(), out_shape);
                if negate {
                    gb.iter_mut().for_each(|x| *x = -*x);
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let ma = ops::broadcast_map(va.shape(), out_shape);
            let mb = ops::broadcast_map(vb.shape(), out_shape);
            let div = matches!(node.op, Op::Div(..));
            if needs(*a) {
                let full: Vec<S> = g
                    .iter()
                    .zip(&mb)
                    .map(|(&gi, &j)| if div { gi / vb.data()[j] } else { gi * vb.data()[j] })
                    .collect();
                accumulate(grads, *a, ops::reduce_by_map(&full, &ma, va.len()));
            }
            if needs(*b) {
                let full: Vec<S> = g
                    .iter()
                    .enumerate()
                    .map(|(k, &gi)| {
                        let x = va.data()[ma[k]];
                        if div {
                            let y = vb.data()[mb[k]];
                            -gi * x / (y * y)
                        } else {
                            gi * x
                        }
                    })
                    .collect();
                accumulate(grads, *b, ops::reduce_by_map(&full, &mb, vb.len()));
            }
        }
        Op::BroadcastTo(a) => {
            accumulate(grads, *a, unbroadcast(g, val(*a).shape(), out_shape));
        }
        Op::Scale(a, s) => accumulate(grads, *a, g.iter().map(|&x| x * *s).collect()),
        Op::Offset(a) | Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
        Op::Exp(a) => {
            let y = node.value.data();
            accumulate(grads, *a, g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect());
        }
        Op::Ln(a) => {
            let x = val(*a).data();
            accumulate(grads, *a, g.iter().zip(x).map(|(&gi, &xi)| gi / xi).collect());
        }
        Op::Sqrt(a) => {
            let y = node.value.data();
            let two = S::one() + S::one();
            accumulate(
                grads,
                *a,
                g.iter().zip(y).map(|(&gi, &yi)| gi / (two * yi)).collect(),
            );
        }
        Op::Square(a) => {
            let x = val(*a).data();
            let two = S::one() + S::one();
            accumulate(
                grads,
                *a,
                g.iter().zip(x).map(|(&gi, &xi)| two * gi * xi).collect(),
            );
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            accumulate(
                grads,
                *a,
                g.iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > S::zero() { gi } else { S::zero() })
                    .collect(),
            );
        }
        Op::ClampMin(a, lo) => {
            let x = val(*a).data();
            accumulate(
                grads,
                *a,
                g.iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > *lo { gi } else { S::zero() })
                    .collect(),
            );
        }
        Op::Sum(a) => accumulate(grads, *a, vec![g[0]; val(*a).len()]),
        Op::Mean(a) => {
            let n = val(*a).len();
            accumulate(grads, *a, vec![g[0] / S::of(n as f64); n]);
        }
        Op::SumAxis(a, axis) => {
            let src = val(*a).shape();
            let (outer, len, inner) = ops::lanes(src, *axis);
            let mut d = vec![S::zero(); numel(src)];
            for o in 0..outer {
                for k in 0..len {
                    for i in 0..inner {
                        d[(o * len + k) * inner + i] = g[o * inner + i];
                    }
                }
            }
            accumulate(grads, *a, d);
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            if needs(*a) {
                accumulate(grads, *a, ops::matmul_bt(g, vb.data(), m, n, k));
            }
            if needs(*b) {
                accumulate(grads, *b, ops::matmul_at(va.data(), g, m, k, n));
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out_shape[0], out_shape[1]);
            accumulate(grads, *a, ops::transpose(g, r, c));
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let (dx, dw, db) =
                ops::conv2d_backward(geom, val(*input).data(), val(*weight).data(), g, needs(*input));
            if let Some(dx) = dx {
                accumulate(grads, *input, dx);
            }
            if needs(*weight) {
                accumulate(grads, *weight, dw);
            }
            if let Some(b) = bias {
                if needs(*b) {
                    accumulate(grads, *b, db);
                }
            }
        }
        Op::MaxPool2d { input, argmax } => {
            let mut d = vec![S::zero(); val(*input).len()];
            for (&gi, &src) in g.iter().zip(argmax) {
                d[src] += gi;
            }
            accumulate(grads, *input, d);
        }
        Op::L2Normalize { input, axis, norms } => {
            let x = val(*input);
            let d = ops::l2_normalize_backward(
                x.data(),
                node.value.data(),
                norms,
                g,
                x.shape(),
                *axis,
                S::of(crate::scalar::LOG_FLOOR),
            );
            accumulate(grads, *input, d);
        }
        Op::PairwiseSqDist(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, n, d) = (va.shape()[0], vb.shape()[0], va.shape()[1]);
            let (da, db) = ops::pairwise_sq_backward(va.data(), vb.data(), g, m, n, d);
            if needs(*a) {
                accumulate(grads, *a, da);
            }
            if needs(*b) {
                accumulate(grads, *b, db);
            }
        }
        Op::Gather { input, indices } => {
            let mut d = vec![S::zero(); val(*input).len()];
            for (&gi, &src) in g.iter().zip(indices) {
                d[src] += gi;
            }
            accumulate(grads, *input, d);
        }
    }
}

fn unbroadcast<S: Scalar>(g: &[S], src: &[usize], out: &[usize]) -> Vec<S> {
    if src == out {
        return g.to_vec();
    }
    ops::reduce_by_map(g, &ops::broadcast_map(src, out), numel(src))
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn value(&self) -> Ref<'t, Tensor<S>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor<S> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> S {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    fn same_tape(&self, other: &Var<'t, S>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(&self, op: Op<S>, f: impl Fn(S) -> S) -> Var<'t, S> {
        let value = self.value().map(f);
        self.tape.record(value, op, &[self.id])
    }

    fn elementwise(
        &self,
        other: Var<'t, S>,
        name: &'static str,
        op: Op<S>,
        f: impl Fn(S, S) -> S,
    ) -> Result<Var<'t, S>, TensorError> {
        self.same_tape(&other);
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape().to_vec(), data)?
            } else {
                let shape = ops::broadcast_shape(name, a.shape(), b.shape())?;
                let ma = ops::broadcast_map(a.shape(), &shape);
                let mb = ops::broadcast_map(b.shape(), &shape);
                let data = ma
                    .iter()
                    .zip(&mb)
                    .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
                    .collect();
                Tensor::new(shape, data)?
            }
        };
        Ok(self.tape.record(value, op, &[self.id, other.id]))
    }

    pub fn add(&self, other: Var<'t, S>) -> Result<Var<'t, S>, TensorError> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: Var<'t, S>) -> Result<Var<'t, S>, TensorError> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(&self, other: Var<'t, S>) -> Result<Var<'t, S>, TensorError> {
        self.elementwise(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn div(&self, other: Var<'t, S>) -> Result<Var<'t, S>, TensorError> {
        self.elementwise(other, "div", Op::Div(self.id, other.id), |x, y| x / y)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t, S>, TensorError> {
        let value = {
            let a = self.value();
            let target = ops::broadcast_shape("broadcast_to", a.shape(), shape)?;
            if target != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: a.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            let map = ops::broadcast_map(a.shape(), shape);
            Tensor::new(shape.to_vec(), map.iter().map(|&i| a.data()[i]).collect())?
        };
        Ok(self.tape.record(value, Op::BroadcastTo(self.id), &[self.id]))
    }

    pub fn scale(&self, s: S) -> Var<'t, S> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn neg(&self) -> Var<'t, S> {
        self.scale(-S::one())
    }

    /// `self + c` for a scalar constant.
    pub fn offset(&self, c: S) -> Var<'t, S> {
        self.unary(Op::Offset(self.id), |x| x + c)
    }

    pub fn exp(&self) -> Var<'t, S> {
        self.unary(Op::Exp(self.id), |x| x.exp())
    }

    /// Natural logarithm (no flooring; combine with [`Var::clamp_min`]).
    pub fn ln(&self) -> Var<'t, S> {
        self.unary(Op::Ln(self.id), |x| x.ln())
    }

    pub fn sqrt(&self) -> Var<'t, S> {
        self.unary(Op::Sqrt(self.id), |x| x.sqrt())
    }

    pub fn square(&self) -> Var<'t, S> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    /// Rectifier with subgradient 0 at 0.
    pub fn relu(&self) -> Var<'t, S> {
        self.unary(Op::Relu(self.id), |x| if x > S::zero() { x } else { S::zero() })
    }

    pub fn clamp_min(&self, lo: S) -> Var<'t, S> {
        self.unary(Op::ClampMin(self.id, lo), |x| if x > lo { x } else { lo })
    }

    pub fn sum(&self) -> Var<'t, S> {
        let total = self.value().data().iter().copied().sum();
        self.tape
            .record(Tensor::scalar(total), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t, S> {
        let value = {
            let v = self.value();
            let total: S = v.data().iter().copied().sum();
            total / S::of(v.len() as f64)
        };
        self.tape
            .record(Tensor::scalar(value), Op::Mean(self.id), &[self.id])
    }

    /// Sum along `axis`; the axis is kept with extent 1 when `keep_dim`.
    pub fn sum_axis(&self, axis: usize, keep_dim: bool) -> Result<Var<'t, S>, TensorError> {
        let value = {
            let v = self.value();
            if axis >= v.rank() {
                return Err(TensorError::BadShape {
                    op: "sum_axis",
                    shape: v.shape().to_vec(),
                    detail: format!("axis {axis} out of range"),
                });
            }
            let (outer, len, inner) = ops::lanes(v.shape(), axis);
            let mut data = vec![S::zero(); outer * inner];
            for o in 0..outer {
                for k in 0..len {
                    for i in 0..inner {
                        data[o * inner + i] += v.data()[(o * len + k) * inner + i];
                    }
                }
            }
            let mut shape = v.shape().to_vec();
            if keep_dim {
                shape[axis] = 1;
            } else {
                shape.remove(axis);
            }
            Tensor::new(shape, data)?
        };
        Ok(self.tape.record(value, Op::SumAxis(self.id, axis), &[self.id]))
    }

    pub fn matmul(&self, other: Var<'t, S>) -> Result<Var<'t, S>, TensorError> {
        self.same_tape(&other);
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::new(vec![m, n], ops::matmul(a.data(), b.data(), m, k, n))?
        };
        Ok(self
            .tape
            .record(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(&self) -> Result<Var<'t, S>, TensorError> {
        let value = {
            let a = self.value();
            if a.rank() != 2 {
                return Err(TensorError::BadShape {
                    op: "transpose",
                    shape: a.shape().to_vec(),
                    detail: "rank-2 tensor required".into(),
                });
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            Tensor::new(vec![c, r], ops::transpose(a.data(), r, c))?
        };
        Ok(self.tape.record(value, Op::Transpose(self.id), &[self.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, S>, TensorError> {
        let value = self.to_tensor().reshape(shape)?;
        Ok(self.tape.record(value, Op::Reshape(self.id), &[self.id]))
    }

    /// `[N,C,H,W]` convolved with `[O,C,kh,kw]`, plus an optional `[O]` bias.
    pub fn conv2d(
        &self,
        weight: Var<'t, S>,
        bias: Option<Var<'t, S>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, S>, TensorError> {
        self.same_tape(&weight);
        let (value, geom) = {
            let (x, w) = (self.value(), weight.value());
            if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] || stride == 0 {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: x.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                });
            }
            let (xs, ws) = (x.shape(), w.shape());
            let (h, wd) = (xs[2] + 2 * padding, xs[3] + 2 * padding);
            if h < ws[2] || wd < ws[3] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: xs.to_vec(),
                    rhs: ws.to_vec(),
                });
            }
            let geom = ConvGeom {
                batch: xs[0],
                in_ch: xs[1],
                height: xs[2],
                width: xs[3],
                out_ch: ws[0],
                kh: ws[2],
                kw: ws[3],
                stride,
                padding,
                out_h: (h - ws[2]) / stride + 1,
                out_w: (wd - ws[3]) / stride + 1,
            };
            let bias_ref = bias.map(|b| b.value());
            if let Some(b) = &bias_ref {
                if b.shape() != [ws[0]].as_slice() {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv2d bias",
                        lhs: b.shape().to_vec(),
                        rhs: vec![ws[0]],
                    });
                }
            }
            let data = ops::conv2d_forward(&geom, x.data(), w.data(), bias_ref.as_ref().map(|b| b.data()));
            (
                Tensor::new(vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w], data)?,
                geom,
            )
        };
        let mut operands = vec![self.id, weight.id];
        operands.extend(bias.map(|b| b.id));
        Ok(self.tape.record(
            value,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                geom,
            },
            &operands,
        ))
    }

    /// Non-overlapping `size x size` max pooling over `[N,C,H,W]`.
    pub fn maxpool2d(&self, size: usize) -> Result<Var<'t, S>, TensorError> {
        let (value, argmax) = {
            let x = self.value();
            if x.rank() != 4 || size == 0 || x.shape()[2] < size || x.shape()[3] < size {
                return Err(TensorError::BadShape {
                    op: "maxpool2d",
                    shape: x.shape().to_vec(),
                    detail: format!("cannot pool with window {size}"),
                });
            }
            let (data, argmax, [oh, ow]) = ops::maxpool_forward(x.data(), x.shape(), size);
            (
                Tensor::new(vec![x.shape()[0], x.shape()[1], oh, ow], data)?,
                argmax,
            )
        };
        Ok(self.tape.record(
            value,
            Op::MaxPool2d {
                input: self.id,
                argmax,
            },
            &[self.id],
        ))
    }

    /// Divides each lane along `axis` by its Euclidean norm (floored at 1e-12).
    pub fn l2_normalize(&self, axis: usize) -> Result<Var<'t, S>, TensorError> {
        let (value, norms) = {
            let x = self.value();
            if axis >= x.rank() {
                return Err(TensorError::BadShape {
                    op: "l2_normalize",
                    shape: x.shape().to_vec(),
                    detail: format!("axis {axis} out of range"),
                });
            }
            let (data, norms) = ops::l2_normalize_forward(
                x.data(),
                x.shape(),
                axis,
                S::of(crate::scalar::LOG_FLOOR),
            );
            (Tensor::new(x.shape().to_vec(), data)?, norms)
        };
        Ok(self.tape.record(
            value,
            Op::L2Normalize {
                input: self.id,
                axis,
                norms,
            },
            &[self.id],
        ))
    }

    /// `[m,d]` and `[n,d]` rows to the `[m,n]` matrix of squared Euclidean distances.
    pub fn pairwise_sq_distance(&self, other: Var<'t, S>) -> Result<Var<'t, S>, TensorError> {
        self.same_tape(&other);
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
                return Err(TensorError::ShapeMismatch {
                    op: "pairwise_sq_distance",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, n, d) = (a.shape()[0], b.shape()[0], a.shape()[1]);
            Tensor::new(
                vec![m, n],
                ops::pairwise_sq_forward(a.data(), b.data(), m, n, d),
            )?
        };
        Ok(self.tape.record(
            value,
            Op::PairwiseSqDist(self.id, other.id),
            &[self.id, other.id],
        ))
    }

    /// 1-D tensor of the elements at the given flat indices.
    pub fn gather(&self, indices: &[usize]) -> Result<Var<'t, S>, TensorError> {
        let value = {
            let x = self.value();
            if indices.is_empty() {
                return Err(TensorError::BadShape {
                    op: "gather",
                    shape: x.shape().to_vec(),
                    detail: "no indices".into(),
                });
            }
            let mut data = Vec::with_capacity(indices.len());
            for &i in indices {
                if i >= x.len() {
                    return Err(TensorError::IndexOutOfRange { index: i, len: x.len() });
                }
                data.push(x.data()[i]);
            }
            Tensor::from_vec(data)
        };
        Ok(self.tape.record(
            value,
            Op::Gather {
                input: self.id,
                indices: indices.to_vec(),
            },
            &[self.id],
        ))
    }
}
