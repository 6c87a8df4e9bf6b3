//! Reverse-mode tape.
//!
//! Every primitive evaluates eagerly, appends one node holding its value and
//! the ids of its inputs, and `Tape::backward` replays the node list in
//! reverse. Node ids are assigned in creation order, which is already a
//! topological order, so replay needs no sort.

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tensor::{
    broadcast_shape, gemm, inverse_permutation, permute, split_axis, sum_to_shape, zip_broadcast,
    Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Exp,
    Ln,
    Sigmoid,
    Tanh,
    Gelu,
    LeakyRelu(f64),
    Softplus,
    Powf(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Unary(usize, Unary),
    SumAll(usize),
    SumAxis(usize, usize),
    Softmax(usize),
    LayerNorm(usize, f64),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Slice(usize, usize, usize),
    IndexSelect(usize, Arc<[usize]>),
    SegmentSum(usize, Arc<[usize]>),
    SegmentSoftmax(usize, Arc<[usize]>),
    BroadcastTo(usize),
    Dropout(usize, Arc<[f64]>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar with respect to every grad-requiring node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf; gradients are accumulated for it.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; no gradient buffer is ever allocated for it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
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

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(&self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|&i| self.requires_grad(i));
        Ok(self.push(value, op, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id].value;
        if root.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, gi) in input_grads(&nodes, node, &g)? {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn val(nodes: &[Node], id: usize) -> &Tensor {
    &nodes[id].value
}

/// Vector-Jacobian products of one node with respect to its inputs.
fn input_grads(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let y = &node.value;
    let out = match &node.op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(nodes, *a), val(nodes, *b));
            let k = bv.shape()[0];
            let n = bv.shape()[1];
            let m = av.len() / k;
            let mut ga = vec![0.0; av.len()];
            gemm(m, n, k, g.data(), n, 1, bv.data(), 1, n, &mut ga, false);
            let mut gb = vec![0.0; bv.len()];
            gemm(k, m, n, av.data(), 1, k, g.data(), n, 1, &mut gb, false);
            vec![
                (*a, Tensor::new(av.shape(), ga)?),
                (*b, Tensor::new(bv.shape(), gb)?),
            ]
        }
        Op::BatchMatMul(a, b) => {
            let (av, bv) = (val(nodes, *a), val(nodes, *b));
            let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = bv.shape()[2];
            let mut ga = vec![0.0; av.len()];
            let mut gb = vec![0.0; bv.len()];
            for t in 0..batch {
                let gs = &g.data()[t * m * n..(t + 1) * m * n];
                let as_ = &av.data()[t * m * k..(t + 1) * m * k];
                let bs = &bv.data()[t * k * n..(t + 1) * k * n];
                gemm(m, n, k, gs, n, 1, bs, 1, n, &mut ga[t * m * k..(t + 1) * m * k], false);
                gemm(k, m, n, as_, 1, k, gs, n, 1, &mut gb[t * k * n..(t + 1) * k * n], false);
            }
            vec![
                (*a, Tensor::new(av.shape(), ga)?),
                (*b, Tensor::new(bv.shape(), gb)?),
            ]
        }
        Op::Add(a, b) => vec![
            (*a, sum_to_shape(g, val(nodes, *a).shape())),
            (*b, sum_to_shape(g, val(nodes, *b).shape())),
        ],
        Op::Sub(a, b) => {
            let mut gb = sum_to_shape(g, val(nodes, *b).shape());
            gb.scale_assign(-1.0);
            vec![(*a, sum_to_shape(g, val(nodes, *a).shape())), (*b, gb)]
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(nodes, *a), val(nodes, *b));
            let ga = zip_broadcast("mul", g, bv, |x, y| x * y)?;
            let gb = zip_broadcast("mul", g, av, |x, y| x * y)?;
            vec![
                (*a, sum_to_shape(&ga, av.shape())),
                (*b, sum_to_shape(&gb, bv.shape())),
            ]
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(nodes, *a), val(nodes, *b));
            let ga = zip_broadcast("div", g, bv, |x, y| x / y)?;
            // d(a/b)/db = -y / b
            let gy = zip_broadcast("div", g, y, |x, q| -x * q)?;
            let gb = zip_broadcast("div", &gy, bv, |x, d| x / d)?;
            vec![
                (*a, sum_to_shape(&ga, av.shape())),
                (*b, sum_to_shape(&gb, bv.shape())),
            ]
        }
        Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
        Op::Offset(a) => vec![(*a, g.clone())],
        Op::Unary(a, kind) => {
            let x = val(nodes, *a);
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&gi, &xi), &yi)| gi * unary_derivative(*kind, xi, yi))
                .collect();
            vec![(*a, Tensor::new(x.shape(), data)?)]
        }
        Op::SumAll(a) => {
            let x = val(nodes, *a);
            vec![(*a, Tensor::full(x.shape(), g.item()))]
        }
        Op::SumAxis(a, axis) => {
            let x = val(nodes, *a);
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut data = vec![0.0; x.len()];
            for o in 0..outer {
                for l in 0..len {
                    let dst = (o * len + l) * inner;
                    data[dst..dst + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            vec![(*a, Tensor::new(x.shape(), data)?)]
        }
        Op::Softmax(a) => {
            let n = *y.shape().last().unwrap_or(&1);
            let mut data = vec![0.0; y.len()];
            for ((dst, gr), yr) in data
                .chunks_mut(n)
                .zip(g.data().chunks(n))
                .zip(y.data().chunks(n))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = yi * (gi - dot);
                }
            }
            vec![(*a, Tensor::new(y.shape(), data)?)]
        }
        Op::LayerNorm(a, eps) => {
            let x = val(nodes, *a);
            let n = *x.shape().last().unwrap_or(&1);
            let mut data = vec![0.0; x.len()];
            for ((dst, gr), xr) in data
                .chunks_mut(n)
                .zip(g.data().chunks(n))
                .zip(x.data().chunks(n))
            {
                let (mean, rstd) = row_moments(xr, *eps);
                let gmean = gr.iter().sum::<f64>() / n as f64;
                let gx_mean = gr
                    .iter()
                    .zip(xr)
                    .map(|(&gi, &xi)| gi * (xi - mean) * rstd)
                    .sum::<f64>()
                    / n as f64;
                for ((d, &gi), &xi) in dst.iter_mut().zip(gr).zip(xr) {
                    let xhat = (xi - mean) * rstd;
                    *d = rstd * (gi - gmean - xhat * gx_mean);
                }
            }
            vec![(*a, Tensor::new(x.shape(), data)?)]
        }
        Op::Reshape(a) => vec![(*a, g.clone().reshaped(val(nodes, *a).shape())?)],
        Op::Permute(a, axes) => vec![(*a, permute(g, &inverse_permutation(axes)))],
        Op::Concat(parts, axis) => {
            let (outer, _, inner) = split_axis(g.shape(), *axis);
            let total = g.shape()[*axis];
            let mut offset = 0;
            let mut res = Vec::with_capacity(parts.len());
            for &p in parts {
                let pv = val(nodes, p);
                let len = pv.shape()[*axis];
                let mut data = Vec::with_capacity(pv.len());
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    data.extend_from_slice(&g.data()[start..start + len * inner]);
                }
                offset += len;
                res.push((p, Tensor::new(pv.shape(), data)?));
            }
            res
        }
        Op::Slice(a, axis, start) => {
            let x = val(nodes, *a);
            let (outer, total, inner) = split_axis(x.shape(), *axis);
            let len = g.shape()[*axis];
            let mut data = vec![0.0; x.len()];
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                data[dst..dst + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*a, Tensor::new(x.shape(), data)?)]
        }
        Op::IndexSelect(a, idx) => {
            let x = val(nodes, *a);
            let row = x.len() / x.shape()[0];
            let mut data = vec![0.0; x.len()];
            for (r, &src) in idx.iter().enumerate() {
                for (d, s) in data[src * row..(src + 1) * row]
                    .iter_mut()
                    .zip(&g.data()[r * row..(r + 1) * row])
                {
                    *d += s;
                }
            }
            vec![(*a, Tensor::new(x.shape(), data)?)]
        }
        Op::SegmentSum(a, seg) => {
            let x = val(nodes, *a);
            let row = x.len() / x.shape()[0];
            let mut data = Vec::with_capacity(x.len());
            for &s in seg.iter() {
                data.extend_from_slice(&g.data()[s * row..(s + 1) * row]);
            }
            vec![(*a, Tensor::new(x.shape(), data)?)]
        }
        Op::SegmentSoftmax(a, seg) => {
            let row = y.len() / y.shape()[0];
            let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
            let mut dots = vec![0.0; n_seg * row];
            for (e, &s) in seg.iter().enumerate() {
                for j in 0..row {
                    dots[s * row + j] += g.data()[e * row + j] * y.data()[e * row + j];
                }
            }
            let mut data = vec![0.0; y.len()];
            for (e, &s) in seg.iter().enumerate() {
                for j in 0..row {
                    let i = e * row + j;
                    data[i] = y.data()[i] * (g.data()[i] - dots[s * row + j]);
                }
            }
            vec![(*a, Tensor::new(y.shape(), data)?)]
        }
        Op::BroadcastTo(a) => vec![(*a, sum_to_shape(g, val(nodes, *a).shape()))],
        Op::Dropout(a, mask) => {
            let data = g.data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
            vec![(*a, Tensor::new(g.shape(), data)?)]
        }
    };
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn apply_unary(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Gelu => gelu(x),
        Unary::LeakyRelu(s) => {
            if x > 0.0 {
                x
            } else {
                s * x
            }
        }
        Unary::Softplus => softplus(x),
        Unary::Powf(p) => x.powf(p),
    }
}

fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Exp => y,
        Unary::Ln => 1.0 / x,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Gelu => {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        }
        Unary::LeakyRelu(s) => {
            if x > 0.0 {
                1.0
            } else {
                s
            }
        }
        Unary::Softplus => sigmoid(x),
        Unary::Powf(p) => p * x.powf(p - 1.0),
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::Invalid {
            op,
            msg: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.value(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::Invalid {
                op: "binary",
                msg: "operands recorded on different tapes".into(),
            })
        }
    }

    /// `[.., m, k] · [k, n]`, or batched `[b, m, k] · [b, k, n]`.
    pub fn matmul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let (value, op) = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(rhs.id);
            let mismatch = || TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            };
            if a.rank() < 2 {
                return Err(mismatch());
            }
            match b.rank() {
                2 => {
                    let (k, n) = (b.shape()[0], b.shape()[1]);
                    if *a.shape().last().unwrap() != k {
                        return Err(mismatch());
                    }
                    let m = a.len() / k;
                    let mut c = vec![0.0; m * n];
                    gemm(m, k, n, a.data(), k, 1, b.data(), n, 1, &mut c, false);
                    let mut shape = a.shape().to_vec();
                    *shape.last_mut().unwrap() = n;
                    (Tensor::new(&shape, c)?, Op::MatMul(self.id, rhs.id))
                }
                3 if a.rank() == 3 => {
                    let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                    if b.shape()[0] != batch || b.shape()[1] != k {
                        return Err(mismatch());
                    }
                    let n = b.shape()[2];
                    let mut c = vec![0.0; batch * m * n];
                    for t in 0..batch {
                        gemm(
                            m,
                            k,
                            n,
                            &a.data()[t * m * k..],
                            k,
                            1,
                            &b.data()[t * k * n..],
                            n,
                            1,
                            &mut c[t * m * n..(t + 1) * m * n],
                            false,
                        );
                    }
                    (Tensor::new(&[batch, m, n], c)?, Op::BatchMatMul(self.id, rhs.id))
                }
                _ => return Err(mismatch()),
            }
        };
        self.tape.record("matmul", value, op, &[self.id, rhs.id])
    }

    fn binary(
        &self,
        name: &'static str,
        rhs: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let value = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(rhs.id);
            zip_broadcast(name, &a, &b, f)?
        };
        self.tape.record(name, value, op, &[self.id, rhs.id])
    }

    pub fn add(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary("add", rhs, |a, b| a + b, Op::Add(self.id, rhs.id))
    }

    pub fn sub(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary("sub", rhs, |a, b| a - b, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary("mul", rhs, |a, b| a * b, Op::Mul(self.id, rhs.id))
    }

    pub fn div(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary("div", rhs, |a, b| a / b, Op::Div(self.id, rhs.id))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        let value = self.tape.value(self.id).map(|x| x * c);
        self.tape.record("scale", value, Op::Scale(self.id, c), &[self.id])
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        let value = self.tape.value(self.id).map(|x| x + c);
        self.tape.record("add_scalar", value, Op::Offset(self.id), &[self.id])
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.mul(*self)
    }

    fn unary(&self, name: &'static str, kind: Unary) -> Result<Var<'t>> {
        let value = self.tape.value(self.id).map(|x| apply_unary(kind, x));
        self.tape.record(name, value, Op::Unary(self.id, kind), &[self.id])
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", Unary::Exp)
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        self.unary("ln", Unary::Ln)
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary("sigmoid", Unary::Sigmoid)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary("tanh", Unary::Tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Var<'t>> {
        self.unary("gelu", Unary::Gelu)
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Var<'t>> {
        self.unary("leaky_relu", Unary::LeakyRelu(slope))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Result<Var<'t>> {
        self.unary("softplus", Unary::Softplus)
    }

    pub fn powf(&self, p: f64) -> Result<Var<'t>> {
        self.unary("powf", Unary::Powf(p))
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let value = Tensor::scalar(self.tape.value(self.id).data().iter().sum());
        self.tape.record("sum", value, Op::SumAll(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.tape.value(self.id).len();
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value(self.id);
            check_axis("sum_axis", x.shape(), axis)?;
            let (outer, len, inner) = split_axis(x.shape(), axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = (o * len + l) * inner;
                    for (d, s) in data[o * inner..(o + 1) * inner]
                        .iter_mut()
                        .zip(&x.data()[src..src + inner])
                    {
                        *d += s;
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            shape.remove(axis);
            Tensor::new(&shape, data)?
        };
        self.tape.record("sum_axis", value, Op::SumAxis(self.id, axis), &[self.id])
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let len = {
            let x = self.tape.value(self.id);
            check_axis("mean_axis", x.shape(), axis)?;
            x.shape()[axis]
        };
        self.sum_axis(axis)?.scale(1.0 / len as f64)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value(self.id);
            let n = *x.shape().last().ok_or(TensorError::Invalid {
                op: "softmax",
                msg: "rank-0 input".into(),
            })?;
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            Tensor::new(x.shape(), data)?
        };
        self.tape.record("softmax", value, Op::Softmax(self.id), &[self.id])
    }

    /// Normalize the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value(self.id);
            let n = *x.shape().last().ok_or(TensorError::Invalid {
                op: "layer_norm",
                msg: "rank-0 input".into(),
            })?;
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(n) {
                let (mean, rstd) = row_moments(row, eps);
                for v in row.iter_mut() {
                    *v = (*v - mean) * rstd;
                }
            }
            Tensor::new(x.shape(), data)?
        };
        self.tape
            .record("layer_norm", value, Op::LayerNorm(self.id, eps), &[self.id])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.tape.value(self.id).clone().reshaped(shape)?;
        self.tape.record("reshape", value, Op::Reshape(self.id), &[self.id])
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value(self.id);
            let mut seen = vec![false; x.rank()];
            if axes.len() != x.rank() || axes.iter().any(|&a| a >= x.rank() || std::mem::replace(&mut seen[a], true)) {
                return Err(TensorError::Invalid {
                    op: "permute",
                    msg: format!("{axes:?} is not a permutation of rank {}", x.rank()),
                });
            }
            permute(&x, axes)
        };
        self.tape
            .record("permute", value, Op::Permute(self.id, axes.to_vec()), &[self.id])
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let r = self.tape.value(self.id).rank();
        if r < 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: "rank < 2".into(),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let tape = first.tape;
        for p in parts {
            first.same_tape(p)?;
        }
        let value = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| tape.value(p.id)).collect();
            let base = vals[0].shape().to_vec();
            check_axis("concat", &base, axis)?;
            let mut total = 0;
            for v in &vals {
                let s = v.shape();
                let ok = s.len() == base.len()
                    && s.iter().enumerate().all(|(i, &d)| i == axis || d == base[i]);
                if !ok {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: base,
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let (outer, _, inner) = split_axis(&base, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &vals {
                    let len = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::new(&shape, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.record("concat", value, Op::Concat(ids.clone(), axis), &ids)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value(self.id);
            check_axis("slice", x.shape(), axis)?;
            let (outer, total, inner) = split_axis(x.shape(), axis);
            if start > end || end > total {
                return Err(TensorError::Invalid {
                    op: "slice",
                    msg: format!("range {start}..{end} out of bounds for extent {total}"),
                });
            }
            let len = end - start;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let src = (o * total + start) * inner;
                data.extend_from_slice(&x.data()[src..src + len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = len;
            Tensor::new(&shape, data)?
        };
        self.tape
            .record("slice", value, Op::Slice(self.id, axis, start), &[self.id])
    }

    /// Gather rows along axis 0 (embedding lookup).
    pub fn index_select(&self, indices: Arc<[usize]>) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value(self.id);
            let rows = *x.shape().first().unwrap_or(&0);
            if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
                return Err(TensorError::Invalid {
                    op: "index_select",
                    msg: format!("index {bad} out of range for {rows} rows"),
                });
            }
            let row = if rows == 0 { 0 } else { x.len() / rows };
            let mut data = Vec::with_capacity(indices.len() * row);
            for &i in indices.iter() {
                data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = indices.len();
            Tensor::new(&shape, data)?
        };
        self.tape
            .record("index_select", value, Op::IndexSelect(self.id, indices), &[self.id])
    }

    /// Sum rows (axis 0) into `n_segments` buckets; row `e` goes to `segments[e]`.
    pub fn segment_sum(&self, segments: Arc<[usize]>, n_segments: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value(self.id);
            let rows = *x.shape().first().unwrap_or(&0);
            if segments.len() != rows || segments.iter().any(|&s| s >= n_segments) {
                return Err(TensorError::Invalid {
                    op: "segment_sum",
                    msg: format!("{} segment ids for {rows} rows / {n_segments} segments", segments.len()),
                });
            }
            let row = if rows == 0 { 0 } else { x.len() / rows };
            let mut data = vec![0.0; n_segments * row];
            for (e, &s) in segments.iter().enumerate() {
                for (d, v) in data[s * row..(s + 1) * row]
                    .iter_mut()
                    .zip(&x.data()[e * row..(e + 1) * row])
                {
                    *d += v;
                }
            }
            let mut shape = x.shape().to_vec();
            shape[0] = n_segments;
            Tensor::new(&shape, data)?
        };
        self.tape
            .record("segment_sum", value, Op::SegmentSum(self.id, segments), &[self.id])
    }

    /// Softmax over the rows sharing a segment id, independently for every
    /// trailing position.
    pub fn segment_softmax(&self, segments: Arc<[usize]>) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value(self.id);
            let rows = *x.shape().first().unwrap_or(&0);
            if segments.len() != rows {
                return Err(TensorError::Invalid {
                    op: "segment_softmax",
                    msg: format!("{} segment ids for {rows} rows", segments.len()),
                });
            }
            let row = if rows == 0 { 0 } else { x.len() / rows };
            let n_seg = segments.iter().copied().max().map_or(0, |m| m + 1);
            let mut max = vec![f64::NEG_INFINITY; n_seg * row];
            for (e, &s) in segments.iter().enumerate() {
                for j in 0..row {
                    let m = &mut max[s * row + j];
                    *m = m.max(x.data()[e * row + j]);
                }
            }
            let mut data = vec![0.0; x.len()];
            let mut total = vec![0.0; n_seg * row];
            for (e, &s) in segments.iter().enumerate() {
                for j in 0..row {
                    let v = (x.data()[e * row + j] - max[s * row + j]).exp();
                    data[e * row + j] = v;
                    total[s * row + j] += v;
                }
            }
            for (e, &s) in segments.iter().enumerate() {
                for j in 0..row {
                    data[e * row + j] /= total[s * row + j];
                }
            }
            Tensor::new(x.shape(), data)?
        };
        self.tape.record(
            "segment_softmax",
            value,
            Op::SegmentSoftmax(self.id, segments),
            &[self.id],
        )
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value(self.id);
            let out = broadcast_shape("broadcast_to", x.shape(), shape)?;
            if out != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: x.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            zip_broadcast("broadcast_to", &Tensor::zeros(shape), &x, |_, v| v)?
        };
        self.tape
            .record("broadcast_to", value, Op::BroadcastTo(self.id), &[self.id])
    }

    /// Inverted dropout with an explicit keep-mask; kept entries are scaled
    /// by `1 / (1 - p)`.
    pub fn dropout(&self, keep: &[bool], p: f64) -> Result<Var<'t>> {
        let value_len = self.tape.value(self.id).len();
        if keep.len() != value_len || !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("mask of {} for {value_len} values, p = {p}", keep.len()),
            });
        }
        let scale = 1.0 / (1.0 - p);
        let mask: Arc<[f64]> = keep.iter().map(|&k| if k { scale } else { 0.0 }).collect();
        let value = {
            let x = self.tape.value(self.id);
            let data = x.data().iter().zip(mask.iter()).map(|(a, m)| a * m).collect();
            Tensor::new(x.shape(), data)?
        };
        self.tape
            .record("dropout", value, Op::Dropout(self.id, mask), &[self.id])
    }
}
