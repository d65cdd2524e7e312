//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! execution order, so the node list is already topologically sorted.
//! [`Tape::backward`] walks it once in reverse. Broadcasting is limited to
//! scalar-with-tensor and equal shapes, plus the explicit row-vector ops
//! [`Var::add_row`] and [`Var::mul_row`].

use std::cell::{Ref, RefCell};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{self, Tensor};

/// Pointwise nonlinearities usable inside blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    /// ELU with α = 1.
    Elu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// `ln(softplus(x))`, finite for every finite `x`.
pub fn log_softplus(x: f64) -> f64 {
    if x < -30.0 {
        // softplus(x) = e^x (1 - e^x/2 + ...)
        x - 0.5 * x.exp()
    } else {
        softplus(x).ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Tanh,
    Relu,
    Elu,
    Sigmoid,
    Exp,
    Log,
    Square,
    Softplus,
    LogSoftplus,
    LogSigmoid,
    Scale(f64),
    Shift(f64),
    Powf(f64),
}

impl Unary {
    fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Elu => Activation::Elu.apply(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
            Unary::Softplus => softplus(x),
            Unary::LogSoftplus => log_softplus(x),
            Unary::LogSigmoid => -softplus(-x),
            Unary::Scale(c) => c * x,
            Unary::Shift(c) => x + c,
            Unary::Powf(c) => x.powf(c),
        }
    }

    /// Local derivative given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Square => 2.0 * x,
            Unary::Softplus => sigmoid(x),
            Unary::LogSoftplus => {
                if x < -30.0 {
                    1.0 - 0.5 * x.exp()
                } else {
                    sigmoid(x) / softplus(x)
                }
            }
            Unary::LogSigmoid => sigmoid(-x),
            Unary::Scale(c) => c,
            Unary::Shift(_) => 1.0,
            Unary::Powf(c) => c * x.powf(c - 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reduce {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Unary(usize, Unary),
    MatMul(usize, usize),
    Transpose(usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Reduce(usize, Reduce, Option<usize>),
    ConcatCols(Vec<usize>),
    Reshape(usize),
    /// Holds the symmetrized inverse of the input.
    LogDetSpd(usize, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Operation recorder. One tape per forward pass, confined to one thread.
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
        write!(f, "Var#{} {:?}", self.id, self.shape())
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

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Concatenates rank-2 vars with equal row counts along columns.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let nodes = self.nodes.borrow();
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (rows, _) = nodes[first.id].value.dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = nodes[p.id].value.dims2("concat_cols")?;
            if r != rows {
                return Err(Error::dim("concat_cols", &[rows], &[r]));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = nodes[p.id].value.data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        drop(nodes);
        let value = Tensor::matrix(rows, total, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Does not modify recorded values, so it may be called repeatedly.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss is not recorded on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf | Op::Constant => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate_broadcast(&mut grads, &nodes, *a, &g);
                    accumulate_broadcast(&mut grads, &nodes, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate_broadcast(&mut grads, &nodes, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    accumulate_broadcast(&mut grads, &nodes, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    let ga: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * bcast(bv, i))
                        .collect();
                    let gb: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * bcast(av, i))
                        .collect();
                    accumulate_broadcast(&mut grads, &nodes, *a, &ga);
                    accumulate_broadcast(&mut grads, &nodes, *b, &gb);
                }
                Op::Unary(a, f) => {
                    let x = nodes[*a].value.data();
                    let y = node.value.data();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(gi, (&xi, &yi))| gi * f.deriv(xi, yi))
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = dims(&nodes[*a].value);
                    let (_, n) = dims(&nodes[*b].value);
                    let ga = tensor::matmul_nt(&g, nodes[*b].value.data(), m, n, k);
                    let gb = tensor::matmul_tn(nodes[*a].value.data(), &g, m, k, n);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => {
                    let (r, c) = dims(&nodes[*a].value);
                    accumulate(&mut grads, *a, tensor::transpose(&g, c, r));
                }
                Op::AddRow(a, b) => {
                    let (_, c) = dims(&nodes[*a].value);
                    let mut gb = vec![0.0; c];
                    for row in g.chunks_exact(c) {
                        gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulRow(a, b) => {
                    let (_, c) = dims(&nodes[*a].value);
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    let mut ga = vec![0.0; g.len()];
                    let mut gb = vec![0.0; c];
                    for (r, row) in g.chunks_exact(c).enumerate() {
                        for j in 0..c {
                            ga[r * c + j] = row[j] * bv[j];
                            gb[j] += row[j] * av[r * c + j];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Reduce(a, kind, axis) => {
                    let input = &nodes[*a].value;
                    let ga = reduce_backward(input, *kind, *axis, &g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = dims(&node.value);
                    let mut offset = 0;
                    for &p in parts {
                        let (_, w) = dims(&nodes[p].value);
                        let mut gp = vec![0.0; rows * w];
                        for r in 0..rows {
                            gp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads, p, gp);
                        offset += w;
                    }
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, g),
                Op::LogDetSpd(a, inv) => {
                    let ga = inv.iter().map(|x| x * g[0]).collect();
                    accumulate(&mut grads, *a, ga);
                }
            }
        }

        let shapes = nodes[..=loss.id]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        // Only leaves keep their gradient; intermediates were consumed above.
        Ok(Gradients { grads, shapes })
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [r, c] => (*r, *c),
        _ => unreachable!("shape checked at record time"),
    }
}

fn bcast(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Sums `g` down to the parent's size when the parent was a broadcast scalar.
fn accumulate_broadcast(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: &[f64]) {
    if nodes[id].value.numel() == g.len() {
        accumulate(grads, id, g.to_vec());
    } else {
        accumulate(grads, id, vec![g.iter().sum()]);
    }
}

fn reduce_backward(input: &Tensor, kind: Reduce, axis: Option<usize>, g: &[f64]) -> Vec<f64> {
    let n = input.numel();
    match axis {
        None => {
            let s = match kind {
                Reduce::Sum => g[0],
                Reduce::Mean => g[0] / n as f64,
            };
            vec![s; n]
        }
        Some(axis) => {
            let (r, c) = dims(input);
            let count = if axis == 0 { r } else { c } as f64;
            let scale = match kind {
                Reduce::Sum => 1.0,
                Reduce::Mean => 1.0 / count,
            };
            let mut out = vec![0.0; n];
            for i in 0..r {
                for j in 0..c {
                    let gi = if axis == 0 { g[j] } else { g[i] };
                    out[i * c + j] = gi * scale;
                }
            }
            out
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when unreachable.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.by_id(var.id).unwrap_or_else(|| {
            let shape = var.shape();
            Tensor::zeros(&shape)
        })
    }

    /// Gradient by node id, `None` when the node was not reached.
    pub fn by_id(&self, id: usize) -> Option<Tensor> {
        let g = self.grads.get(id)?.as_ref()?;
        Tensor::new(self.shapes[id].clone(), g.clone()).ok()
    }
}

fn check_broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::dim(op, a.shape(), b.shape()))
    }
}

impl<'t> Var<'t> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the recorded value.
    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value(self) -> Tensor {
        self.value_ref().clone()
    }

    pub fn item(self) -> f64 {
        self.value_ref().data()[0]
    }

    pub fn shape(self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    fn same_tape(self, other: Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract(
                "operands recorded on different tapes".into(),
            ))
        }
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let value = {
            let a = self.value_ref();
            let b = other.value_ref();
            let shape = check_broadcast(name, &a, &b)?;
            let (ad, bd) = (a.data(), b.data());
            let n = ad.len().max(bd.len());
            let data = (0..n).map(|i| f(bcast(ad, i), bcast(bd, i))).collect();
            Tensor::new(shape, data)?
        };
        Ok(self.tape.push(value, op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    fn unary(self, f: Unary) -> Var<'t> {
        let value = self.value_ref().map(|x| f.eval(x));
        self.tape.push(value, Op::Unary(self.id, f))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    /// Subgradient 0 at the kink.
    pub fn relu(self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    pub fn elu(self) -> Var<'t> {
        self.unary(Unary::Elu)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        if let Some(bad) = self.value_ref().data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive argument {bad}"),
            });
        }
        Ok(self.unary(Unary::Log))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }

    /// `log(sigmoid(x))`, stable for large |x|.
    pub fn log_softplus(self) -> Var<'t> {
        self.unary(Unary::LogSoftplus)
    }

    pub fn log_sigmoid(self) -> Var<'t> {
        self.unary(Unary::LogSigmoid)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Unary::Scale(c))
    }

    pub fn shift(self, c: f64) -> Var<'t> {
        self.unary(Unary::Shift(c))
    }

    /// `x^c` for strictly positive `x`.
    pub fn powf(self, c: f64) -> Result<Var<'t>> {
        if let Some(bad) = self.value_ref().data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "powf",
                detail: format!("non-positive base {bad}"),
            });
        }
        Ok(self.unary(Unary::Powf(c)))
    }

    pub fn activate(self, act: Activation) -> Var<'t> {
        match act {
            Activation::Tanh => self.tanh(),
            Activation::Relu => self.relu(),
            Activation::Elu => self.elu(),
            Activation::Sigmoid => self.sigmoid(),
        }
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let value = self.value_ref().matmul(&other.value_ref())?;
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = self.value_ref().transpose()?;
        Ok(self.tape.push(value, Op::Transpose(self.id)))
    }

    fn row_op(
        self,
        row: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_tape(row)?;
        let a = self.value_ref();
        let b = row.value_ref();
        let (_, c) = a.dims2(name)?;
        if b.numel() != c {
            return Err(Error::dim(name, a.shape(), b.shape()));
        }
        let bd = b.data();
        let data = a
            .data()
            .chunks_exact(c)
            .flat_map(|r| r.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let value = self.row_op(row, "add_row", |x, y| x + y)?;
        Ok(self.tape.push(value, Op::AddRow(self.id, row.id)))
    }

    /// Multiplies every row of an `r×c` matrix elementwise by a length-`c` vector.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let value = self.row_op(row, "mul_row", |x, y| x * y)?;
        Ok(self.tape.push(value, Op::MulRow(self.id, row.id)))
    }

    fn reduce(self, kind: Reduce, axis: Option<usize>) -> Result<Var<'t>> {
        let value = {
            let t = self.value_ref();
            let div = |n: usize| match kind {
                Reduce::Sum => 1.0,
                Reduce::Mean => 1.0 / n as f64,
            };
            match axis {
                None => Tensor::scalar(t.sum() * div(t.numel())),
                Some(ax) => {
                    let (r, c) = match (t.shape(), ax) {
                        ([r, c], 0 | 1) => (*r, *c),
                        _ => return Err(Error::dim("reduce", t.shape(), &[ax])),
                    };
                    let d = t.data();
                    if ax == 0 {
                        let mut out = vec![0.0; c];
                        for row in d.chunks_exact(c) {
                            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                        }
                        out.iter_mut().for_each(|o| *o *= div(r));
                        Tensor::vector(out)
                    } else {
                        Tensor::vector(
                            d.chunks_exact(c)
                                .map(|row| row.iter().sum::<f64>() * div(c))
                                .collect(),
                        )
                    }
                }
            }
        };
        Ok(self.tape.push(value, Op::Reduce(self.id, kind, axis)))
    }

    pub fn sum(self) -> Var<'t> {
        self.reduce(Reduce::Sum, None)
            .expect("full reduction cannot fail")
    }

    pub fn mean(self) -> Var<'t> {
        self.reduce(Reduce::Mean, None)
            .expect("full reduction cannot fail")
    }

    /// Sum over `axis` of a rank-2 tensor.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(Reduce::Sum, Some(axis))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(Reduce::Mean, Some(axis))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape.to_vec())?;
        Ok(self.tape.push(value, Op::Reshape(self.id)))
    }

    /// `log det M` for symmetric positive-definite `M`.
    pub fn logdet_spd(self) -> Result<Var<'t>> {
        let (value, inv) = {
            let m = self.value_ref();
            let (r, c) = m.dims2("logdet_spd")?;
            if r != c {
                return Err(Error::dim("logdet_spd", m.shape(), &[c, r]));
            }
            let d = m.data();
            let scale = d.iter().fold(1.0f64, |acc, x| acc.max(x.abs()));
            for i in 0..r {
                for j in (i + 1)..r {
                    if (d[i * r + j] - d[j * r + i]).abs() > 1e-9 * scale {
                        return Err(Error::Contract(format!(
                            "logdet_spd input not symmetric at ({i},{j})"
                        )));
                    }
                }
            }
            let l = linalg::cholesky(d, r)?;
            (
                linalg::logdet_from_cholesky(&l, r),
                linalg::cholesky_inverse(&l, r),
            )
        };
        Ok(self
            .tape
            .push(Tensor::scalar(value), Op::LogDetSpd(self.id, inv)))
    }
}
