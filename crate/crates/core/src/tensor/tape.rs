use std::collections::HashMap;

use super::broadcast::Broadcast;
use super::gemm::{gemm, MatRef};
use super::{invalid, split_axis, ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of a batchnorm forward (biased variance).
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Copy, Debug)]
enum MatMulKind {
    // [.., m, k] x [k, n]
    RhsMatrix,
    // [m, k] x [.., k, n]
    LhsMatrix,
    // [.., m, k] x [.., k, n] with identical batch dims
    Batched,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var, MatMulKind),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    Huber(Var, f64),
    Softmax(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    MaxAxis(Var, usize, Vec<usize>),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Transpose(Var, usize, usize),
    Slice(Var, usize, usize),
    BatchNorm {
        input: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of executed operations; `backward` replays it in reverse.
///
/// A tape is single-writer: build it on one thread, then drop it. Parameters
/// are copied onto the tape the first time they are bound, so the
/// [`ParamStore`] stays untouched until [`Gradients`] are applied to it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

/// Result of a backward pass: one gradient buffer per tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to `v`; all-zero when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(&self.shapes[v.0], g.clone()).expect("grad shape"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Adds parameter gradients into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            match &self.grads[v.0] {
                Some(g) => store.accumulate_grad(id, g),
                None => store.accumulate_grad(id, &vec![0.0; self.shapes[v.0].iter().product()]),
            }
        }
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(invalid(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

pub fn huber(x: f64, beta: f64) -> f64 {
    let d = x.abs();
    if d < beta {
        0.5 * d * d / beta
    } else {
        d - 0.5 * beta
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// Binds a stored parameter onto this tape (once; later calls reuse it).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.requires_grad);
        self.bound.insert(id, v);
        v
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(shape_err("matmul", &ash, &bsh));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != k2 {
            return Err(shape_err("matmul", &ash, &bsh));
        }
        let (kind, batch_dims) = if bsh.len() == 2 {
            (MatMulKind::RhsMatrix, ash[..ash.len() - 2].to_vec())
        } else if ash.len() == 2 {
            (MatMulKind::LhsMatrix, bsh[..bsh.len() - 2].to_vec())
        } else if ash[..ash.len() - 2] == bsh[..bsh.len() - 2] {
            (MatMulKind::Batched, ash[..ash.len() - 2].to_vec())
        } else {
            return Err(shape_err("matmul", &ash, &bsh));
        };
        let batch: usize = batch_dims.iter().product();
        let mut out_shape = batch_dims;
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        match kind {
            MatMulKind::RhsMatrix => gemm(
                MatRef::row_major(ad, 0, batch * m, k),
                MatRef::row_major(bd, 0, k, n),
                &mut out,
                0,
                0.0,
            ),
            MatMulKind::LhsMatrix => {
                for bi in 0..batch {
                    gemm(
                        MatRef::row_major(ad, 0, m, k),
                        MatRef::row_major(bd, bi * k * n, k, n),
                        &mut out,
                        bi * m * n,
                        0.0,
                    )
                }
            }
            MatMulKind::Batched => {
                for bi in 0..batch {
                    gemm(
                        MatRef::row_major(ad, bi * m * k, m, k),
                        MatRef::row_major(bd, bi * k * n, k, n),
                        &mut out,
                        bi * m * n,
                        0.0,
                    )
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::MatMul(a, b, kind), rg))
    }

    // ----- elementwise binary (broadcasting) -----

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let bc = Broadcast::new(self.shape(a), self.shape(b))
            .ok_or_else(|| shape_err(op, self.shape(a), self.shape(b)))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; bc.numel()];
        bc.for_each(|o, l, r| out[o] = f(ad[l], bd[r]));
        Ok((Tensor::new(&bc.out_shape, out)?, self.any_grad(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    // ----- elementwise unary -----

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        let rg = self.requires_grad(a);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(invalid("log", "non-positive input"));
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        if p.fract() != 0.0 && self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(invalid("power", "negative base with non-integer exponent"));
        }
        Ok(self.unary(a, Op::Powf(a, p), |x| x.powf(p)))
    }

    /// Elementwise Huber penalty of `a`: quadratic `0.5·x²/β` for `|x| < β`,
    /// linear `|x| − 0.5·β` beyond.
    pub fn huber(&mut self, a: Var, beta: f64) -> Result<Var> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(invalid("huber", format!("beta must be positive, got {beta}")));
        }
        Ok(self.unary(a, Op::Huber(a, beta), |x| huber(x, beta)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or_else(|| invalid("softmax", "scalar input"))?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(a), rg))
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
        let mut s = shape.to_vec();
        if keepdim {
            s[axis] = 1;
        } else {
            s.remove(axis);
        }
        s
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("sum", &shape, axis)?;
        let (outer, dim, inner) = split_axis(&shape, axis);
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..dim {
                let base = (o * dim + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let rg = self.requires_grad(a);
        let t = Tensor::new(&Self::reduced_shape(&shape, axis, keepdim), out)?;
        Ok(self.push(t, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let s = self.sum_axis(a, axis, keepdim)?;
        let dim = self.shape(a)[axis] as f64;
        let t = self.value(s).map(|x| x / dim);
        // replace the sum node with a mean node so the tape holds one record
        let node = self.nodes.pop().expect("sum node");
        debug_assert!(matches!(node.op, Op::SumAxis(..)));
        let rg = node.requires_grad;
        Ok(self.push(t, Op::MeanAxis(a, axis), rg))
    }

    /// Maximum along `axis`. Ties send the gradient to the first maximal entry.
    pub fn max_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("max", &shape, axis)?;
        let (outer, dim, inner) = split_axis(&shape, axis);
        let d = self.value(a).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..dim {
                let base = (o * dim + j) * inner;
                for i in 0..inner {
                    if d[base + i] > out[o * inner + i] {
                        out[o * inner + i] = d[base + i];
                        arg[o * inner + i] = j;
                    }
                }
            }
        }
        let rg = self.requires_grad(a);
        let t = Tensor::new(&Self::reduced_shape(&shape, axis, keepdim), out)?;
        Ok(self.push(t, Op::MaxAxis(a, axis, arg), rg))
    }

    // ----- structural -----

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| invalid("concat", "no inputs"))?)
            .to_vec();
        check_axis("concat", &first, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Swaps two axes (materialized copy).
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("transpose", &shape, d0.max(d1))?;
        let (out_shape, out) = swap_axes(&shape, self.value(a).data(), d0, d1);
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Transpose(a, d0, d1), rg))
    }

    /// Narrows `axis` to `start..start + len`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("slice", &shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{} out of bounds for axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(&s, out)?, Op::Slice(a, axis, start), rg))
    }

    /// Normalizes every channel (last axis) over all leading positions using
    /// the batch's own statistics. No affine transform.
    pub fn batchnorm(&mut self, a: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().ok_or_else(|| invalid("batchnorm", "scalar input"))?;
        let d = self.value(a).data();
        let m = d.len() / c;
        let mut mean = vec![0.0; c];
        for row in d.chunks(c) {
            mean.iter_mut().zip(row).for_each(|(s, x)| *s += x);
        }
        mean.iter_mut().for_each(|s| *s /= m as f64);
        let mut var = vec![0.0; c];
        for row in d.chunks(c) {
            for j in 0..c {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|s| *s /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = d.to_vec();
        for row in xhat.chunks_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let t = Tensor::new(&shape, xhat.clone())?;
        let rg = self.requires_grad(a);
        let v = self.push(t, Op::BatchNorm { input: a, xhat, inv_std }, rg);
        Ok((v, BatchStats { mean, var, count: m }))
    }

    // ----- backward -----

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        if !self.requires_grad(loss) {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, g, lower);
        }
        let mut params: Vec<_> = self.bound.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort();
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params,
        })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b, kind) => self.backward_matmul(*a, *b, *kind, g, grads),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let bc = Broadcast::new(self.shape(*a), self.shape(*b)).expect("checked in forward");
                if let Some(ga) = self.grad_buf(grads, *a) {
                    bc.for_each(|o, l, _| ga[l] += g[o]);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    bc.for_each(|o, _, r| gb[r] += sign * g[o]);
                }
            }
            Op::Mul(a, b) => {
                let bc = Broadcast::new(self.shape(*a), self.shape(*b)).expect("checked in forward");
                let (ad, bd) = (val(*a), val(*b));
                if let Some(ga) = self.grad_buf(grads, *a) {
                    bc.for_each(|o, l, r| ga[l] += g[o] * bd[r]);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    bc.for_each(|o, l, r| gb[r] += g[o] * ad[l]);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for i in 0..g.len() {
                        // right-derivative at 0
                        if x[i] >= 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Huber(a, beta) => {
                let x = val(*a);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for i in 0..g.len() {
                        let d = if x[i].abs() < *beta { x[i] / beta } else { x[i].signum() };
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Exp(a) => {
                let y = node.value.data();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i];
                    }
                }
            }
            Op::Log(a) => {
                let x = val(*a);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] / x[i];
                    }
                }
            }
            Op::Powf(a, p) => {
                let x = val(*a);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * p * x[i].powf(p - 1.0);
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().expect("softmax rank");
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for r in 0..y.len() / cols {
                        let (ys, gs) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            ga[r * cols + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::MeanAll(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    let n = ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let (outer, dim, inner) = split_axis(self.shape(*a), *axis);
                let scale = if matches!(node.op, Op::MeanAxis(..)) { 1.0 / dim as f64 } else { 1.0 };
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for o in 0..outer {
                        for j in 0..dim {
                            let base = (o * dim + j) * inner;
                            for i in 0..inner {
                                ga[base + i] += scale * g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::MaxAxis(a, axis, arg) => {
                let (outer, dim, inner) = split_axis(self.shape(*a), *axis);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let j = arg[o * inner + i];
                            ga[(o * dim + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if let Some(gp) = self.grad_buf(grads, p) {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset..o * total * inner + offset + len];
                            gp[o * len..(o + 1) * len]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += len;
                }
            }
            Op::Transpose(a, d0, d1) => {
                let (_, back) = swap_axes(node.value.shape(), g, *d0, *d1);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y);
                }
            }
            Op::Slice(a, axis, start) => {
                let (outer, dim, inner) = split_axis(self.shape(*a), *axis);
                let len = node.value.shape()[*axis];
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for o in 0..outer {
                        let base = (o * dim + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        ga[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::BatchNorm { input, xhat, inv_std } => {
                let c = inv_std.len();
                let m = (g.len() / c) as f64;
                let mut mean_g = vec![0.0; c];
                let mut mean_gx = vec![0.0; c];
                for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        mean_g[j] += gr[j] / m;
                        mean_gx[j] += gr[j] * xr[j] / m;
                    }
                }
                if let Some(ga) = self.grad_buf(grads, *input) {
                    for (r, (gr, xr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            ga[r * c + j] += inv_std[j] * (gr[j] - mean_g[j] - xr[j] * mean_gx[j]);
                        }
                    }
                }
            }
        }
    }

    fn backward_matmul(&self, a: Var, b: Var, kind: MatMulKind, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let n = bsh[bsh.len() - 1];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        match kind {
            MatMulKind::RhsMatrix => {
                let rows = ad.len() / k;
                if let Some(ga) = self.grad_buf(grads, a) {
                    // dA = dC · Bᵀ
                    gemm(
                        MatRef::row_major(g, 0, rows, n),
                        MatRef::row_major(bd, 0, k, n).t(),
                        ga,
                        0,
                        1.0,
                    );
                }
                if let Some(gb) = self.grad_buf(grads, b) {
                    // dB = Aᵀ · dC
                    gemm(
                        MatRef::row_major(ad, 0, rows, k).t(),
                        MatRef::row_major(g, 0, rows, n),
                        gb,
                        0,
                        1.0,
                    );
                }
            }
            MatMulKind::LhsMatrix | MatMulKind::Batched => {
                let batch = g.len() / (m * n);
                let a_off = |bi: usize| if matches!(kind, MatMulKind::LhsMatrix) { 0 } else { bi * m * k };
                if let Some(ga) = self.grad_buf(grads, a) {
                    for bi in 0..batch {
                        gemm(
                            MatRef::row_major(g, bi * m * n, m, n),
                            MatRef::row_major(bd, bi * k * n, k, n).t(),
                            ga,
                            a_off(bi),
                            1.0,
                        );
                    }
                }
                if let Some(gb) = self.grad_buf(grads, b) {
                    for bi in 0..batch {
                        gemm(
                            MatRef::row_major(ad, a_off(bi), m, k).t(),
                            MatRef::row_major(g, bi * m * n, m, n),
                            gb,
                            bi * k * n,
                            1.0,
                        );
                    }
                }
            }
        }
    }

    /// Hash of every piecewise-linear branch decision on the tape (relu
    /// signs, max arguments). Two evaluations with equal signatures lie on
    /// the same smooth piece, so finite differences between them are valid.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => self.value(*a).data().iter().for_each(|&x| mix((x >= 0.0) as u64)),
                Op::Huber(a, beta) => self.value(*a).data().iter().for_each(|&x| mix((x.abs() < *beta) as u64 + 4)),
                Op::MaxAxis(_, _, arg) => arg.iter().for_each(|&j| mix(j as u64 + 2)),
                _ => {}
            }
        }
        h
    }
}

/// Swaps axes `d0` and `d1` of a row-major buffer; returns the new shape and data.
fn swap_axes(shape: &[usize], data: &[f64], d0: usize, d1: usize) -> (Vec<usize>, Vec<f64>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(d0, d1);
    if d0 == d1 {
        return (out_shape, data.to_vec());
    }
    let (lo, hi) = (d0.min(d1), d0.max(d1));
    let pre: usize = shape[..lo].iter().product();
    let a = shape[lo];
    let mid: usize = shape[lo + 1..hi].iter().product();
    let b = shape[hi];
    let post: usize = shape[hi + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    // in[p, i, m, j, q] -> out[p, j, m, i, q]
    for p in 0..pre {
        for i in 0..a {
            for mm in 0..mid {
                for j in 0..b {
                    let src = ((((p * a + i) * mid + mm) * b + j) * post) as usize;
                    let dst = ((((p * b + j) * mid + mm) * a + i) * post) as usize;
                    out[dst..dst + post].copy_from_slice(&data[src..src + post]);
                }
            }
        }
    }
    (out_shape, out)
}
