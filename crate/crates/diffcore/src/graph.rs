//! Define-by-run reverse-mode differentiation.
//!
//! Every primitive called on a [`Graph`] computes its value immediately and
//! appends a node to the tape. Operands always precede their consumers, so
//! the tape order is a valid topological order and [`Graph::backward`] is a
//! single reverse sweep.
//!
//! Binary elementwise primitives broadcast with the usual trailing-axis
//! rules (a single-element operand broadcasts against anything).

use crate::error::{DiffError, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Relu,
    Sigmoid,
    Softplus,
    Sin,
    Cos,
}

impl Unary {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
        }
    }

    /// d(output)/d(input) given the input `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
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
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    CumsumExclusive(Var),
    WeightedSum(Var, Var),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Constant,
    Parameter,
    Computed,
}

struct Node {
    value: Tensor,
    op: Op,
    kind: Kind,
    requires_grad: bool,
}

/// Tape of recorded primitives.
///
/// Parameter leaves keep an accumulated gradient across calls to
/// [`Graph::backward`] until [`Graph::zero_grad`] is called.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Kind::Constant, false)
    }

    /// A leaf whose adjoint is accumulated by [`Graph::backward`].
    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Kind::Parameter, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_parameter(&self, v: Var) -> bool {
        self.nodes.get(v.0).is_some_and(|n| n.kind == Kind::Parameter)
    }

    /// Accumulated gradient of a parameter leaf, if any backward pass has run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn push(&mut self, value: Tensor, op: Op, kind: Kind, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            kind,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(DiffError::NotRecorded(v.0))
        }
    }

    fn computed(&mut self, value: Tensor, op: Op, operands: &[Var]) -> Var {
        let requires_grad = operands.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, Kind::Computed, requires_grad)
    }

    fn mismatch(&self, op: &'static str, lhs: &[usize], rhs: &[usize]) -> DiffError {
        DiffError::ShapeMismatch {
            node: self.nodes.len(),
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    // ----- elementwise -------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(av.shape(), bv.shape())
            .ok_or_else(|| self.mismatch(kind.name(), av.shape(), bv.shape()))?;
        let n: usize = out_shape.iter().product();
        let ma = Mapping::new(&out_shape, av.shape());
        let mb = Mapping::new(&out_shape, bv.shape());
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<f64> = match (&ma, &mb) {
            (Mapping::Same, Mapping::Same) => {
                ad.iter().zip(bd).map(|(&x, &y)| kind.apply(x, y)).collect()
            }
            _ => (0..n)
                .map(|i| kind.apply(ad[ma.index(i)], bd[mb.index(i)]))
                .collect(),
        };
        let value = Tensor::new(out_shape, data)?;
        Ok(self.computed(value, Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        self.check(a)?;
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| kind.apply(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.computed(value, Op::Unary(kind, a), &[a]))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, a)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sin, a)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Cos, a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| x + c).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.computed(value, Op::AddScalar(a), &[a]))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.computed(value, Op::MulScalar(a, c), &[a]))
    }

    // ----- linear algebra & reductions ---------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k, n) = match (av.shape(), bv.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (l, r) => return Err(self.mismatch("matmul", l, r)),
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k, 1), bv.data(), (n, 1), &mut out);
        let value = Tensor::new([m, n], out)?;
        Ok(self.computed(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Sum of all elements, left to right, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = ordered_sum(self.nodes[a.0].value.data());
        Ok(self.computed(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let d = self.nodes[a.0].value.data();
        let s = ordered_sum(d) / d.len() as f64;
        Ok(self.computed(Tensor::scalar(s), Op::Mean(a), &[a]))
    }

    /// Sums over the last axis: `[.., n] -> [..]` (`[n] -> [1]`).
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let src = &self.nodes[a.0].value;
        let (rows, cols) = src.as_matrix_dims();
        let data: Vec<f64> = if cols == 0 {
            vec![0.0; rows]
        } else {
            src.data().chunks(cols).map(ordered_sum).collect()
        };
        let shape = match src.shape() {
            [] | [_] => vec![1],
            s => s[..s.len() - 1].to_vec(),
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.computed(value, Op::SumLast(a), &[a]))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let Some(&first) = parts.first() else {
            return Err(self.mismatch("concat", &[], &[]));
        };
        let lead: Vec<usize> = {
            let s = self.nodes[first.0].value.shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                let fs = self.nodes[first.0].value.shape().to_vec();
                return Err(self.mismatch("concat", &fs, s));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        Ok(self.computed(value, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let src = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != src.len() {
            return Err(self.mismatch("reshape", src.shape(), shape));
        }
        let value = src.clone().reshaped(shape.to_vec())?;
        Ok(self.computed(value, Op::Reshape(a), &[a]))
    }

    /// Exclusive prefix sum along the last axis: `y[.., j] = sum_{k<j} x[.., k]`.
    pub fn cumsum_exclusive(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let src = &self.nodes[a.0].value;
        let (_, cols) = src.as_matrix_dims();
        let mut data = Vec::with_capacity(src.len());
        if cols > 0 {
            for row in src.data().chunks(cols) {
                let mut acc = 0.0;
                for &x in row {
                    data.push(acc);
                    acc += x;
                }
            }
        }
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.computed(value, Op::CumsumExclusive(a), &[a]))
    }

    /// `weights [r, s]`, `values [r, s, c]` -> `[r, c]` with
    /// `out[i, k] = sum_j weights[i, j] * values[i, j, k]`.
    pub fn weighted_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        self.check(weights)?;
        self.check(values)?;
        let (wv, vv) = (&self.nodes[weights.0].value, &self.nodes[values.0].value);
        let (r, s, c) = match (wv.shape(), vv.shape()) {
            ([r, s], [r2, s2, c]) if r == r2 && s == s2 => (*r, *s, *c),
            (l, rr) => return Err(self.mismatch("weighted_sum", l, rr)),
        };
        let (w, v) = (wv.data(), vv.data());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let o = &mut out[i * c..(i + 1) * c];
            for j in 0..s {
                let wij = w[i * s + j];
                let vrow = &v[(i * s + j) * c..(i * s + j + 1) * c];
                for (ok, &vk) in o.iter_mut().zip(vrow) {
                    *ok += wij * vk;
                }
            }
        }
        let value = Tensor::new([r, c], out)?;
        Ok(self.computed(
            value,
            Op::WeightedSum(weights, values),
            &[weights, values],
        ))
    }

    // ----- reverse sweep -----------------------------------------------

    /// Accumulates d(output)/d(leaf) into every parameter leaf.
    ///
    /// Parameters unreachable from `output` end up with a zero gradient.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        self.check(output)?;
        let out_shape = self.nodes[output.0].value.shape();
        if self.nodes[output.0].value.len() != 1 {
            return Err(DiffError::NonScalarOutput(out_shape.to_vec()));
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if node.kind == Kind::Parameter {
                        let slot = self.grads[idx].get_or_insert_with(|| vec![0.0; g.len()]);
                        for (s, x) in slot.iter_mut().zip(&g) {
                            *s += x;
                        }
                    }
                }
                op => self.propagate(op, idx, &g, &mut adj),
            }
        }

        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.kind == Kind::Parameter && grad.is_none() {
                *grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[idx].value;
        match *op {
            Op::Leaf => unreachable!(),
            Op::Binary(kind, a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let ma = Mapping::new(out.shape(), av.shape());
                let mb = Mapping::new(out.shape(), bv.shape());
                let (ad, bd) = (av.data(), bv.data());
                if self.wants(a) {
                    let ga = slot(adj, a, ad.len());
                    for (i, &gi) in g.iter().enumerate() {
                        let (ia, ib) = (ma.index(i), mb.index(i));
                        ga[ia] += gi * match kind {
                            Binary::Add | Binary::Sub => 1.0,
                            Binary::Mul => bd[ib],
                            Binary::Div => 1.0 / bd[ib],
                        };
                    }
                }
                if self.wants(b) {
                    let gb = slot(adj, b, bd.len());
                    for (i, &gi) in g.iter().enumerate() {
                        let (ia, ib) = (ma.index(i), mb.index(i));
                        gb[ib] += gi * match kind {
                            Binary::Add => 1.0,
                            Binary::Sub => -1.0,
                            Binary::Mul => ad[ia],
                            Binary::Div => -ad[ia] / (bd[ib] * bd[ib]),
                        };
                    }
                }
            }
            Op::Unary(kind, a) => {
                let x = self.nodes[a.0].value.data();
                let ga = slot(adj, a, x.len());
                for (((s, &gi), &xi), &yi) in ga.iter_mut().zip(g).zip(x).zip(out.data()) {
                    *s += gi * kind.derivative(xi, yi);
                }
            }
            Op::AddScalar(a) => {
                let ga = slot(adj, a, g.len());
                ga.iter_mut().zip(g).for_each(|(s, x)| *s += x);
            }
            Op::MulScalar(a, c) => {
                let ga = slot(adj, a, g.len());
                ga.iter_mut().zip(g).for_each(|(s, x)| *s += c * x);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.wants(a) {
                    // dA = G * B^T
                    let ga = slot(adj, a, m * k);
                    gemm(m, n, k, g, (n, 1), bv.data(), (1, n), ga);
                }
                if self.wants(b) {
                    // dB = A^T * G
                    let gb = slot(adj, b, k * n);
                    gemm(k, m, n, av.data(), (1, k), g, (n, 1), gb);
                }
            }
            Op::Sum(a) => {
                let len = self.nodes[a.0].value.len();
                let ga = slot(adj, a, len);
                ga.iter_mut().for_each(|s| *s += g[0]);
            }
            Op::Mean(a) => {
                let len = self.nodes[a.0].value.len();
                let scale = g[0] / len as f64;
                let ga = slot(adj, a, len);
                ga.iter_mut().for_each(|s| *s += scale);
            }
            Op::SumLast(a) => {
                let src = &self.nodes[a.0].value;
                let (_, cols) = src.as_matrix_dims();
                let ga = slot(adj, a, src.len());
                if cols > 0 {
                    for (row, &gi) in ga.chunks_mut(cols).zip(g) {
                        row.iter_mut().for_each(|s| *s += gi);
                    }
                }
            }
            Op::Concat(ref parts) => {
                let total = *out.shape().last().unwrap();
                let rows = out.len() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = *self.nodes[p.0].value.shape().last().unwrap();
                    if self.wants(p) {
                        let gp = slot(adj, p, rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            for (s, x) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *s += x;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => {
                let ga = slot(adj, a, g.len());
                ga.iter_mut().zip(g).for_each(|(s, x)| *s += x);
            }
            Op::CumsumExclusive(a) => {
                let (_, cols) = out.as_matrix_dims();
                let ga = slot(adj, a, g.len());
                if cols > 0 {
                    for (grow, srow) in g.chunks(cols).zip(ga.chunks_mut(cols)) {
                        // dx[k] = sum_{j > k} g[j]
                        let mut acc = 0.0;
                        for k in (0..cols).rev() {
                            srow[k] += acc;
                            acc += grow[k];
                        }
                    }
                }
            }
            Op::WeightedSum(w, v) => {
                let (wv, vv) = (&self.nodes[w.0].value, &self.nodes[v.0].value);
                let (r, s, c) = (vv.shape()[0], vv.shape()[1], vv.shape()[2]);
                if self.wants(w) {
                    let gw = slot(adj, w, r * s);
                    let vd = vv.data();
                    for i in 0..r {
                        let gi = &g[i * c..(i + 1) * c];
                        for j in 0..s {
                            let vrow = &vd[(i * s + j) * c..(i * s + j + 1) * c];
                            gw[i * s + j] += gi.iter().zip(vrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if self.wants(v) {
                    let gv = slot(adj, v, r * s * c);
                    let wd = wv.data();
                    for i in 0..r {
                        let gi = &g[i * c..(i + 1) * c];
                        for j in 0..s {
                            let wij = wd[i * s + j];
                            let dst = &mut gv[(i * s + j) * c..(i * s + j + 1) * c];
                            for (d, &gk) in dst.iter_mut().zip(gi) {
                                *d += wij * gk;
                            }
                        }
                    }
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Fixed left-to-right summation.
pub fn ordered_sum(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc, &x| acc + x)
}

/// `c += a * b` with explicit (row, column) strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the given
    // dimensions and strides (checked above in debug builds, and by the
    // shape checks of every caller).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let a_len: usize = a.iter().product();
    let b_len: usize = b.iter().product();
    if a == b {
        return Some(a.to_vec());
    }
    if b_len == 1 {
        return Some(a.to_vec());
    }
    if a_len == 1 {
        return Some(b.to_vec());
    }
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How a flat index into a broadcast output maps back to an operand.
enum Mapping {
    Same,
    Scalar,
    Modulo(usize),
    General(Vec<usize>),
}

impl Mapping {
    fn new(out: &[usize], operand: &[usize]) -> Self {
        let n: usize = operand.iter().product();
        if out == operand {
            return Mapping::Same;
        }
        if n == 1 {
            return Mapping::Scalar;
        }
        let trimmed: Vec<usize> = operand.iter().copied().skip_while(|&d| d == 1).collect();
        if out.len() >= trimmed.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return Mapping::Modulo(n);
        }
        // General case: materialize the index map.
        let rank = out.len();
        let padded: Vec<usize> = std::iter::repeat_n(1, rank - operand.len())
            .chain(operand.iter().copied())
            .collect();
        let mut strides = vec![0; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            strides[i] = if padded[i] == 1 { 0 } else { acc };
            acc *= padded[i];
        }
        let total: usize = out.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0; rank];
        for _ in 0..total {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Mapping::General(map)
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Mapping::Same => i,
            Mapping::Scalar => 0,
            Mapping::Modulo(n) => i % n,
            Mapping::General(map) => map[i],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_and_relu_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, -3.2, 3.2]));
        let s = g.sigmoid(x).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.2]);
    }

    #[test]
    fn matmul_of_ones() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full([2, 3], 1.0));
        let b = g.constant(Tensor::full([3, 4], 1.0));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 4]);
        assert!(g.value(c).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn matmul_shape_error_names_node() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        match g.matmul(a, b) {
            Err(DiffError::ShapeMismatch { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::scalar(2.0));
        let y = g.square(x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[8.0]);
        g.zero_grad();
        assert_eq!(g.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn constant_graph_has_zero_gradients() {
        let mut g = Graph::new();
        let w = g.parameter(Tensor::full([2], 1.0));
        let c = g.constant(Tensor::full([2], 4.0));
        let y = g.sum(c).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        assert!(matches!(g.backward(Var(0)), Err(DiffError::NotRecorded(0))));
        let x = g.parameter(Tensor::zeros([2]));
        assert!(matches!(g.backward(x), Err(DiffError::NonScalarOutput(_))));
    }

    #[test]
    fn broadcasting_rules() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 3], &[4, 1]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[1], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shape(&[4, 3], &[4]), None);

        let mut g = Graph::new();
        let a = g.parameter(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let col = g.parameter(t(&[2, 1], &[10.0, 20.0]));
        let y = g.mul(a, col).unwrap();
        assert_eq!(g.value(y).data(), &[10.0, 20.0, 30.0, 80.0, 100.0, 120.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(col).unwrap(), &[6.0, 15.0]);
        assert_eq!(g.grad(a).unwrap(), &[10.0, 10.0, 10.0, 20.0, 20.0, 20.0]);
    }

    #[test]
    fn cumsum_exclusive_rows() {
        let mut g = Graph::new();
        let x = g.parameter(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.cumsum_exclusive(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 3.0, 0.0, 4.0, 9.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 1.0, 0.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_and_sum_last() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = g.sum_last(c).unwrap();
        assert_eq!(g.value(s).shape(), &[2]);
        assert_eq!(g.value(s).data(), &[8.0, 13.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }
}
