//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are stored
//! in creation order, which is a valid topological order, so the backward
//! pass is a single reverse sweep. Frozen parameters and constants are
//! leaves that never receive gradient; subgraphs that only depend on them are
//! skipped entirely during backward.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{self, matmul_t, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Relu(Var),
    Exp(Var),
    Log { x: Var, eps: f64 },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    Pick { x: Var, idx: Vec<usize> },
    Dot { x: Var, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.tensor.clone(), Op::Param(id), p.trainable);
        self.param_leaves.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let value = matmul_t(self.value(a), ta, self.value(b), tb)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).len() != self.value(b).len() || self.value(a).cols() != self.value(b).cols() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let mut value = self.value(a).clone();
        value.add_scaled(self.value(b), -1.0);
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(bias).len() != n {
            return Err(Error::dim(
                "add_bias",
                format!("width {} vs bias {}", n, self.value(bias).len()),
            ));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in value.data_mut().chunks_mut(n) {
            for (v, bj) in row.iter_mut().zip(&b) {
                *v += bj;
            }
        }
        let ng = self.ng(&[x, bias]);
        Ok(self.push(value, Op::AddBias { x, bias }, ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let ng = self.ng(&[x]);
        self.push(value, Op::Scale(x, s), ng)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::dim("mul_const", "shape mismatch"));
        }
        let mut value = self.value(x).clone();
        for (v, m) in value.data_mut().iter_mut().zip(c.data()) {
            *v *= m;
        }
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::MulConst(x, c), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(&[x]);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        let ng = self.ng(&[x]);
        self.push(value, Op::Exp(x), ng)
    }

    /// `ln(x + eps)`.
    pub fn log(&mut self, x: Var, eps: f64) -> Var {
        let value = self.value(x).map(|v| (v + eps).ln());
        let ng = self.ng(&[x]);
        self.push(value, Op::Log { x, eps }, ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = tensor::softmax_rows(self.value(x));
        let ng = self.ng(&[x]);
        self.push(value, Op::Softmax(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::dim("layer_norm", "gain/bias width"));
        }
        if c < 2 {
            return Err(Error::dim("layer_norm", "needs at least two columns"));
        }
        let mut xhat = xv.data().to_vec();
        let mut inv = Vec::with_capacity(xv.rows());
        for row in xhat.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + tensor::LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv.push(s);
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for row in out.chunks_mut(c) {
            for j in 0..c {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            },
            ng,
        ))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let value = tensor::l2_normalize_rows(self.value(x))?;
        let xv = self.value(x);
        let norms = (0..xv.rows())
            .map(|i| xv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::L2Normalize { x, norms }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if start >= end || end > c {
            return Err(Error::dim("slice_cols", format!("{start}..{end} of {c}")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..end]);
        }
        let value = Tensor::matrix(r, w, data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != r) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let value = Tensor::matrix(r, total, data)?;
        let ng = self.ng(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        if parts.iter().any(|p| self.value(*p).cols() != c) {
            return Err(Error::dim("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        let mut r = 0;
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
            r += self.value(*p).rows();
        }
        let value = Tensor::matrix(r, c, data)?;
        let ng = self.ng(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Column means, as a `1×n` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).mean_rows();
        let ng = self.ng(&[x]);
        self.push(value, Op::MeanRows(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(&[x]);
        self.push(value, Op::Sum(x), ng)
    }

    /// Gathers flat element indices into a vector.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if idx.is_empty() || idx.iter().any(|&i| i >= xv.len()) {
            return Err(Error::dim("pick", "index out of range"));
        }
        let data = idx.iter().map(|&i| xv.data()[i]).collect::<Vec<_>>();
        let value = Tensor::new(vec![idx.len()], data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Pick { x, idx }, ng))
    }

    /// `Σ_i weights_i · x_i` as a scalar.
    pub fn dot_const(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::dim("dot_const", "weight count"));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, b)| a * b)
            .sum();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights }, ng))
    }

    /// Reverse sweep from a scalar node. Returns the gradient of every
    /// trainable parameter that the loss depends on.
    pub fn backward(&self, loss: Var, n_params: usize) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut out = Gradients::new(n_params);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn propagate(
        &self,
        node: &Node,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => a.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.set(*id, g),
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    let da = if *ta {
                        matmul_t(bv, *tb, &g, true)?
                    } else {
                        matmul_t(&g, false, bv, !*tb)?
                    };
                    acc(*a, da);
                }
                if wants(*b) {
                    let db = if *tb {
                        matmul_t(&g, true, av, *ta)?
                    } else {
                        matmul_t(av, !*ta, &g, false)?
                    };
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                if wants(*b) {
                    acc(*b, g.clone());
                }
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                if wants(*b) {
                    acc(*b, g.scale(-1.0));
                }
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let mut t = g.clone();
                    for (x, y) in t.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *x *= y;
                    }
                    acc(*a, t);
                }
                if wants(*b) {
                    let mut t = g;
                    for (x, y) in t.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *x *= y;
                    }
                    acc(*b, t);
                }
            }
            Op::AddBias { x, bias } => {
                if wants(*bias) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    acc(*bias, Tensor::new(shape, db)?);
                }
                acc(*x, g);
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s)),
            Op::MulConst(x, c) => {
                let mut t = g;
                for (v, m) in t.data_mut().iter_mut().zip(c.data()) {
                    *v *= m;
                }
                acc(*x, t);
            }
            Op::Relu(x) => {
                let mut t = g;
                for (v, xi) in t.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if *xi <= 0.0 {
                        *v = 0.0;
                    }
                }
                acc(*x, t);
            }
            Op::Exp(x) => {
                let mut t = g;
                for (v, y) in t.data_mut().iter_mut().zip(node.value.data()) {
                    *v *= y;
                }
                acc(*x, t);
            }
            Op::Log { x, eps } => {
                let mut t = g;
                for (v, xi) in t.data_mut().iter_mut().zip(self.value(*x).data()) {
                    *v /= xi + eps;
                }
                acc(*x, t);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut t = g;
                for (gr, yr) in t.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (gv, yv) in gr.iter_mut().zip(yr) {
                        *gv = yv * (*gv - dot);
                    }
                }
                acc(*x, t);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            } => {
                let c = g.cols();
                let gv = self.value(*gain).data();
                if wants(*gain) || wants(*bias) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (gr, xr) in g.data().chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * xr[j];
                            db[j] += gr[j];
                        }
                    }
                    let gshape = self.value(*gain).shape().to_vec();
                    let bshape = self.value(*bias).shape().to_vec();
                    acc(*gain, Tensor::new(gshape, dg)?);
                    acc(*bias, Tensor::new(bshape, db)?);
                }
                if wants(*x) {
                    let mut dx = g.clone();
                    let n = c as f64;
                    for ((dr, xr), s) in dx.data_mut().chunks_mut(c).zip(xhat.chunks(c)).zip(inv) {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            let d = dr[j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xr[j];
                        }
                        for j in 0..c {
                            let d = dr[j] * gv[j];
                            dr[j] = s / n * (n * d - sum_d - xr[j] * sum_dx);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let c = y.cols();
                let mut t = g;
                for ((gr, yr), n) in t.data_mut().chunks_mut(c).zip(y.data().chunks(c)).zip(norms) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (gv, yv) in gr.iter_mut().zip(yr) {
                        *gv = (*gv - yv * dot) / n;
                    }
                }
                acc(*x, t);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let w = g.cols();
                let mut t = Tensor::zeros(xv.shape());
                for i in 0..r {
                    t.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                acc(*x, t);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let (r, w) = (pv.rows(), pv.cols());
                    if wants(*p) {
                        let mut data = Vec::with_capacity(r * w);
                        for i in 0..r {
                            data.extend_from_slice(&g.row(i)[off..off + w]);
                        }
                        acc(*p, Tensor::new(pv.shape().to_vec(), data)?);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let r = pv.rows();
                    if wants(*p) {
                        let data = g.data()[off * c..(off + r) * c].to_vec();
                        acc(*p, Tensor::new(pv.shape().to_vec(), data)?);
                    }
                    off += r;
                }
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let r = xv.rows();
                let mut data = Vec::with_capacity(xv.len());
                for _ in 0..r {
                    data.extend(g.data().iter().map(|v| v / r as f64));
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                acc(*x, Tensor::full(xv.shape(), g.item()));
            }
            Op::Pick { x, idx } => {
                let mut t = Tensor::zeros(self.value(*x).shape());
                for (k, &i) in idx.iter().enumerate() {
                    t.data_mut()[i] += g.data()[k];
                }
                acc(*x, t);
            }
            Op::Dot { x, weights } => {
                let s = g.item();
                let t = Tensor::new(
                    self.value(*x).shape().to_vec(),
                    weights.iter().map(|w| w * s).collect(),
                )?;
                acc(*x, t);
            }
        }
        Ok(())
    }
}
