//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Tape`] records every primitive applied to tracked [`Var`]s in
//! execution order. [`Tape::backward`] walks the record in reverse and returns
//! the gradient of a scalar loss for every recorded leaf. Values that do not
//! depend on any leaf, and everything computed on a no-grad tape, are never
//! recorded, so inference holds no intermediate state beyond what the caller
//! keeps alive.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_into, Tensor};

/// Variance floor inside layer normalization.
pub const LN_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value produced on a tape. Untracked vars are constants.
#[derive(Clone)]
pub struct Var {
    id: Option<usize>,
    value: Rc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn rows(&self) -> usize {
        self.value.rows()
    }

    pub fn cols(&self) -> usize {
        self.value.cols()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn id(&self) -> Option<usize> {
        self.id
    }

    pub fn into_rc(self) -> Rc<Tensor> {
        self.value
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, {:?})", self.id, self.value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is `[1, n]`, repeated down the rows of `[m, n]`.
    Row,
    /// rhs is `[m, 1]`, repeated across the columns.
    Col,
    Scalar,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    /// Input and output.
    Softmax(Var, Rc<Tensor>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    /// Input and the cached `tanh` term.
    Gelu(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    Transpose(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    StraightThrough(Var),
}

struct Node {
    op: Op,
}

/// Append-only record of primitive applications.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Shape {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        return Ok(Bcast::Same);
    }
    if b.numel() == 1 {
        return Ok(Bcast::Scalar);
    }
    if a.shape().len() == 2 && b.shape().len() == 2 {
        let (m, n) = (a.shape()[0], a.shape()[1]);
        if b.shape() == [1, n] {
            return Ok(Bcast::Row);
        }
        if b.shape() == [m, 1] {
            return Ok(Bcast::Col);
        }
    }
    Err(shape_err(op, a, b))
}

/// `f(a[i], b[broadcast(i)])` over every element of `a`.
#[inline]
fn zip_bcast(a: &[f64], b: &[f64], kind: Bcast, cols: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match kind {
        Bcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::Scalar => a.iter().map(|&x| f(x, b[0])).collect(),
        Bcast::Row => {
            let mut out = Vec::with_capacity(a.len());
            for ar in a.chunks(cols.max(1)) {
                out.extend(ar.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
            out
        }
        Bcast::Col => {
            let mut out = Vec::with_capacity(a.len());
            for (ar, &y) in a.chunks(cols.max(1)).zip(b) {
                out.extend(ar.iter().map(|&x| f(x, y)));
            }
            out
        }
    }
}

/// Sum a full-shape gradient down to the broadcast operand's shape.
fn reduce_to(g: &[f64], kind: Bcast, rows: usize, cols: usize, shape: &[usize]) -> Tensor {
    match kind {
        Bcast::Same => Tensor::from_parts(shape.to_vec(), g.to_vec()),
        Bcast::Scalar => Tensor::from_parts(shape.to_vec(), vec![g.iter().sum()]),
        Bcast::Row => {
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                for (o, v) in out.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                    *o += v;
                }
            }
            Tensor::from_parts(shape.to_vec(), out)
        }
        Bcast::Col => {
            let out = (0..rows)
                .map(|r| g[r * cols..(r + 1) * cols].iter().sum())
                .collect();
            Tensor::from_parts(shape.to_vec(), out)
        }
    }
}

/// Row-wise softmax of a row-major buffer with `cols` columns.
pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if cols == 0 {
        return out;
    }
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            sum += *o;
        }
        let inv = 1.0 / sum;
        for o in or.iter_mut() {
            *o *= inv;
        }
    }
    out
}

/// `tanh(c·(x + a·x³))` through one `exp`, which is several times cheaper
/// than libm's `tanh`; absolute error stays near one ulp.
fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    if u.abs() > 20.0 {
        return u.signum();
    }
    let e = (2.0 * u).exp();
    (e - 1.0) / (e + 1.0)
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: Cell::new(true),
        }
    }

    /// A tape that never records: every op returns untracked values.
    pub fn no_grad() -> Self {
        let t = Self::new();
        t.grad_enabled.set(false);
        t
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Tensor, tracked: bool) -> Var {
        self.push_rc(op, Rc::new(value), tracked)
    }

    fn push_rc(&self, op: Op, value: Rc<Tensor>, tracked: bool) -> Var {
        if !tracked || !self.grad_enabled.get() {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op });
        Var {
            id: Some(nodes.len() - 1),
            value,
        }
    }

    /// Differentiable input.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.leaf_rc(Rc::new(t))
    }

    /// Differentiable input sharing storage with the caller.
    pub fn leaf_rc(&self, value: Rc<Tensor>) -> Var {
        if !self.grad_enabled.get() {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op: Op::Leaf });
        Var {
            id: Some(nodes.len() - 1),
            value,
        }
    }

    pub fn constant(&self, t: Tensor) -> Var {
        Var {
            id: None,
            value: Rc::new(t),
        }
    }

    pub fn constant_rc(&self, value: Rc<Tensor>) -> Var {
        Var { id: None, value }
    }

    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (m, k) = require_2d("matmul", a.value())?;
        let (k2, n) = require_2d("matmul", b.value())?;
        if k != k2 {
            return Err(shape_err("matmul", a.value(), b.value()));
        }
        let out = gemm(a.value().data(), b.value().data(), m, k, n);
        let t = Tensor::from_parts(vec![m, n], out);
        let tracked = a.is_tracked() || b.is_tracked();
        Ok(self.push(Op::MatMul(a.clone(), b.clone()), t, tracked))
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let kind = broadcast_kind("add", a.value(), b.value())?;
        let out = zip_bcast(a.value().data(), b.value().data(), kind, a.cols(), |x, y| x + y);
        let t = Tensor::from_parts(a.shape().to_vec(), out);
        let tracked = a.is_tracked() || b.is_tracked();
        Ok(self.push(Op::Add(a.clone(), b.clone(), kind), t, tracked))
    }

    /// Elementwise product, with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let kind = broadcast_kind("multiply", a.value(), b.value())?;
        let out = zip_bcast(a.value().data(), b.value().data(), kind, a.cols(), |x, y| x * y);
        let t = Tensor::from_parts(a.shape().to_vec(), out);
        let tracked = a.is_tracked() || b.is_tracked();
        Ok(self.push(Op::Mul(a.clone(), b.clone(), kind), t, tracked))
    }

    pub fn scale(&self, a: &Var, c: f64) -> Var {
        let out = a.value().data().iter().map(|x| x * c).collect();
        let t = Tensor::from_parts(a.shape().to_vec(), out);
        self.push(Op::Scale(a.clone(), c), t, a.is_tracked())
    }

    /// Softmax over the last dimension.
    pub fn softmax(&self, a: &Var) -> Var {
        let out = softmax_rows(a.value().data(), a.cols());
        let t = Rc::new(Tensor::from_parts(a.shape().to_vec(), out));
        self.push_rc(Op::Softmax(a.clone(), t.clone()), t, a.is_tracked())
    }

    /// Row-wise normalization to zero mean and unit variance, then
    /// `gamma ∘ x̂ + beta` with `[1, n]` affine parameters.
    pub fn layer_norm(&self, x: &Var, gamma: &Var, beta: &Var) -> Result<Var> {
        let (m, n) = require_2d("layer_norm", x.value())?;
        if gamma.shape() != [1, n] {
            return Err(shape_err("layer_norm", x.value(), gamma.value()));
        }
        if beta.shape() != [1, n] {
            return Err(shape_err("layer_norm", x.value(), beta.value()));
        }
        let xd = x.value().data();
        let g = gamma.value().data();
        let b = beta.value().data();
        let mut xhat = vec![0.0; m * n];
        let mut out = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = g[c] * h + b[c];
            }
        }
        let t = Tensor::from_parts(vec![m, n], out);
        let tracked = x.is_tracked() || gamma.is_tracked() || beta.is_tracked();
        let op = if tracked && self.grad_enabled.get() {
            Op::LayerNorm {
                x: x.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat: Tensor::from_parts(vec![m, n], xhat),
                rstd,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(op, t, tracked))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: &Var) -> Var {
        let x = a.value().data();
        let th: Vec<f64> = x.iter().map(|&v| gelu_tanh(v)).collect();
        let out = x.iter().zip(&th).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
        let t = Tensor::from_parts(a.shape().to_vec(), out);
        let record = a.is_tracked() && self.grad_enabled.get();
        let op = if record { Op::Gelu(a.clone(), th) } else { Op::Leaf };
        self.push(op, t, a.is_tracked())
    }

    /// Rows of `a` picked by `idx`, in the given order. Rows may repeat.
    pub fn gather(&self, a: &Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = require_2d("gather", a.value())?;
        let ad = a.value().data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Index {
                    what: "gather",
                    index: i,
                    len: m,
                });
            }
            out.extend_from_slice(&ad[i * n..(i + 1) * n]);
        }
        let t = Tensor::from_parts(vec![idx.len(), n], out);
        Ok(self.push(Op::Gather(a.clone(), idx.to_vec()), t, a.is_tracked()))
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let (_, n) = require_2d("concat", first.value())?;
        let mut rows = 0;
        for p in parts {
            let (r, c) = require_2d("concat", p.value())?;
            if c != n {
                return Err(shape_err("concat", first.value(), p.value()));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * n);
        for p in parts {
            out.extend_from_slice(p.value().data());
        }
        let t = Tensor::from_parts(vec![rows, n], out);
        let tracked = parts.iter().any(Var::is_tracked);
        Ok(self.push(Op::Concat(parts.to_vec()), t, tracked))
    }

    pub fn transpose(&self, a: &Var) -> Result<Var> {
        let (m, n) = require_2d("transpose", a.value())?;
        let t = Tensor::from_parts(vec![n, m], transpose_data(a.value().data(), m, n));
        Ok(self.push(Op::Transpose(a.clone()), t, a.is_tracked()))
    }

    /// Sum of all elements as a `[1, 1]` scalar.
    pub fn sum(&self, a: &Var) -> Var {
        let t = Tensor::from_parts(vec![1, 1], vec![a.value().sum()]);
        self.push(Op::Sum(a.clone()), t, a.is_tracked())
    }

    /// Mean softmax cross-entropy of `[n, C]` logits against `n` labels.
    pub fn cross_entropy(&self, logits: &Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = require_2d("cross_entropy", logits.value())?;
        if labels.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: vec![m, c],
                right: vec![labels.len()],
            });
        }
        let probs = softmax_rows(logits.value().data(), c);
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(Error::Index {
                    what: "cross_entropy label",
                    index: l,
                    len: c,
                });
            }
            let row = &logits.value().data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        let t = Tensor::from_parts(vec![1, 1], vec![loss / m as f64]);
        let op = Op::CrossEntropy {
            logits: logits.clone(),
            labels: labels.to_vec(),
            probs: Tensor::from_parts(vec![m, c], probs),
        };
        Ok(self.push(op, t, logits.is_tracked()))
    }

    /// Emits `hard` in the forward pass and passes the upstream gradient to
    /// `soft` unchanged in the backward pass.
    pub fn straight_through(&self, soft: &Var, hard: Tensor) -> Result<Var> {
        if soft.shape() != hard.shape() {
            return Err(shape_err("straight_through", soft.value(), &hard));
        }
        Ok(self.push(Op::StraightThrough(soft.clone()), hard, soft.is_tracked()))
    }

    /// Gradients of the scalar `loss` with respect to every tracked leaf.
    /// Intermediate gradients are released as soon as they are propagated.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        self.backward_retaining(loss, &[])
    }

    /// Like [`Tape::backward`], but the gradients of the listed intermediate
    /// vars are kept too.
    pub fn backward_retaining(&self, loss: &Var, retain: &[&Var]) -> Result<Gradients> {
        if loss.value().numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        let Some(root) = loss.id else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Tensor::full(loss.shape(), 1.0));
        let keep: Vec<usize> = retain.iter().filter_map(|v| v.id).collect();
        for id in (0..=root).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop(&node.op, &g, &mut grads);
            if keep.contains(&id) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn transpose_data(d: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Tensor>], v: &Var, g: Tensor) {
    let Some(id) = v.id else { return };
    match &mut grads[id] {
        Some(e) => e.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop(op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let gd = g.data();
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.is_tracked() {
                let mut da = vec![0.0; m * k];
                gemm_into(gd, false, b.value().data(), true, &mut da, m, n, k, 0.0);
                accumulate(grads, a, Tensor::from_parts(vec![m, k], da));
            }
            if b.is_tracked() {
                let mut db = vec![0.0; k * n];
                gemm_into(a.value().data(), true, gd, false, &mut db, k, m, n, 0.0);
                accumulate(grads, b, Tensor::from_parts(vec![k, n], db));
            }
        }
        Op::Add(a, b, kind) => {
            if a.is_tracked() {
                accumulate(grads, a, g.clone());
            }
            if b.is_tracked() {
                let db = reduce_to(gd, *kind, a.rows(), a.cols(), b.shape());
                accumulate(grads, b, db);
            }
        }
        Op::Mul(a, b, kind) => {
            let cols = a.cols();
            if a.is_tracked() {
                let da = zip_bcast(gd, b.value().data(), *kind, cols, |x, y| x * y);
                accumulate(grads, a, Tensor::from_parts(a.shape().to_vec(), da));
            }
            if b.is_tracked() {
                let full: Vec<f64> = gd
                    .iter()
                    .zip(a.value().data())
                    .map(|(x, y)| x * y)
                    .collect();
                let db = reduce_to(&full, *kind, a.rows(), cols, b.shape());
                accumulate(grads, b, db);
            }
        }
        Op::Scale(a, c) => {
            let da = gd.iter().map(|x| x * c).collect();
            accumulate(grads, a, Tensor::from_parts(a.shape().to_vec(), da));
        }
        Op::Softmax(a, y) => {
            let n = a.cols();
            let mut da = vec![0.0; y.numel()];
            for ((yr, gr), dr) in y.data().chunks(n).zip(gd.chunks(n)).zip(da.chunks_mut(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                for ((d, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = p * (q - dot);
                }
            }
            accumulate(grads, a, Tensor::from_parts(a.shape().to_vec(), da));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let (m, n) = (x.shape()[0], x.shape()[1]);
            let gam = gamma.value().data();
            let xh = xhat.data();
            if gamma.is_tracked() {
                let mut dg = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        dg[c] += gd[r * n + c] * xh[r * n + c];
                    }
                }
                accumulate(grads, gamma, Tensor::from_parts(vec![1, n], dg));
            }
            if beta.is_tracked() {
                let db = reduce_to(gd, Bcast::Row, m, n, &[1, n]);
                accumulate(grads, beta, db);
            }
            if x.is_tracked() {
                let mut dx = vec![0.0; m * n];
                let mut dxh = vec![0.0; n];
                for r in 0..m {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..n {
                        dxh[c] = gd[r * n + c] * gam[c];
                        mean_d += dxh[c];
                        mean_dx += dxh[c] * xh[r * n + c];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for c in 0..n {
                        dx[r * n + c] = rstd[r] * (dxh[c] - mean_d - xh[r * n + c] * mean_dx);
                    }
                }
                accumulate(grads, x, Tensor::from_parts(vec![m, n], dx));
            }
        }
        Op::Gelu(a, th) => {
            let da = gd
                .iter()
                .zip(a.value().data())
                .zip(th)
                .map(|((q, &x), &t)| q * gelu_grad(x, t))
                .collect();
            accumulate(grads, a, Tensor::from_parts(a.shape().to_vec(), da));
        }
        Op::Gather(a, idx) => {
            let n = a.cols();
            let mut da = vec![0.0; a.value().numel()];
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..n {
                    da[i * n + c] += gd[r * n + c];
                }
            }
            accumulate(grads, a, Tensor::from_parts(a.shape().to_vec(), da));
        }
        Op::Concat(parts) => {
            let mut off = 0;
            for p in parts {
                let len = p.value().numel();
                if p.is_tracked() {
                    let dp = gd[off..off + len].to_vec();
                    accumulate(grads, p, Tensor::from_parts(p.shape().to_vec(), dp));
                }
                off += len;
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let da = transpose_data(gd, n, m);
            accumulate(grads, a, Tensor::from_parts(vec![m, n], da));
        }
        Op::Sum(a) => {
            accumulate(grads, a, Tensor::full(a.shape(), gd[0]));
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let c = logits.cols();
            let m = labels.len() as f64;
            let mut dl = probs.data().to_vec();
            for (r, &l) in labels.iter().enumerate() {
                dl[r * c + l] -= 1.0;
            }
            for v in dl.iter_mut() {
                *v *= gd[0] / m;
            }
            accumulate(grads, logits, Tensor::from_parts(logits.shape().to_vec(), dl));
        }
        Op::StraightThrough(soft) => {
            accumulate(grads, soft, g.clone());
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by the original vars.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        v.id.and_then(|id| self.grads.get(id)).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: &Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    pub fn take(&mut self, v: &Var) -> Option<Tensor> {
        v.id.and_then(|id| self.grads.get_mut(id)).and_then(Option::take)
    }
}

/// Largest `|analytic − central difference| / max(1, |analytic|)` over
/// every coordinate of `at`, for the scalar function built by `f`.
pub fn grad_check_fd<F>(f: F, at: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    let errs = grad_check_many(
        |tape, xs| f(tape, &xs[0]),
        std::slice::from_ref(at),
        step,
    )?;
    Ok(errs[0])
}

/// [`grad_check_fd`] over several inputs at once; returns the worst error
/// per input.
pub fn grad_check_many<F>(f: F, at: &[Tensor], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Invalid(format!("finite-difference step {step}")));
    }
    let tape = Tape::new();
    let xs: Vec<Var> = at.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &xs)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = xs.iter().map(|x| grads.get_or_zeros(x)).collect();
    drop(grads);
    drop(loss);
    drop(xs);
    drop(tape);

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vs: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vs)?.value().item())
    };

    let mut work: Vec<Tensor> = at.to_vec();
    let mut worst = vec![0.0f64; at.len()];
    for p in 0..at.len() {
        for i in 0..at[p].numel() {
            let orig = at[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let fp = eval(&work)?;
            work[p].data_mut()[i] = orig - step;
            let fm = eval(&work)?;
            work[p].data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let a = analytic[p].data()[i];
            let err = (a - fd).abs() / a.abs().max(1.0);
            worst[p] = worst[p].max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let d = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), d).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let t = Tape::new();
        let x = t.constant(Tensor::row(&[0.0, 0.0]));
        assert_eq!(t.softmax(&x).value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tape::new();
        let a = randn(&mut rng, &[3, 4]);
        let out = t
            .matmul(&t.constant(Tensor::eye(3)), &t.constant(a.clone()))
            .unwrap();
        assert_eq!(out.value(), &a);
    }

    #[test]
    fn gelu_at_zero() {
        let t = Tape::new();
        let x = t.constant(Tensor::row(&[0.0]));
        assert_eq!(t.gelu(&x).value().item(), 0.0);
    }

    #[test]
    fn shape_error_names_primitive() {
        let t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(&a, &b).unwrap_err();
        match err {
            Error::Shape { op, left, right } => {
                assert_eq!(op, "matmul");
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other}"),
        }
        assert!(t.add(&a, &t.constant(Tensor::zeros(&[3, 2]))).is_err());
    }

    #[test]
    fn grad_of_square() {
        let t = Tape::new();
        let x = t.leaf(Tensor::row(&[3.0]));
        let loss = t.sum(&t.mul(&x, &x).unwrap());
        let g = t.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn grad_of_bilinear() {
        let t = Tape::new();
        let a = t.leaf(Tensor::row(&[2.0]));
        let b = t.leaf(Tensor::row(&[5.0]));
        let loss = t.sum(&t.mul(&a, &b).unwrap());
        let g = t.backward(&loss).unwrap();
        assert_eq!(g.get(&a).unwrap().data(), &[5.0]);
        assert_eq!(g.get(&b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(t.backward(&x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let t = Tape::no_grad();
        let x = t.leaf(Tensor::row(&[1.0, 2.0]));
        let y = t.softmax(&t.scale(&x, 2.0));
        assert!(!y.is_tracked());
        assert!(t.is_empty());
    }

    #[test]
    fn two_layer_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, &[5, 4]);
        let w1 = randn(&mut rng, &[4, 6]);
        let b1 = randn(&mut rng, &[1, 6]);
        let w2 = randn(&mut rng, &[6, 3]);
        let labels = [0usize, 2, 1, 1, 0];
        let errs = grad_check_many(
            |t, p| {
                let xv = t.constant(x.clone());
                let h = t.gelu(&t.add(&t.matmul(&xv, &p[0])?, &p[1])?);
                let logits = t.matmul(&h, &p[2])?;
                t.cross_entropy(&logits, &labels)
            },
            &[w1, b1, w2],
            1e-5,
        )
        .unwrap();
        for e in errs {
            assert!(e < 1e-5, "{e}");
        }
    }

    #[test]
    fn fd_check_of_sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let at = randn(&mut rng, &[3, 3]);
        let err = grad_check_fd(|t, x| Ok(t.sum(&t.mul(x, x)?)), &at, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn fd_check_of_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let at = randn(&mut rng, &[4, 5]);
        let err = grad_check_fd(|t, x| t.cross_entropy(x, &[1, 0, 4, 2]), &at, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum((x·w) ∘ (x·w)) with y = x·w shared, against the
        // expanded tree that recomputes y twice.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[3, 2]);
        let w = randn(&mut rng, &[2, 2]);
        let shared = {
            let t = Tape::new();
            let wv = t.leaf(w.clone());
            let y = t.matmul(&t.constant(x.clone()), &wv).unwrap();
            let loss = t.sum(&t.mul(&y, &y).unwrap());
            t.backward(&loss).unwrap().get_or_zeros(&wv)
        };
        let expanded = {
            let t = Tape::new();
            let wv = t.leaf(w.clone());
            let y1 = t.matmul(&t.constant(x.clone()), &wv).unwrap();
            let y2 = t.matmul(&t.constant(x.clone()), &wv).unwrap();
            let loss = t.sum(&t.mul(&y1, &y2).unwrap());
            t.backward(&loss).unwrap().get_or_zeros(&wv)
        };
        assert!(shared.max_abs_diff(&expanded) < 1e-14);
    }

    #[test]
    fn gather_scatters_and_leaves_unpicked_rows_zero() {
        let t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap());
        let g = t.gather(&x, &[2, 0, 2]).unwrap();
        let loss = t.sum(&g);
        let grads = t.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn straight_through_forward_is_hard_backward_is_identity() {
        let t = Tape::new();
        let s = t.leaf(Tensor::row(&[0.3, -1.2]));
        let y = t.straight_through(&s, Tensor::row(&[1.0, 0.0])).unwrap();
        assert_eq!(y.value().data(), &[1.0, 0.0]);
        let w = t.constant(Tensor::row(&[2.0, 5.0]));
        let loss = t.sum(&t.mul(&y, &w).unwrap());
        let g = t.backward(&loss).unwrap();
        assert_eq!(g.get(&s).unwrap().data(), &[2.0, 5.0]);
    }
}
