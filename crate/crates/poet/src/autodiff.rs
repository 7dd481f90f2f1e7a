//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Everything is dense, row-major, 64-bit. A [`Tape`] records every forward
//! op; [`Tape::backward`] replays the record once in reverse and accumulates
//! gradients into each node that asked for them. The op set is exactly what
//! the captioning model needs — no broadcasting, no fusion, no views.
//!
//! Tensors are immutable once pushed onto a tape. A tape is single-threaded;
//! independent tapes may run on independent threads.

use std::cell::RefCell;

use thiserror::Error;

/// Errors from tensor construction, forward ops, and the backward pass.
#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward was already called on this tape")]
    BackwardTwice,
    #[error("masked_max: empty neighbor list")]
    EmptyNeighbors,
    #[error("softmax: axis {axis} invalid for shape {shape:?}")]
    SoftmaxAxis { axis: usize, shape: Vec<usize> },
    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },
}

pub type AdResult<T> = Result<T, AdError>;

/// Dense row-major tensor of f64. `grad` is allocated iff the tensor
/// participates in differentiation; it always matches `data` in length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> AdResult<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AdError::Shape {
                op: "tensor",
                detail: format!(
                    "shape {:?} wants {} elements, data has {}",
                    shape,
                    numel,
                    data.len()
                ),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(AdError::NonFinite { op: "tensor" });
        }
        let grad = requires_grad.then(|| vec![0.0; data.len()]);
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad,
        })
    }

    pub fn zeros(shape: &[usize], requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: requires_grad.then(|| vec![0.0; numel]),
        }
    }

    /// A `[1, n]` row vector.
    pub fn row(data: Vec<f64>, requires_grad: bool) -> AdResult<Self> {
        let n = data.len();
        Tensor::new(&[1, n], data, requires_grad)
    }

    pub fn scalar(value: f64, requires_grad: bool) -> AdResult<Self> {
        Tensor::new(&[1, 1], vec![value], requires_grad)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    MulScalar { x: usize, s: usize },
    Affine { x: usize, scale: f64 },
    Sigmoid { x: usize },
    Tanh { x: usize },
    Relu { x: usize },
    Log { x: usize },
    Concat { xs: Vec<usize>, widths: Vec<usize> },
    MeanAll { x: usize },
    Softmax { x: usize, axis: usize },
    MaskedMax { rows: Vec<usize>, weights: Vec<usize>, winners: Vec<usize> },
    WeightedSum { weights: usize, rows: Vec<usize> },
    LinComb { xs: Vec<usize>, coeffs: Vec<f64> },
    AddN { xs: Vec<usize> },
    IndexLast { x: usize, index: usize },
    EmbedRow { table: usize, row: usize },
    LogSumExp { x: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

struct Inner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// Records a forward computation; replays it once in reverse for gradients.
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to one tensor on a tape. Copyable; tied to the tape's lifetime.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                grads: Vec::new(),
                backward_done: false,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            shape,
            data,
            needs_grad,
            op,
        });
        inner.grads.push(None);
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    /// Checked push for op outputs: rejects NaN/Inf before it can spread.
    fn push_checked(
        &self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        needs_grad: bool,
        op: Op,
    ) -> AdResult<Var<'_>> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(AdError::NonFinite { op: op_name });
        }
        Ok(self.push(shape, data, needs_grad, op))
    }

    pub fn leaf(&self, shape: &[usize], data: Vec<f64>, needs_grad: bool) -> AdResult<Var<'_>> {
        let t = Tensor::new(shape, data, false)?;
        Ok(self.push(t.shape, t.data, needs_grad, Op::Leaf))
    }

    /// Leaf from a persistent tensor; differentiable iff the tensor carries
    /// a grad buffer.
    pub fn var(&self, t: &Tensor) -> Var<'_> {
        self.push(
            t.shape.clone(),
            t.data.clone(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    pub fn constant_row(&self, data: &[f64]) -> AdResult<Var<'_>> {
        self.leaf(&[1, data.len()], data.to_vec(), false)
    }

    pub fn constant_scalar(&self, value: f64) -> AdResult<Var<'_>> {
        self.leaf(&[1, 1], vec![value], false)
    }

    fn node_info(&self, id: usize) -> (Vec<usize>, bool) {
        let inner = self.inner.borrow();
        (inner.nodes[id].shape.clone(), inner.nodes[id].needs_grad)
    }

    fn with_data<R>(&self, id: usize, f: impl FnOnce(&[f64]) -> R) -> R {
        let inner = self.inner.borrow();
        f(&inner.nodes[id].data)
    }

    /// Concatenate along the last axis; all other extents must agree.
    pub fn concat<'t>(&'t self, xs: &[Var<'t>]) -> AdResult<Var<'t>> {
        if xs.is_empty() {
            return Err(AdError::Shape {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        for v in xs {
            debug_assert!(std::ptr::eq(v.tape, self), "var from a different tape");
        }
        let (first_shape, _) = self.node_info(xs[0].id);
        if first_shape.is_empty() {
            return Err(AdError::Shape {
                op: "concat",
                detail: "rank-0 input".into(),
            });
        }
        let lead = &first_shape[..first_shape.len() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(xs.len());
        let mut needs = false;
        for v in xs {
            let (s, ng) = self.node_info(v.id);
            if s.len() != first_shape.len() || s[..s.len() - 1] != *lead {
                return Err(AdError::Shape {
                    op: "concat",
                    detail: format!("incompatible shapes {:?} vs {:?}", first_shape, s),
                });
            }
            widths.push(s[s.len() - 1]);
            needs |= ng;
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (v, &w) in xs.iter().zip(&widths) {
            self.with_data(v.id, |d| {
                for r in 0..rows {
                    out[r * total + offset..r * total + offset + w]
                        .copy_from_slice(&d[r * w..(r + 1) * w]);
                }
            });
            offset += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        self.push_checked(
            "concat",
            shape,
            out,
            needs,
            Op::Concat {
                xs: xs.iter().map(|v| v.id).collect(),
                widths,
            },
        )
    }

    /// Coordinate-wise max over `weights[i] * rows[i]`. Gradient routes each
    /// coordinate to its single argmax contributor; ties go to the lowest
    /// row index.
    pub fn masked_max<'t>(&'t self, rows: &[Var<'t>], weights: &[Var<'t>]) -> AdResult<Var<'t>> {
        if rows.is_empty() {
            return Err(AdError::EmptyNeighbors);
        }
        if rows.len() != weights.len() {
            return Err(AdError::Shape {
                op: "masked_max",
                detail: format!("{} rows vs {} weights", rows.len(), weights.len()),
            });
        }
        let (shape, _) = self.node_info(rows[0].id);
        let numel: usize = shape.iter().product();
        let mut needs = false;
        for v in rows {
            let (s, ng) = self.node_info(v.id);
            if s != shape {
                return Err(AdError::Shape {
                    op: "masked_max",
                    detail: format!("row shapes differ: {:?} vs {:?}", shape, s),
                });
            }
            needs |= ng;
        }
        let mut w_vals = Vec::with_capacity(weights.len());
        for v in weights {
            let (s, ng) = self.node_info(v.id);
            let n: usize = s.iter().product();
            if n != 1 {
                return Err(AdError::Shape {
                    op: "masked_max",
                    detail: format!("weight must be scalar, got {:?}", s),
                });
            }
            needs |= ng;
            w_vals.push(self.with_data(v.id, |d| d[0]));
        }
        let mut out = vec![f64::NEG_INFINITY; numel];
        let mut winners = vec![0usize; numel];
        for (i, row) in rows.iter().enumerate() {
            self.with_data(row.id, |d| {
                for c in 0..numel {
                    let v = w_vals[i] * d[c];
                    if v > out[c] {
                        out[c] = v;
                        winners[c] = i;
                    }
                }
            });
        }
        self.push_checked(
            "masked_max",
            shape,
            out,
            needs,
            Op::MaskedMax {
                rows: rows.iter().map(|v| v.id).collect(),
                weights: weights.iter().map(|v| v.id).collect(),
                winners,
            },
        )
    }

    /// `sum_k weights[0,k] * rows[k]`; `weights` is a `[1, k]` row.
    pub fn weighted_sum<'t>(&'t self, weights: Var<'t>, rows: &[Var<'t>]) -> AdResult<Var<'t>> {
        let (w_shape, w_needs) = self.node_info(weights.id);
        let k: usize = w_shape.iter().product();
        if k != rows.len() || rows.is_empty() {
            return Err(AdError::Shape {
                op: "weighted_sum",
                detail: format!("{} weights vs {} rows", k, rows.len()),
            });
        }
        let (shape, _) = self.node_info(rows[0].id);
        let numel: usize = shape.iter().product();
        let mut needs = w_needs;
        let mut out = vec![0.0; numel];
        for (i, row) in rows.iter().enumerate() {
            let (s, ng) = self.node_info(row.id);
            if s != shape {
                return Err(AdError::Shape {
                    op: "weighted_sum",
                    detail: format!("row shapes differ: {:?} vs {:?}", shape, s),
                });
            }
            needs |= ng;
            let w = self.with_data(weights.id, |d| d[i]);
            self.with_data(row.id, |d| {
                for c in 0..numel {
                    out[c] += w * d[c];
                }
            });
        }
        self.push_checked(
            "weighted_sum",
            shape,
            out,
            needs,
            Op::WeightedSum {
                weights: weights.id,
                rows: rows.iter().map(|v| v.id).collect(),
            },
        )
    }

    /// Fixed linear combination `sum_i coeffs[i] * xs[i]` of same-shape
    /// tensors; the coefficients are plain constants.
    pub fn lin_comb<'t>(&'t self, xs: &[Var<'t>], coeffs: &[f64]) -> AdResult<Var<'t>> {
        if xs.is_empty() || xs.len() != coeffs.len() {
            return Err(AdError::Shape {
                op: "lin_comb",
                detail: format!("{} inputs vs {} coefficients", xs.len(), coeffs.len()),
            });
        }
        let (shape, _) = self.node_info(xs[0].id);
        let numel: usize = shape.iter().product();
        let mut needs = false;
        let mut out = vec![0.0; numel];
        for (v, &c) in xs.iter().zip(coeffs) {
            let (s, ng) = self.node_info(v.id);
            if s != shape {
                return Err(AdError::Shape {
                    op: "lin_comb",
                    detail: format!("input shapes differ: {:?} vs {:?}", shape, s),
                });
            }
            needs |= ng;
            self.with_data(v.id, |d| {
                for i in 0..numel {
                    out[i] += c * d[i];
                }
            });
        }
        self.push_checked(
            "lin_comb",
            shape,
            out,
            needs,
            Op::LinComb {
                xs: xs.iter().map(|v| v.id).collect(),
                coeffs: coeffs.to_vec(),
            },
        )
    }

    /// Coordinate-wise mean of same-shape tensors.
    pub fn mean_of<'t>(&'t self, xs: &[Var<'t>]) -> AdResult<Var<'t>> {
        let c = 1.0 / xs.len() as f64;
        self.lin_comb(xs, &vec![c; xs.len()])
    }

    /// Sum of same-shape tensors.
    pub fn add_n<'t>(&'t self, xs: &[Var<'t>]) -> AdResult<Var<'t>> {
        if xs.is_empty() {
            return Err(AdError::Shape {
                op: "add_n",
                detail: "no inputs".into(),
            });
        }
        let (shape, _) = self.node_info(xs[0].id);
        let numel: usize = shape.iter().product();
        let mut needs = false;
        let mut out = vec![0.0; numel];
        for v in xs {
            let (s, ng) = self.node_info(v.id);
            if s != shape {
                return Err(AdError::Shape {
                    op: "add_n",
                    detail: format!("input shapes differ: {:?} vs {:?}", shape, s),
                });
            }
            needs |= ng;
            self.with_data(v.id, |d| {
                for i in 0..numel {
                    out[i] += d[i];
                }
            });
        }
        self.push_checked(
            "add_n",
            shape,
            out,
            needs,
            Op::AddN {
                xs: xs.iter().map(|v| v.id).collect(),
            },
        )
    }

    /// Runs the reverse pass from a scalar loss. May be called once per tape.
    pub fn backward(&self, loss: Var<'_>) -> AdResult<()> {
        debug_assert!(std::ptr::eq(loss.tape, self), "loss from a different tape");
        let mut inner = self.inner.borrow_mut();
        if inner.backward_done {
            return Err(AdError::BackwardTwice);
        }
        let loss_node = &inner.nodes[loss.id];
        if loss_node.data.len() != 1 {
            return Err(AdError::NonScalarLoss(loss_node.shape.clone()));
        }
        inner.backward_done = true;
        inner.grads[loss.id] = Some(vec![1.0]);
        for id in (0..inner.nodes.len()).rev() {
            if inner.grads[id].is_none() {
                continue;
            }
            backward_one(&mut inner, id);
        }
        Ok(())
    }
}

/// Adds `delta` into the gradient slot of `id` if that node wants gradients.
fn acc(inner: &mut Inner, id: usize, delta: &[f64]) {
    if !inner.nodes[id].needs_grad {
        return;
    }
    let slot = &mut inner.grads[id];
    match slot {
        Some(g) => {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

fn backward_one(inner: &mut Inner, id: usize) {
    let g = inner.grads[id].clone().expect("caller checked");
    // Op data is read via short immutable borrows; accumulation happens after.
    enum Moved {
        None,
        One(usize, Vec<f64>),
        Two((usize, Vec<f64>), (usize, Vec<f64>)),
        Many(Vec<(usize, Vec<f64>)>),
    }
    let moved = {
        let node = &inner.nodes[id];
        match &node.op {
            Op::Leaf => Moved::None,
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (inner.nodes[a].shape[0], inner.nodes[a].shape[1]);
                let n = inner.nodes[b].shape[1];
                let ad = &inner.nodes[a].data;
                let bd = &inner.nodes[b].data;
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for l in 0..n {
                        let gil = g[i * n + l];
                        if gil == 0.0 {
                            continue;
                        }
                        for j in 0..k {
                            da[i * k + j] += gil * bd[j * n + l];
                            db[j * n + l] += ad[i * k + j] * gil;
                        }
                    }
                }
                Moved::Two((a, da), (b, db))
            }
            Op::Add { a, b } => Moved::Two((*a, g.clone()), (*b, g.clone())),
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = g
                    .iter()
                    .zip(&inner.nodes[b].data)
                    .map(|(gi, bi)| gi * bi)
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(&inner.nodes[a].data)
                    .map(|(gi, ai)| gi * ai)
                    .collect();
                Moved::Two((a, da), (b, db))
            }
            Op::MulScalar { x, s } => {
                let (x, s) = (*x, *s);
                let sv = inner.nodes[s].data[0];
                let dx: Vec<f64> = g.iter().map(|gi| gi * sv).collect();
                let ds: f64 = g
                    .iter()
                    .zip(&inner.nodes[x].data)
                    .map(|(gi, xi)| gi * xi)
                    .sum();
                Moved::Two((x, dx), (s, vec![ds]))
            }
            Op::Affine { x, scale } => {
                let dx: Vec<f64> = g.iter().map(|gi| gi * scale).collect();
                Moved::One(*x, dx)
            }
            Op::Sigmoid { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&node.data)
                    .map(|(gi, yi)| gi * yi * (1.0 - yi))
                    .collect();
                Moved::One(*x, dx)
            }
            Op::Tanh { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&node.data)
                    .map(|(gi, yi)| gi * (1.0 - yi * yi))
                    .collect();
                Moved::One(*x, dx)
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&inner.nodes[*x].data)
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                Moved::One(*x, dx)
            }
            Op::Log { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&inner.nodes[*x].data)
                    .map(|(gi, xi)| gi / xi)
                    .collect();
                Moved::One(*x, dx)
            }
            Op::Concat { xs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = node.data.len() / total;
                let mut out = Vec::with_capacity(xs.len());
                let mut offset = 0;
                for (&xid, &w) in xs.iter().zip(widths) {
                    let mut dx = vec![0.0; rows * w];
                    for r in 0..rows {
                        dx[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    out.push((xid, dx));
                    offset += w;
                }
                Moved::Many(out)
            }
            Op::MeanAll { x } => {
                let n = inner.nodes[*x].data.len();
                let dx = vec![g[0] / n as f64; n];
                Moved::One(*x, dx)
            }
            Op::Softmax { x, axis } => {
                let dx = softmax_backward(&node.shape, &node.data, &g, *axis);
                Moved::One(*x, dx)
            }
            Op::MaskedMax {
                rows,
                weights,
                winners,
            } => {
                let numel = node.data.len();
                let mut out: Vec<(usize, Vec<f64>)> = Vec::new();
                let mut drows = vec![vec![0.0; numel]; rows.len()];
                let mut dweights = vec![0.0; weights.len()];
                for c in 0..numel {
                    let i = winners[c];
                    let w = inner.nodes[weights[i]].data[0];
                    let r = inner.nodes[rows[i]].data[c];
                    drows[i][c] += g[c] * w;
                    dweights[i] += g[c] * r;
                }
                for (i, d) in drows.into_iter().enumerate() {
                    out.push((rows[i], d));
                }
                for (i, d) in dweights.into_iter().enumerate() {
                    out.push((weights[i], vec![d]));
                }
                Moved::Many(out)
            }
            Op::WeightedSum { weights, rows } => {
                let numel = node.data.len();
                let mut out: Vec<(usize, Vec<f64>)> = Vec::new();
                let mut dw = vec![0.0; rows.len()];
                for (i, &rid) in rows.iter().enumerate() {
                    let w = inner.nodes[*weights].data[i];
                    let dr: Vec<f64> = g.iter().map(|gi| gi * w).collect();
                    dw[i] = g
                        .iter()
                        .zip(&inner.nodes[rid].data)
                        .map(|(gi, ri)| gi * ri)
                        .sum();
                    out.push((rid, dr));
                    let _ = numel;
                }
                out.push((*weights, dw));
                Moved::Many(out)
            }
            Op::LinComb { xs, coeffs } => {
                let mut out = Vec::with_capacity(xs.len());
                for (&xid, &c) in xs.iter().zip(coeffs) {
                    out.push((xid, g.iter().map(|gi| gi * c).collect()));
                }
                Moved::Many(out)
            }
            Op::AddN { xs } => Moved::Many(xs.iter().map(|&xid| (xid, g.clone())).collect()),
            Op::IndexLast { x, index } => {
                let xn = inner.nodes[*x].data.len();
                let last = *inner.nodes[*x].shape.last().unwrap();
                let rows = xn / last;
                let mut dx = vec![0.0; xn];
                for r in 0..rows {
                    dx[r * last + index] = g[r];
                }
                Moved::One(*x, dx)
            }
            Op::EmbedRow { table, row } => {
                let tn = inner.nodes[*table].data.len();
                let cols = inner.nodes[*table].shape[1];
                let mut dt = vec![0.0; tn];
                dt[row * cols..(row + 1) * cols].copy_from_slice(&g);
                Moved::One(*table, dt)
            }
            Op::LogSumExp { x } => {
                let xd = &inner.nodes[*x].data;
                let last = *inner.nodes[*x].shape.last().unwrap();
                let rows = xd.len() / last;
                let mut dx = vec![0.0; xd.len()];
                for r in 0..rows {
                    let lse = node.data[r];
                    for j in 0..last {
                        dx[r * last + j] = g[r] * (xd[r * last + j] - lse).exp();
                    }
                }
                Moved::One(*x, dx)
            }
        }
    };
    match moved {
        Moved::None => {}
        Moved::One(i, d) => acc(inner, i, &d),
        Moved::Two((i, d), (j, e)) => {
            acc(inner, i, &d);
            acc(inner, j, &e);
        }
        Moved::Many(v) => {
            for (i, d) in v {
                acc(inner, i, &d);
            }
        }
    }
}

fn softmax_forward(shape: &[usize], data: &[f64], axis: usize) -> AdResult<Vec<f64>> {
    if axis >= shape.len() || shape[axis] == 0 {
        return Err(AdError::SoftmaxAxis {
            axis,
            shape: shape.to_vec(),
        });
    }
    let len = shape[axis];
    let inner_sz: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner_sz {
            let base = o * len * inner_sz + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(data[base + j * inner_sz]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (data[base + j * inner_sz] - max).exp();
                out[base + j * inner_sz] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner_sz] /= sum;
            }
        }
    }
    Ok(out)
}

fn softmax_backward(shape: &[usize], y: &[f64], g: &[f64], axis: usize) -> Vec<f64> {
    let len = shape[axis];
    let inner_sz: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner_sz {
            let base = o * len * inner_sz + i;
            let mut dot = 0.0;
            for j in 0..len {
                dot += g[base + j * inner_sz] * y[base + j * inner_sz];
            }
            for j in 0..len {
                let idx = base + j * inner_sz;
                dx[idx] = y[idx] * (g[idx] - dot);
            }
        }
    }
    dx
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node_info(self.id).0
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.with_data(self.id, |d| d.to_vec())
    }

    /// Value of a one-element tensor.
    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.tape.with_data(self.id, |d| d[0])
    }

    /// Gradient captured by the last backward pass, if any flowed here.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow().grads[self.id].clone()
    }

    fn same_tape(&self, other: Var<'t>) {
        debug_assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    pub fn matmul(self, rhs: Var<'t>) -> AdResult<Var<'t>> {
        self.same_tape(rhs);
        let (a_shape, a_needs) = self.tape.node_info(self.id);
        let (b_shape, b_needs) = self.tape.node_info(rhs.id);
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            return Err(AdError::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", a_shape, b_shape),
            });
        }
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        let mut out = vec![0.0; m * n];
        self.tape.with_data(self.id, |ad| {
            self.tape.with_data(rhs.id, |bd| {
                for i in 0..m {
                    for j in 0..k {
                        let aij = ad[i * k + j];
                        if aij == 0.0 {
                            continue;
                        }
                        for l in 0..n {
                            out[i * n + l] += aij * bd[j * n + l];
                        }
                    }
                }
            })
        });
        self.tape.push_checked(
            "matmul",
            vec![m, n],
            out,
            a_needs || b_needs,
            Op::Matmul {
                a: self.id,
                b: rhs.id,
            },
        )
    }

    pub fn add(self, rhs: Var<'t>) -> AdResult<Var<'t>> {
        self.same_tape(rhs);
        let (a_shape, a_needs) = self.tape.node_info(self.id);
        let (b_shape, b_needs) = self.tape.node_info(rhs.id);
        if a_shape != b_shape {
            return Err(AdError::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", a_shape, b_shape),
            });
        }
        let out = self.tape.with_data(self.id, |ad| {
            self.tape
                .with_data(rhs.id, |bd| ad.iter().zip(bd).map(|(a, b)| a + b).collect())
        });
        self.tape.push_checked(
            "add",
            a_shape,
            out,
            a_needs || b_needs,
            Op::Add {
                a: self.id,
                b: rhs.id,
            },
        )
    }

    /// Hadamard product.
    pub fn mul(self, rhs: Var<'t>) -> AdResult<Var<'t>> {
        self.same_tape(rhs);
        let (a_shape, a_needs) = self.tape.node_info(self.id);
        let (b_shape, b_needs) = self.tape.node_info(rhs.id);
        if a_shape != b_shape {
            return Err(AdError::Shape {
                op: "mul",
                detail: format!("{:?} vs {:?}", a_shape, b_shape),
            });
        }
        let out = self.tape.with_data(self.id, |ad| {
            self.tape
                .with_data(rhs.id, |bd| ad.iter().zip(bd).map(|(a, b)| a * b).collect())
        });
        self.tape.push_checked(
            "mul",
            a_shape,
            out,
            a_needs || b_needs,
            Op::Mul {
                a: self.id,
                b: rhs.id,
            },
        )
    }

    /// Broadcast multiply by a one-element tensor.
    pub fn mul_scalar(self, s: Var<'t>) -> AdResult<Var<'t>> {
        self.same_tape(s);
        let (shape, x_needs) = self.tape.node_info(self.id);
        let (s_shape, s_needs) = self.tape.node_info(s.id);
        if s_shape.iter().product::<usize>() != 1 {
            return Err(AdError::Shape {
                op: "mul_scalar",
                detail: format!("scale has shape {:?}", s_shape),
            });
        }
        let sv = self.tape.with_data(s.id, |d| d[0]);
        let out = self
            .tape
            .with_data(self.id, |d| d.iter().map(|x| x * sv).collect());
        self.tape.push_checked(
            "mul_scalar",
            shape,
            out,
            x_needs || s_needs,
            Op::MulScalar {
                x: self.id,
                s: s.id,
            },
        )
    }

    /// Elementwise `scale * x + shift` with constant coefficients.
    pub fn affine(self, scale: f64, shift: f64) -> AdResult<Var<'t>> {
        let (shape, needs) = self.tape.node_info(self.id);
        let out = self
            .tape
            .with_data(self.id, |d| d.iter().map(|x| scale * x + shift).collect());
        self.tape.push_checked(
            "affine",
            shape,
            out,
            needs,
            Op::Affine {
                x: self.id,
                scale,
            },
        )
    }

    pub fn sigmoid(self) -> AdResult<Var<'t>> {
        let (shape, needs) = self.tape.node_info(self.id);
        let out = self
            .tape
            .with_data(self.id, |d| d.iter().map(|&x| stable_sigmoid(x)).collect());
        self.tape
            .push_checked("sigmoid", shape, out, needs, Op::Sigmoid { x: self.id })
    }

    pub fn tanh(self) -> AdResult<Var<'t>> {
        let (shape, needs) = self.tape.node_info(self.id);
        let out = self
            .tape
            .with_data(self.id, |d| d.iter().map(|x| x.tanh()).collect());
        self.tape
            .push_checked("tanh", shape, out, needs, Op::Tanh { x: self.id })
    }

    pub fn relu(self) -> AdResult<Var<'t>> {
        let (shape, needs) = self.tape.node_info(self.id);
        let out = self
            .tape
            .with_data(self.id, |d| d.iter().map(|x| x.max(0.0)).collect());
        self.tape
            .push_checked("relu", shape, out, needs, Op::Relu { x: self.id })
    }

    pub fn log(self) -> AdResult<Var<'t>> {
        let (shape, needs) = self.tape.node_info(self.id);
        let out = self
            .tape
            .with_data(self.id, |d| d.iter().map(|x| x.ln()).collect());
        self.tape
            .push_checked("log", shape, out, needs, Op::Log { x: self.id })
    }

    /// Mean over every element, yielding a `[1, 1]` scalar.
    pub fn mean_all(self) -> AdResult<Var<'t>> {
        let (_, needs) = self.tape.node_info(self.id);
        let out = self
            .tape
            .with_data(self.id, |d| d.iter().sum::<f64>() / d.len() as f64);
        self.tape.push_checked(
            "mean_all",
            vec![1, 1],
            vec![out],
            needs,
            Op::MeanAll { x: self.id },
        )
    }

    /// Softmax along `axis`; each lane sums to one.
    pub fn softmax(self, axis: usize) -> AdResult<Var<'t>> {
        let (shape, needs) = self.tape.node_info(self.id);
        let out = self
            .tape
            .with_data(self.id, |d| softmax_forward(&shape, d, axis))?;
        self.tape.push_checked(
            "softmax",
            shape,
            out,
            needs,
            Op::Softmax {
                x: self.id,
                axis,
            },
        )
    }

    /// Selects one entry along the last axis of each leading row.
    pub fn index_last(self, index: usize) -> AdResult<Var<'t>> {
        let (shape, needs) = self.tape.node_info(self.id);
        let last = *shape.last().ok_or(AdError::Shape {
            op: "index_last",
            detail: "rank-0 input".into(),
        })?;
        if index >= last {
            return Err(AdError::Index { index, len: last });
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let out = self.tape.with_data(self.id, |d| {
            (0..rows).map(|r| d[r * last + index]).collect::<Vec<_>>()
        });
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(1);
        self.tape.push_checked(
            "index_last",
            out_shape,
            out,
            needs,
            Op::IndexLast {
                x: self.id,
                index,
            },
        )
    }

    /// Stable `log(sum(exp(x)))` along the last axis; shape `[..., 1]`.
    pub fn logsumexp(self) -> AdResult<Var<'t>> {
        let (shape, needs) = self.tape.node_info(self.id);
        let last = *shape.last().ok_or(AdError::Shape {
            op: "logsumexp",
            detail: "rank-0 input".into(),
        })?;
        if last == 0 {
            return Err(AdError::Shape {
                op: "logsumexp",
                detail: "empty last axis".into(),
            });
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let out = self.tape.with_data(self.id, |d| {
            (0..rows)
                .map(|r| {
                    let lane = &d[r * last..(r + 1) * last];
                    let m = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    m + lane.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
                })
                .collect::<Vec<_>>()
        });
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(1);
        self.tape.push_checked(
            "logsumexp",
            out_shape,
            out,
            needs,
            Op::LogSumExp { x: self.id },
        )
    }

    /// Row lookup into a `[rows, cols]` table; gradient scatter-adds back.
    pub fn embed_row(self, row: usize) -> AdResult<Var<'t>> {
        let (shape, needs) = self.tape.node_info(self.id);
        if shape.len() != 2 {
            return Err(AdError::Shape {
                op: "embed_row",
                detail: format!("table must be rank 2, got {:?}", shape),
            });
        }
        if row >= shape[0] {
            return Err(AdError::Index {
                index: row,
                len: shape[0],
            });
        }
        let cols = shape[1];
        let out = self
            .tape
            .with_data(self.id, |d| d[row * cols..(row + 1) * cols].to_vec());
        self.tape.push_checked(
            "embed_row",
            vec![1, cols],
            out,
            needs,
            Op::EmbedRow {
                table: self.id,
                row,
            },
        )
    }
}

/// Central-difference gradient check.
///
/// Binds `inputs` onto a fresh tape, evaluates `f` once for analytic
/// gradients, then twice per coordinate at `x ± h`. Returns the max over all
/// coordinates of `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// `f` must be deterministic and scalar-valued. Ties inside `masked_max` sit
/// on non-differentiable points; callers perturb inputs to avoid them.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], h: f64) -> AdResult<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> AdResult<Var<'t>>,
{
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(&t.shape, t.data.clone(), true))
            .collect::<AdResult<_>>()?;
        let loss = f(&tape, &vars)?;
        if loss.numel() != 1 {
            return Err(AdError::NonScalarLoss(loss.shape()));
        }
        tape.backward(loss)?;
        vars.iter()
            .map(|v| v.grad().unwrap_or_else(|| vec![0.0; v.numel()]))
            .collect()
    };

    let eval = |perturbed: &[Tensor]| -> AdResult<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed
            .iter()
            .map(|t| tape.leaf(&t.shape, t.data.clone(), false))
            .collect::<AdResult<_>>()?;
        Ok(f(&tape, &vars)?.scalar())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel: f64 = 0.0;
    for ti in 0..work.len() {
        for c in 0..work[ti].data.len() {
            let orig = work[ti].data[c];
            work[ti].data[c] = orig + h;
            let f_plus = eval(&work)?;
            work[ti].data[c] = orig - h;
            let f_minus = eval(&work)?;
            work[ti].data[c] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let an = analytic[ti][c];
            let rel = (an - numeric).abs() / f64::max(1e-8, an.abs() + numeric.abs());
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
