//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Values
//! live on the tape and are addressed by [`Var`] handles; [`Tape::backward`]
//! replays the record in strict reverse order and returns a gradient for
//! every node.

use crate::error::{Error, Result};

use super::array::Array;
use super::kernels;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for diagnostics and backward fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    AddRow,
    SoftmaxRows,
    LayerNorm,
    Gelu,
    AvgPoolGrid,
    MeanOverTime,
    Reshape,
    ConcatRows,
    SliceRows,
    Cols,
    ConcatCols,
    RepeatRows,
    Sum,
    CrossEntropy,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Gelu(Var),
    AvgPoolGrid {
        x: Var,
        stride: usize,
    },
    MeanOverTime(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Cols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    RepeatRows {
        x: Var,
        each: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRow(..) => OpKind::AddRow,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(_) => OpKind::Gelu,
            Op::AvgPoolGrid { .. } => OpKind::AvgPoolGrid,
            Op::MeanOverTime(_) => OpKind::MeanOverTime,
            Op::Reshape(_) => OpKind::Reshape,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::Cols { .. } => OpKind::Cols,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::RepeatRows { .. } => OpKind::RepeatRows,
            Op::Sum(_) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<(OpKind, f64)>,
}

/// Gradient of a scalar loss with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Array> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zero-filled when the loss does not reach it.
    pub fn wrt(&self, var: Var) -> Array {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Array::zeros(&self.shapes[var.0]))
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let len: usize = shape.iter().product();
    (if cols == 0 { 0 } else { len / cols }, cols)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test fixture: multiply the upstream gradient of every `kind` node by
    /// `factor` during backward, producing a deliberately wrong rule.
    #[doc(hidden)]
    pub fn with_backward_fault(kind: OpKind, factor: f64) -> Self {
        Tape {
            nodes: Vec::new(),
            fault: Some((kind, factor)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Kinds of the recorded ops, in recording order.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite value after {:?}", op.kind());
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
        );
        Ok(self.push(Array::from_op("matmul", vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[0, 0]));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Array::from_op("transpose", vec![n, m], out), Op::Transpose(a)))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Array::from_op(name, shape, out), op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a);
        let out = v.data().iter().map(|x| x * factor).collect();
        let shape = v.shape().to_vec();
        self.push(Array::from_op("scale", shape, out), Op::Scale(a, factor))
    }

    /// Adds the vector `row` (length = last extent of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = rows_of(self.shape(a));
        if self.value(row).len() != cols {
            return Err(Error::dim("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let out = self
            .value(a)
            .data()
            .chunks(cols.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Array::from_op("add_row", shape, out), Op::AddRow(a, row)))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = kernels::softmax_rows(v.data(), rows_of(v.shape()).1);
        let shape = v.shape().to_vec();
        self.push(Array::from_op("softmax_rows", shape, out), Op::SoftmaxRows(a))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance, then
    /// applies the per-channel `gamma` scale and `beta` offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = rows_of(self.shape(x));
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let (mean, rstd) = kernels::row_stats(row, eps);
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) * rstd * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Array::from_op("layer_norm", shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
        ))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = v.data().iter().map(|&x| kernels::gelu(x)).collect();
        let shape = v.shape().to_vec();
        self.push(Array::from_op("gelu", shape, out), Op::Gelu(a))
    }

    /// Non-overlapping `stride`×`stride` average pooling over the two grid
    /// axes of an array shaped `[.., G, G, D]`.
    pub fn avg_pool_grid(&mut self, x: Var, stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (out, out_shape) = kernels::avg_pool_grid(self.value(x).data(), &shape, stride)?;
        Ok(self.push(
            Array::from_op("avg_pool_grid", out_shape, out),
            Op::AvgPoolGrid { x, stride },
        ))
    }

    /// Mean over the leading (time) axis: `[T, ..]` to `[1, ..]`.
    pub fn mean_over_time(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = kernels::mean_over_time(self.value(x).data(), &shape)?;
        let mut out_shape = shape;
        out_shape[0] = 1;
        Ok(self.push(
            Array::from_op("mean_over_time", out_shape, out),
            Op::MeanOverTime(x),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_rows"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dim("concat_rows", self.shape(first), s));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(
            Array::from_op("concat_rows", shape, out),
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(Error::dim("slice_rows", &s, &[start, len]));
        }
        let row: usize = s[1..].iter().product();
        let out = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut shape = s;
        shape[0] = len;
        Ok(self.push(
            Array::from_op("slice_rows", shape, out),
            Op::SliceRows { x, start },
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::dim("cols", &s, &[start, len]));
        }
        let src = self.value(x).data();
        let out = src
            .chunks(s[1])
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push(
            Array::from_op("cols", vec![s[0], len], out),
            Op::Cols { x, start },
        ))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_cols"))?;
        let rows = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim("concat_cols", self.shape(first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(
            Array::from_op("concat_cols", vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Repeats each row of a `[T, D]` matrix `each` times: `[T * each, D]`.
    pub fn repeat_rows(&mut self, x: Var, each: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("repeat_rows", &s, &[each]));
        }
        let src = self.value(x).data();
        let out = src
            .chunks(s[1].max(1))
            .flat_map(|row| std::iter::repeat_n(row, each).flatten().copied())
            .collect();
        Ok(self.push(
            Array::from_op("repeat_rows", vec![s[0] * each, s[1]], out),
            Op::RepeatRows { x, each },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Array::scalar(total), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Softmax cross-entropy of a single logit vector (all elements of
    /// `logits`) against a class index.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(Error::Input(format!(
                "label {label} out of range for {} classes",
                z.len()
            )));
        }
        let loss = kernels::log_sum_exp(z) - z[label];
        Ok(self.push(Array::scalar(loss), Op::CrossEntropy { logits, label }))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Input(format!("{loss:?} is not on this tape")))?;
        if !node.value.is_scalar() {
            return Err(Error::dim("backward", node.value.shape(), &[]));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if let Some((kind, factor)) = self.fault {
                if kind == node.op.kind() {
                    g.iter_mut().for_each(|v| *v *= factor);
                }
            }
            self.backward_node(node, &g, &mut grads);
            // Interior gradients are kept so callers can inspect them.
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Array::from_op("backward", n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();

        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k, n) = (shape(a)[0], shape(a)[1], shape(b)[1]);
                // dA = G Bᵀ, dB = Aᵀ G
                acc(a, &mut |da| {
                    kernels::gemm_acc(m, n, k, g, false, val(b), true, da)
                });
                acc(b, &mut |db| {
                    kernels::gemm_acc(k, m, n, val(a), true, g, false, db)
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (shape(a)[0], shape(a)[1]);
                acc(a, &mut |da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                acc(a, &mut |d| {
                    for ((x, gy), bv) in d.iter_mut().zip(g).zip(val(b)) {
                        *x += gy * bv;
                    }
                });
                acc(b, &mut |d| {
                    for ((x, gy), av) in d.iter_mut().zip(g).zip(val(a)) {
                        *x += gy * av;
                    }
                });
            }
            Op::Scale(a, c) => acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::AddRow(a, row) => {
                let cols = val(row).len();
                acc(a, &mut |d| add_into(d, g));
                acc(row, &mut |d| {
                    for chunk in g.chunks(cols.max(1)) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let cols = rows_of(node.value.shape()).1.max(1);
                acc(a, &mut |d| {
                    for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((x, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                            *x += p * (q - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let (rows, cols) = rows_of(shape(x));
                let src = val(x);
                let gm = val(gamma);
                let mut dx = vec![0.0; rows * cols];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                let mut xhat = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let row = &src[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let (mean, rstd) = kernels::row_stats(row, eps);
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..cols {
                        xhat[c] = (row[c] - mean) * rstd;
                        dxhat[c] = gr[c] * gm[c];
                        dgamma[c] += gr[c] * xhat[c];
                        dbeta[c] += gr[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xhat[c];
                    }
                    mean_d /= cols as f64;
                    mean_dx /= cols as f64;
                    for c in 0..cols {
                        dx[r * cols + c] = rstd * (dxhat[c] - mean_d - xhat[c] * mean_dx);
                    }
                }
                acc(x, &mut |d| add_into(d, &dx));
                acc(gamma, &mut |d| add_into(d, &dgamma));
                acc(beta, &mut |d| add_into(d, &dbeta));
            }
            Op::Gelu(a) => acc(a, &mut |d| {
                for ((x, &gy), &xv) in d.iter_mut().zip(g).zip(val(a)) {
                    *x += gy * kernels::gelu_grad(xv);
                }
            }),
            Op::AvgPoolGrid { x, stride } => {
                acc(x, &mut |d| kernels::avg_pool_grid_backward(g, shape(x), stride, d))
            }
            Op::MeanOverTime(x) => {
                let t = shape(x)[0];
                let inv = 1.0 / t as f64;
                acc(x, &mut |d| {
                    for chunk in d.chunks_mut(g.len().max(1)) {
                        chunk.iter_mut().zip(g).for_each(|(x, y)| *x += y * inv);
                    }
                });
            }
            Op::Reshape(a) => acc(a, &mut |d| add_into(d, g)),
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc(p, &mut |d| add_into(d, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let row: usize = shape(x)[1..].iter().product();
                acc(x, &mut |d| add_into(&mut d[start * row..start * row + g.len()], g));
            }
            Op::Cols { x, start } => {
                let width = shape(x)[1];
                let len = node.value.shape()[1];
                acc(x, &mut |d| {
                    for (r, gr) in g.chunks(len.max(1)).enumerate() {
                        add_into(&mut d[r * width + start..r * width + start + len], gr);
                    }
                });
            }
            Op::ConcatCols(ref parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = shape(p)[1];
                    acc(p, &mut |d| {
                        for (r, dr) in d.chunks_mut(w.max(1)).enumerate() {
                            add_into(dr, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::RepeatRows { x, each } => {
                let cols = shape(x)[1];
                acc(x, &mut |d| {
                    for (i, gr) in g.chunks(cols.max(1)).enumerate() {
                        let t = i / each;
                        add_into(&mut d[t * cols..(t + 1) * cols], gr);
                    }
                });
            }
            Op::Sum(a) => acc(a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::CrossEntropy { logits, label } => {
                let p = kernels::softmax_rows(val(logits), val(logits).len());
                acc(logits, &mut |d| {
                    for (i, (x, pi)) in d.iter_mut().zip(&p).enumerate() {
                        let target = if i == label { 1.0 } else { 0.0 };
                        *x += g[0] * (pi - target);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
}
