use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    MeanRows(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<T>,
        beta: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation record: an append-only list of primitive operations.
///
/// Nodes are only ever appended, so every node's inputs precede it and the
/// record order is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn gelu_cdf<T: Scalar>(x: T) -> T {
    T::cst(0.5) * (T::one() + (x * T::cst(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf; it receives a gradient on backward.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a constant leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::contract(format!(
                "{op} expects a rank-2 tensor, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "transpose")?;
        let out = transpose_raw(self.value(a).data(), r, c);
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-n bias to every row of `x`. This is the only broadcast
    /// the tape supports.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        let b = self.value(bias);
        if b.numel() != cols || b.rows() != 1 || self.value(x).rank() == 0 {
            return Err(dim_err("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let bd = b.data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(&bd) {
                *o = *o + bv;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Column-wise mean over rows: rows×n → 1×n.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![T::zero(); cols];
        for r in 0..rows {
            for (o, &v) in out.iter_mut().zip(t.row(r)) {
                *o = *o + v;
            }
        }
        let inv = T::one() / T::cst(rows as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        let value = Tensor::new(vec![1, cols], out)?;
        Ok(self.push(value, Op::MeanRows(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Stacks the rows of every input (each viewed as rows×cols) into one matrix.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of zero tensors"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(dim_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start >= end || end > t.rows() {
            return Err(Error::contract(format!(
                "slice_rows {start}..{end} out of range for shape {:?}",
                t.shape()
            )));
        }
        let c = t.cols();
        let value = Tensor::new(vec![end - start, c], t.data()[start * c..end * c].to_vec())?;
        Ok(self.push(value, Op::SliceRows(x, start), &[x]))
    }

    /// Places the inputs side by side; all must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of zero tensors"))?;
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(dim_err("concat_cols", self.shape(first), self.shape(p)));
            }
            total += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start >= end || end > t.cols() {
            return Err(Error::contract(format!(
                "slice_cols {start}..{end} out of range for shape {:?}",
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let value = Tensor::new(vec![t.rows(), end - start], data)?;
        Ok(self.push(value, Op::SliceCols(x, start), &[x]))
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(t.cols()) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z = z + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("shape preserved");
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Per-row normalization to zero mean and unit variance, then affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let t = self.value(x);
        let d = t.cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(dim_err("layer_norm", t.shape(), self.shape(gain)));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let dn = T::cst(d as f64);
        let mut xhat = Vec::with_capacity(t.numel());
        let mut rstd = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.numel());
        for r in 0..t.rows() {
            let row = t.row(r);
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * rs;
                xhat.push(xh);
                out.push(g[j] * xh + b[j]);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Exact GELU, `0.5·x·(1 + erf(x/√2))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * gelu_cdf(v));
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Scales every row to unit L2 norm; rows with norm below `eps` are rejected.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let t = self.value(x);
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.numel());
        for r in 0..t.rows() {
            let row = t.row(r);
            let n = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            if n < eps {
                return Err(Error::Degenerate {
                    op: "l2_normalize_rows",
                    norm: n.as_f64(),
                    eps: eps.as_f64(),
                });
            }
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    /// Mean softmax cross-entropy of B×K logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.matrix_dims(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(dim_err("cross_entropy", &[b, k], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let t = self.value(logits);
        let mut probs = Vec::with_capacity(b * k);
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = t.row(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let z = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
            let lse = max + z.ln();
            total = total + (lse - row[label]);
            probs.extend(row.iter().map(|&v| (v - max).exp() / z));
        }
        let loss = total / T::cst(b as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean Smooth-L1 between `pred` and a constant target; no gradient flows
    /// into the target.
    pub fn smooth_l1(&mut self, pred: Var, target: &[T], beta: T) -> Result<Var> {
        if beta <= T::zero() {
            return Err(Error::contract("smooth_l1 beta must be positive"));
        }
        let p = self.value(pred);
        if p.numel() != target.len() {
            return Err(dim_err("smooth_l1", p.shape(), &[target.len()]));
        }
        let half = T::cst(0.5);
        let total = p
            .data()
            .iter()
            .zip(target)
            .fold(T::zero(), |acc, (&q, &t)| {
                let x = q - t;
                let l = if x.abs() < beta {
                    half * x * x / beta
                } else {
                    x.abs() - half * beta
                };
                acc + l
            });
        let loss = total / T::cst(target.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                pred,
                target: target.to_vec(),
                beta,
            },
            &[pred],
        ))
    }

    /// Reverse sweep from a scalar loss. Contributions are accumulated by
    /// addition in reverse record order, so results are bit-reproducible.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("loss does not belong to this tape"));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contrib) {
                    *e = *e + c;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, contrib).expect("gradient shape"));
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let bt = transpose_raw(bv.data(), k, n);
                    self.accumulate(grads, *a, matmul_raw(gd, &bt, m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    let at = transpose_raw(av.data(), m, k);
                    self.accumulate(grads, *b, matmul_raw(&at, gd, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                self.accumulate(grads, *a, transpose_raw(gd, s[0], s[1]));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|&v| -v).collect());
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, *x, gd.to_vec());
                let cols = node.value.cols();
                let mut gb = vec![T::zero(); cols];
                for row in gd.chunks(cols) {
                    for (o, &v) in gb.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                self.accumulate(grads, *bias, gb);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                self.accumulate(grads, *b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect());
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, gd.iter().map(|&v| v * *f).collect());
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let inv = T::one() / T::cst(xv.rows() as f64);
                let row: Vec<T> = gd.iter().map(|&v| v * inv).collect();
                let mut out = Vec::with_capacity(xv.numel());
                for _ in 0..xv.rows() {
                    out.extend_from_slice(&row);
                }
                self.accumulate(grads, *x, out);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gd.to_vec()),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    self.accumulate(grads, *p, gd[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut out = vec![T::zero(); xv.numel()];
                out[start * c..start * c + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *x, out);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let c = pv.cols();
                    let mut out = Vec::with_capacity(pv.numel());
                    for row in gd.chunks(total) {
                        out.extend_from_slice(&row[offset..offset + c]);
                    }
                    self.accumulate(grads, *p, out);
                    offset += c;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let (c, w) = (xv.cols(), node.value.cols());
                let mut out = vec![T::zero(); xv.numel()];
                for (r, row) in gd.chunks(w).enumerate() {
                    out[r * c + start..r * c + start + w].copy_from_slice(row);
                }
                self.accumulate(grads, *x, out);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut out = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(c).zip(gd.chunks(c)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    out.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                self.accumulate(grads, *x, out);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let gv = self.value(*gain).data();
                let dn = T::cst(d as f64);
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                let mut dx = Vec::with_capacity(gd.len());
                for (r, (gr, xr)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..d {
                        dgain[j] = dgain[j] + gr[j] * xr[j];
                        dbias[j] = dbias[j] + gr[j];
                        let dxh = gr[j] * gv[j];
                        mean_dxh = mean_dxh + dxh;
                        mean_dxh_xh = mean_dxh_xh + dxh * xr[j];
                    }
                    mean_dxh = mean_dxh / dn;
                    mean_dxh_xh = mean_dxh_xh / dn;
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        dx.push(rstd[r] * (dxh - mean_dxh - xr[j] * mean_dxh_xh));
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            Op::Gelu(x) => {
                let inv_sqrt_2pi = T::cst(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half = T::cst(0.5);
                let xv = self.value(*x).data();
                let out = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| {
                        let pdf = (-half * v * v).exp() * inv_sqrt_2pi;
                        g * (gelu_cdf(v) + v * pdf)
                    })
                    .collect();
                self.accumulate(grads, *x, out);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut out = Vec::with_capacity(y.len());
                for ((yr, gr), &n) in y.chunks(c).zip(gd.chunks(c)).zip(norms) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    out.extend(yr.iter().zip(gr).map(|(&p, &q)| (q - p * dot) / n));
                }
                self.accumulate(grads, *x, out);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.value(*logits).cols();
                let scale = gd[0] / T::cst(labels.len() as f64);
                let mut out: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    out[r * k + l] = out[r * k + l] - scale;
                }
                self.accumulate(grads, *logits, out);
            }
            Op::SmoothL1 { pred, target, beta } => {
                let scale = gd[0] / T::cst(target.len() as f64);
                let p = self.value(*pred).data();
                let out = p
                    .iter()
                    .zip(target)
                    .map(|(&q, &t)| {
                        let x = q - t;
                        let d = if x.abs() < *beta {
                            x / *beta
                        } else {
                            x.signum()
                        };
                        d * scale
                    })
                    .collect();
                self.accumulate(grads, *pred, out);
            }
        }
    }
}
