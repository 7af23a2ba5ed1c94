//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Nodes whose inputs
//! are all constants are folded into constants, so a graph built from frozen
//! tensors records nothing to differentiate. [`Graph::backward`] walks the tape
//! once in reverse and returns the accumulated adjoints of every parameter leaf.

use super::tensor::matmul_impl;
use super::{NumericsError, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Relu(Var),
    SoftmaxRows(Var),
    ConcatCols(Var, Var),
    SliceCols {
        src: Var,
        start: usize,
    },
    SplitHeads {
        src: Var,
        groups: usize,
        heads: usize,
    },
    MergeHeads {
        src: Var,
        groups: usize,
        heads: usize,
    },
    Conv1d {
        input: Var,
        kernel: Var,
    },
    Sum(Var),
    Mean(Var),
    RowMean(Var),
    RowStd {
        src: Var,
        eps: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation. Single-threaded; build one per forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Graph::backward`], indexed by leaf handle.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = matmul_impl(self.value(a), false, self.value(b), false)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).add(self.value(b))?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).sub(self.value(b))?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).mul(self.value(b))?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`cols` bias to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let b = self.value(bias);
        let cols = x.cols();
        if b.len() != cols {
            return Err(NumericsError::shape(
                "add_bias",
                format!("bias of {} for {cols} columns", b.len()),
            ));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.push("add_bias", out, Op::AddBias(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|v| v * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self
            .value(a)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", out, Op::Relu(a), &[a])
    }

    /// Softmax over the last axis, computed with row-max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let cols = x.cols();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(cols) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        self.push("softmax_rows", out, Op::SoftmaxRows(a), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() != 2 || y.shape().len() != 2 || x.rows() != y.rows() {
            return Err(NumericsError::shape(
                "concat_cols",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let (rows, ca, cb) = (x.rows(), x.cols(), y.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(x.row(r));
            data.extend_from_slice(y.row(r));
        }
        let out = Tensor::new(&[rows, ca + cb], data)?;
        self.push("concat_cols", out, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let x = self.value(a);
        if x.shape().len() != 2 || len == 0 || start + len > x.cols() {
            return Err(NumericsError::shape(
                "slice_cols",
                format!("[{start}, {}) of {:?}", start + len, x.shape()),
            ));
        }
        let rows = x.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let out = Tensor::new(&[rows, len], data)?;
        self.push("slice_cols", out, Op::SliceCols { src: a, start }, &[a])
    }

    /// `[groups·C, H·dh]` → `[groups·H, C, dh]`: one C×dh block per (group, head).
    pub fn split_heads(
        &mut self,
        a: Var,
        groups: usize,
        heads: usize,
    ) -> Result<Var, NumericsError> {
        let out = split_heads(self.value(a), groups, heads)?;
        self.push(
            "split_heads",
            out,
            Op::SplitHeads {
                src: a,
                groups,
                heads,
            },
            &[a],
        )
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(
        &mut self,
        a: Var,
        groups: usize,
        heads: usize,
    ) -> Result<Var, NumericsError> {
        let out = merge_heads(self.value(a), groups, heads)?;
        self.push(
            "merge_heads",
            out,
            Op::MergeHeads {
                src: a,
                groups,
                heads,
            },
            &[a],
        )
    }

    /// Stride-1 correlation of every row with `kernel`, zero padded at the far end:
    /// `out[r][i] = Σ_t kernel[t] · x[r][i + t]` over `i + t < d`.
    pub fn conv1d(&mut self, input: Var, kernel: Var) -> Result<Var, NumericsError> {
        let out = conv1d_rows(self.value(input), self.value(kernel))?;
        self.push(
            "conv1d",
            out,
            Op::Conv1d { input, kernel },
            &[input, kernel],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let out = Tensor::scalar(x.sum() / T::of(x.len() as f64));
        self.push("mean", out, Op::Mean(a), &[a])
    }

    /// Per-row mean as an `[R, 1]` column.
    pub fn row_mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let (rows, cols) = x.dims2();
        let n = T::of(cols as f64);
        let data = (0..rows)
            .map(|r| x.row(r).iter().copied().sum::<T>() / n)
            .collect();
        let out = Tensor::new(&[rows, 1], data)?;
        self.push("row_mean", out, Op::RowMean(a), &[a])
    }

    /// Per-row population standard deviation clamped below at `eps`, as `[R, 1]`.
    pub fn row_std(&mut self, a: Var, eps: T) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let rows = x.rows();
        let data = (0..rows)
            .map(|r| row_population_std(x.row(r)).max(eps))
            .collect();
        let out = Tensor::new(&[rows, 1], data)?;
        self.push("row_std", out, Op::RowStd { src: a, eps }, &[a])
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Sign of every differentiable ReLU input (`> 0`), in recording order.
    /// Two evaluations of the same program with different signatures sit on
    /// different sides of a kink.
    pub fn relu_signature(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.nodes[a.0].value.data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: node.value.shape().to_vec(),
            });
        }
        if !node.requires_grad {
            return Err(NumericsError::Detached);
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(node.value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<(), NumericsError> {
        let out = &self.nodes[idx].value;
        match self.nodes[idx].op.clone() {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(a) {
                    let ga = matmul_impl(g, false, self.value(b), true)?;
                    self.accumulate(grads, a, ga);
                }
                if self.requires_grad(b) {
                    let gb = matmul_impl(self.value(a), true, g, false)?;
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Transpose(a) => {
                let ga = g.transpose().reshape(self.value(a).shape())?;
                self.accumulate(grads, a, ga);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    self.accumulate(grads, a, g.mul(self.value(b))?);
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, g.mul(self.value(a))?);
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, a, g.clone());
                if self.requires_grad(bias) {
                    let cols = g.cols();
                    let mut gb = vec![T::zero(); cols];
                    for row in g.data().chunks(cols) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    let gb = Tensor::new(self.value(bias).shape(), gb)?;
                    self.accumulate(grads, bias, gb);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, a, g.map(|v| v * s)),
            Op::Relu(a) => {
                let ga = g.zip_with(self.value(a), "relu", |gv, x| {
                    if x > T::zero() {
                        gv
                    } else {
                        T::zero()
                    }
                })?;
                self.accumulate(grads, a, ga);
            }
            Op::SoftmaxRows(a) => {
                let cols = out.cols();
                let mut ga = g.clone();
                for (grow, yrow) in ga.data_mut().chunks_mut(cols).zip(out.data().chunks(cols)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&gv, &y)| gv * y).sum();
                    for (gv, &y) in grow.iter_mut().zip(yrow) {
                        *gv = y * (*gv - dot);
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(a).cols();
                let cb = self.value(b).cols();
                let rows = g.rows();
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = g.row(r);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, a, Tensor::new(&[rows, ca], ga)?);
                self.accumulate(grads, b, Tensor::new(&[rows, cb], gb)?);
            }
            Op::SliceCols { src, start } => {
                let mut gs = Tensor::zeros(self.value(src).shape());
                let len = g.cols();
                let cols = gs.cols();
                for r in 0..g.rows() {
                    gs.data_mut()[r * cols + start..r * cols + start + len]
                        .copy_from_slice(g.row(r));
                }
                self.accumulate(grads, src, gs);
            }
            Op::SplitHeads { src, groups, heads } => {
                self.accumulate(grads, src, merge_heads(g, groups, heads)?);
            }
            Op::MergeHeads { src, groups, heads } => {
                self.accumulate(grads, src, split_heads(g, groups, heads)?);
            }
            Op::Conv1d { input, kernel } => {
                let x = self.value(input);
                let w = self.value(kernel);
                let (rows, d) = x.dims2();
                let k = w.len();
                if self.requires_grad(input) {
                    let mut gx = Tensor::zeros(x.shape());
                    for r in 0..rows {
                        let grow = g.row(r);
                        let dst = &mut gx.data_mut()[r * d..(r + 1) * d];
                        for (i, &gv) in grow.iter().enumerate() {
                            for (t, &wv) in w.data().iter().enumerate().take(k.min(d - i)) {
                                dst[i + t] += wv * gv;
                            }
                        }
                    }
                    self.accumulate(grads, input, gx);
                }
                if self.requires_grad(kernel) {
                    let mut gw = vec![T::zero(); k];
                    for r in 0..rows {
                        let grow = g.row(r);
                        let xrow = x.row(r);
                        for (t, acc) in gw.iter_mut().enumerate() {
                            for i in 0..d.saturating_sub(t) {
                                *acc += grow[i] * xrow[i + t];
                            }
                        }
                    }
                    self.accumulate(grads, kernel, Tensor::new(w.shape(), gw)?);
                }
            }
            Op::Sum(a) => {
                let ga = Tensor::full(self.value(a).shape(), g.data()[0]);
                self.accumulate(grads, a, ga);
            }
            Op::Mean(a) => {
                let x = self.value(a);
                let ga = Tensor::full(x.shape(), g.data()[0] / T::of(x.len() as f64));
                self.accumulate(grads, a, ga);
            }
            Op::RowMean(a) => {
                let x = self.value(a);
                let cols = x.cols();
                let n = T::of(cols as f64);
                let mut ga = Tensor::zeros(x.shape());
                for (r, row) in ga.data_mut().chunks_mut(cols).enumerate() {
                    row.fill(g.data()[r] / n);
                }
                self.accumulate(grads, a, ga);
            }
            Op::RowStd { src, eps } => {
                let x = self.value(src);
                let cols = x.cols();
                let n = T::of(cols as f64);
                let mut ga = Tensor::zeros(x.shape());
                for (r, row) in ga.data_mut().chunks_mut(cols).enumerate() {
                    let xr = x.row(r);
                    let s = out.data()[r];
                    if s <= eps {
                        continue;
                    }
                    let mean = xr.iter().copied().sum::<T>() / n;
                    for (gv, &xv) in row.iter_mut().zip(xr) {
                        *gv = g.data()[r] * (xv - mean) / (n * s);
                    }
                }
                self.accumulate(grads, src, ga);
            }
        }
        Ok(())
    }
}

pub(crate) fn row_population_std<T: Scalar>(row: &[T]) -> T {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    var.sqrt()
}

fn split_heads<T: Scalar>(
    x: &Tensor<T>,
    groups: usize,
    heads: usize,
) -> Result<Tensor<T>, NumericsError> {
    let (rows, d) = x.dims2();
    if x.shape().len() != 2 || groups == 0 || heads == 0 || rows % groups != 0 || d % heads != 0 {
        return Err(NumericsError::shape(
            "split_heads",
            format!("{:?} into {groups} groups × {heads} heads", x.shape()),
        ));
    }
    let c = rows / groups;
    let dh = d / heads;
    let mut out = vec![T::zero(); x.len()];
    for gi in 0..groups {
        for ch in 0..c {
            let src = x.row(gi * c + ch);
            for h in 0..heads {
                let base = ((gi * heads + h) * c + ch) * dh;
                out[base..base + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
            }
        }
    }
    Tensor::new(&[groups * heads, c, dh], out)
}

fn merge_heads<T: Scalar>(
    x: &Tensor<T>,
    groups: usize,
    heads: usize,
) -> Result<Tensor<T>, NumericsError> {
    let (gh, c, dh) = x.batch_dims();
    if x.shape().len() != 3 || groups == 0 || heads == 0 || gh != groups * heads {
        return Err(NumericsError::shape(
            "merge_heads",
            format!("{:?} from {groups} groups × {heads} heads", x.shape()),
        ));
    }
    let d = heads * dh;
    let mut out = vec![T::zero(); x.len()];
    for gi in 0..groups {
        for h in 0..heads {
            for ch in 0..c {
                let base = ((gi * heads + h) * c + ch) * dh;
                let dst = (gi * c + ch) * d + h * dh;
                out[dst..dst + dh].copy_from_slice(&x.data()[base..base + dh]);
            }
        }
    }
    Tensor::new(&[groups * c, d], out)
}

pub(crate) fn conv1d_rows<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<Tensor<T>, NumericsError> {
    let (rows, d) = x.dims2();
    let k = w.len();
    if w.shape().len() != 1 || k > d {
        return Err(NumericsError::shape(
            "conv1d",
            format!("kernel {:?} on rows of length {d}", w.shape()),
        ));
    }
    let mut out = Tensor::zeros(x.shape());
    let wd = w.data();
    for r in 0..rows {
        let xr = x.row(r);
        let dst = &mut out.data_mut()[r * d..(r + 1) * d];
        for (i, o) in dst.iter_mut().enumerate() {
            let taps = k.min(d - i);
            let mut acc = T::zero();
            for t in 0..taps {
                acc += wd[t] * xr[i + t];
            }
            *o = acc;
        }
    }
    Ok(out)
}
