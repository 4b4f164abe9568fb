//! Reverse-mode differentiation over an explicit tape.
//!
//! A [`Graph`] records every operation in execution order. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! additively, so a node consumed twice receives the sum of both
//! contributions. A graph lives for exactly one forward/backward step.

use super::{kernels, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Unfold {
        x: Var,
        kernel: usize,
    },
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-column statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T: Real> {
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
    pub rows: usize,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Gradients are tracked when `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf that participates in differentiation.
    pub fn param(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = true;
        tensor.grad = None;
        self.leaf(tensor)
    }

    /// Adds a leaf that never receives gradients.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let out = kernels::transpose(self.value(x).data(), m, n);
        let t = Tensor::new(vec![n, m], out)?;
        self.push("transpose", t, Op::Transpose(x), &[x])
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(name, t, op, &[a, b])
    }

    fn map_unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(name, t, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[m×n] + bias[n]`, the bias broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(bias).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                left: vec![m, n],
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let t = Tensor::new(vec![m, n], data)?;
        self.push("add_row_bias", t, Op::AddRowBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.map_unary("scale", x, |v| v * s, Op::Scale(x, s))
    }

    /// Elementwise product with a constant of the same shape (dropout masks).
    pub fn mul_const(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        if factors.len() != self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                op: "mul_const",
                left: self.shape(x).to_vec(),
                right: vec![factors.len()],
            });
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&factors)
            .map(|(&v, &f)| v * f)
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("mul_const", t, Op::MulConst(x, factors), &[x])
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_unary("relu", x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map_unary("tanh", x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary("sigmoid", x, kernels::sigmoid, Op::Sigmoid(x))
    }

    // ---- normalisation --------------------------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(x, axis, None)
    }

    /// Softmax along `axis` where positions with `mask[j] == true` are
    /// excluded and receive exactly zero probability.
    pub fn softmax_masked(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let len = shape[axis];
        if let Some(m) = mask {
            if m.len() != len {
                return Err(Error::ShapeMismatch {
                    op: "softmax",
                    left: shape.clone(),
                    right: vec![m.len()],
                });
            }
            if m.iter().all(|&b| b) {
                return Err(Error::invalid("softmax", "every position along the axis is masked"));
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let keep = |j: usize| mask.is_none_or(|m| !m[j]);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = T::neg_infinity();
                for j in (0..len).filter(|&j| keep(j)) {
                    max = max.max(src[at(j)]);
                }
                let mut total = T::zero();
                for j in (0..len).filter(|&j| keep(j)) {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in (0..len).filter(|&j| keep(j)) {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push("softmax", t, Op::Softmax { x, axis }, &[x])
    }

    /// Normalises each row of `x` to zero mean and unit variance, then
    /// applies `gain` and `bias` along the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: shape,
                right: self.shape(gain).to_vec(),
            });
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let src = self.value(x).data();
        let rows = src.len() / n;
        let nf = T::lit(n as f64);
        let mut xhat = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Batch normalisation of a `rows × channels` matrix using the batch's
    /// own column statistics. Returns the statistics alongside the output so
    /// callers can maintain running estimates.
    pub fn batch_norm_train(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (m, n) = self.dims2(x)?;
        let src = self.value(x).data();
        let mf = T::lit(m as f64);
        let mut mean = vec![T::zero(); n];
        let mut var = vec![T::zero(); n];
        for row in src.chunks(n) {
            for j in 0..n {
                mean[j] = mean[j] + row[j];
            }
        }
        mean.iter_mut().for_each(|v| *v = *v / mf);
        for row in src.chunks(n) {
            for j in 0..n {
                let d = row[j] - mean[j];
                var[j] = var[j] + d * d;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / mf);
        let var_out = var.clone();
        let stats = BatchStats {
            mean: mean.clone(),
            var: var_out,
            rows: m,
        };
        let v = self.batch_norm_with(x, gain, bias, &mean, &var, eps, true)?;
        Ok((v, stats))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gain: Var, bias: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        self.batch_norm_with(x, gain, bias, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_with(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        mean: &[T],
        var: &[T],
        eps: T,
        batch_stats: bool,
    ) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::invalid("batch_norm", "eps must be positive"));
        }
        let (m, n) = self.dims2(x)?;
        for (what, len) in [
            ("gain", self.value(gain).numel()),
            ("bias", self.value(bias).numel()),
            ("mean", mean.len()),
            ("var", var.len()),
        ] {
            if len != n {
                return Err(Error::invalid(
                    "batch_norm",
                    format!("{what} has {len} entries, expected {n} channels"),
                ));
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let src = self.value(x).data();
        let mut xhat = Vec::with_capacity(m * n);
        let mut out = Vec::with_capacity(m * n);
        for row in src.chunks(n) {
            for j in 0..n {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.push(
            "batch_norm",
            t,
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gain, bias],
        )
    }

    // ---- indexing and layout --------------------------------------------

    /// Selects rows of a matrix (embedding lookup, CLS pooling, MLM targets).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows", "no rows selected"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {bad} out of range for {m} rows"),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(vec![idx.len(), n], out)?;
        self.push(
            "gather_rows",
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let (m, _) = self.dims2(*parts.first().ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pm != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: vec![pm, pn],
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![m, total], out)?;
        self.push("concat_cols", t, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, n) = self.dims2(*parts.first().ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?)?;
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pn != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]).to_vec(),
                    right: vec![pm, pn],
                });
            }
            rows += pm;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, n], out)?;
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start >= end || end > n {
            return Err(Error::invalid(
                "slice_cols",
                format!("range {start}..{end} invalid for {n} columns"),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * (end - start));
        for row in src.chunks(n) {
            out.extend_from_slice(&row[start..end]);
        }
        let t = Tensor::new(vec![m, end - start], out)?;
        self.push("slice_cols", t, Op::SliceCols { x, start }, &[x])
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start >= end || end > m {
            return Err(Error::invalid(
                "slice_rows",
                format!("range {start}..{end} invalid for {m} rows"),
            ));
        }
        let out = self.value(x).data()[start * n..end * n].to_vec();
        let t = Tensor::new(vec![end - start, n], out)?;
        self.push("slice_rows", t, Op::SliceRows { x, start }, &[x])
    }

    /// Same-padded sliding windows over time: `T×C` becomes `T×(kernel·C)`
    /// where row `t` holds input rows `t-pad ..= t+pad`, zeros outside.
    pub fn unfold(&mut self, x: Var, kernel: usize) -> Result<Var> {
        if kernel.is_multiple_of(2) {
            return Err(Error::invalid("unfold", format!("kernel size {kernel} must be odd")));
        }
        let (t_len, c) = self.dims2(x)?;
        let out = kernels::unfold(self.value(x).data(), t_len, c, kernel);
        let t = Tensor::new(vec![t_len, kernel * c], out)?;
        self.push("unfold", t, Op::Unfold { x, kernel }, &[x])
    }

    /// Column means of a matrix, as a `1×n` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let mut out = vec![T::zero(); n];
        for row in self.value(x).data().chunks(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let mf = T::lit(m as f64);
        out.iter_mut().for_each(|v| *v = *v / mf);
        let t = Tensor::new(vec![1, n], out)?;
        self.push("mean_rows", t, Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(logits)?;
        if targets.len() != b {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} targets for a batch of {b}", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::TargetOutOfRange { target: t, classes: c });
        }
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = T::zero();
        for (row, &t) in src.chunks(c).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + total.ln();
            loss = loss + (lse - row[t]);
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = loss / T::lit(b as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from `output`, seeded with ones.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let seed = vec![T::one(); self.value(output).numel()];
        self.backward_with(output, seed)
    }

    /// Reverse pass from `output` with an explicit upstream gradient.
    pub fn backward_with(&self, output: Var, seed: Vec<T>) -> Gradients<T> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[output.0].needs_grad {
            grads[output.0] = Some(seed);
        }
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }

    fn propagate(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |g| kernels::matmul_a_bt_acc(dy, bv, g, m, n, k));
                self.accumulate(grads, *b, |g| kernels::matmul_at_b_acc(av, dy, g, m, k, n));
            }
            Op::Transpose(x) => {
                let (m, n) = self.value(*x).dims2().unwrap();
                self.accumulate(grads, *x, |g| {
                    for r in 0..m {
                        for c in 0..n {
                            g[r * n + c] = g[r * n + c] + dy[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, dy));
                self.accumulate(grads, *b, |g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, dy));
                self.accumulate(grads, *b, |g| g.iter_mut().zip(dy).for_each(|(g, &d)| *g = *g - d));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(dy).zip(bv) {
                        *g = *g + d * o;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(dy).zip(av) {
                        *g = *g + d * o;
                    }
                });
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, *x, |g| add_into(g, dy));
                let n = self.value(*bias).numel();
                self.accumulate(grads, *bias, |g| {
                    for row in dy.chunks(n) {
                        add_into(g, row);
                    }
                });
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, |g| g.iter_mut().zip(dy).for_each(|(g, &d)| *g = *g + d * *s));
            }
            Op::MulConst(x, f) => {
                self.accumulate(grads, *x, |g| {
                    for ((g, &d), &c) in g.iter_mut().zip(dy).zip(f) {
                        *g = *g + d * c;
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |g| {
                    for ((g, &d), &v) in g.iter_mut().zip(dy).zip(xv) {
                        if v > T::zero() {
                            *g = *g + d;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                self.accumulate(grads, *x, |g| {
                    for ((g, &d), &t) in g.iter_mut().zip(dy).zip(y) {
                        *g = *g + d * (T::one() - t * t);
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, |g| {
                    for ((g, &d), &s) in g.iter_mut().zip(dy).zip(y) {
                        *g = *g + d * s * (T::one() - s);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let len = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                self.accumulate(grads, *x, |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: T = (0..len).map(|j| dy[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                let k = at(j);
                                g[k] = g[k] + y[k] * (dy[k] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                let nf = T::lit(n as f64);
                self.accumulate(grads, *gain, |g| {
                    for (drow, hrow) in dy.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            g[j] = g[j] + drow[j] * hrow[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |g| {
                    for drow in dy.chunks(n) {
                        add_into(g, drow);
                    }
                });
                self.accumulate(grads, *x, |g| {
                    for (r, ((grow, drow), hrow)) in g.chunks_mut(n).zip(dy.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                        let dh: Vec<T> = drow.iter().zip(gv).map(|(&d, &w)| d * w).collect();
                        let sum_dh: T = dh.iter().copied().sum();
                        let sum_dh_h: T = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum();
                        let scale = inv_std[r] / nf;
                        for j in 0..n {
                            grow[j] = grow[j] + scale * (nf * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let n = self.value(*gain).numel();
                let m = dy.len() / n;
                let gv = self.value(*gain).data();
                self.accumulate(grads, *gain, |g| {
                    for (drow, hrow) in dy.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            g[j] = g[j] + drow[j] * hrow[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |g| {
                    for drow in dy.chunks(n) {
                        add_into(g, drow);
                    }
                });
                self.accumulate(grads, *x, |g| {
                    if *batch_stats {
                        let mf = T::lit(m as f64);
                        let mut sum_dh = vec![T::zero(); n];
                        let mut sum_dh_h = vec![T::zero(); n];
                        for (drow, hrow) in dy.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                let dh = drow[j] * gv[j];
                                sum_dh[j] = sum_dh[j] + dh;
                                sum_dh_h[j] = sum_dh_h[j] + dh * hrow[j];
                            }
                        }
                        for ((grow, drow), hrow) in g.chunks_mut(n).zip(dy.chunks(n)).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                let dh = drow[j] * gv[j];
                                grow[j] = grow[j]
                                    + inv_std[j] / mf * (mf * dh - sum_dh[j] - hrow[j] * sum_dh_h[j]);
                            }
                        }
                    } else {
                        for (grow, drow) in g.chunks_mut(n).zip(dy.chunks(n)) {
                            for j in 0..n {
                                grow[j] = grow[j] + drow[j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let n = self.value(*x).shape()[1];
                self.accumulate(grads, *x, |g| {
                    for (drow, &r) in dy.chunks(n).zip(idx) {
                        add_into(&mut g[r * n..(r + 1) * n], drow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    self.accumulate(grads, p, |g| {
                        for (grow, drow) in g.chunks_mut(w).zip(dy.chunks(total)) {
                            add_into(grow, &drow[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, |g| add_into(g, &dy[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).shape()[1];
                let w = node.value.shape()[1];
                self.accumulate(grads, *x, |g| {
                    for (grow, drow) in g.chunks_mut(n).zip(dy.chunks(w)) {
                        add_into(&mut grow[*start..*start + w], drow);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let n = self.value(*x).shape()[1];
                self.accumulate(grads, *x, |g| add_into(&mut g[start * n..start * n + dy.len()], dy));
            }
            Op::Unfold { x, kernel } => {
                let (t_len, c) = self.value(*x).dims2().unwrap();
                self.accumulate(grads, *x, |g| kernels::unfold_backward_acc(dy, g, t_len, c, *kernel));
            }
            Op::MeanRows(x) => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let mf = T::lit(m as f64);
                self.accumulate(grads, *x, |g| {
                    for grow in g.chunks_mut(n) {
                        for j in 0..n {
                            grow[j] = grow[j] + dy[j] / mf;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |g| g.iter_mut().for_each(|g| *g = *g + dy[0]));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).shape()[1];
                let scale = dy[0] / T::lit(targets.len() as f64);
                self.accumulate(grads, *logits, |g| {
                    for (r, (grow, prow)) in g.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                        for j in 0..c {
                            let onehot = if j == targets[r] { T::one() } else { T::zero() };
                            grow[j] = grow[j] + scale * (prow[j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(acc: &mut [T], src: &[T]) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a = *a + s;
    }
}
