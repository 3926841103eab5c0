//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its forward value and enough saved state
//! for its vector-Jacobian product. [`Tape::backward`] walks the nodes in
//! reverse insertion order, which is a valid reverse topological order
//! because a node can only reference nodes created before it.
//!
//! Parameters are usually registered with [`Tape::leaf_ref`], which borrows
//! the caller's storage for the lifetime of the tape instead of copying it.

use std::borrow::Cow;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::functional::{gelu, gelu_grad, layer_norm_row, log_sum_exp, softmax_into};
use crate::real::{gemm, Real};
use crate::tensor::{rows_cols, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Softmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<'a, T: Clone> {
    value: Cow<'a, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

#[derive(Debug, Default)]
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

fn grad_slot<'g, T: Real>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Node<'_, T>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::InvalidValue {
            op,
            detail: format!("expected a rank-2 tensor, got shape {shape:?}"),
        }),
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [T]>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers an owned tensor.
    pub fn leaf(&mut self, tensor: Tensor<T>, requires_grad: bool) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(Cow::Owned(tensor.into_data()), shape, Op::Leaf, requires_grad)
    }

    /// Registers a borrowed tensor without copying it.
    pub fn leaf_ref(&mut self, tensor: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.push(
            Cow::Borrowed(tensor.data()),
            tensor.shape().to_vec(),
            Op::Leaf,
            requires_grad,
        )
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.to_vec()).expect("node shape is consistent")
    }

    /// The single element of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(mismatch("reshape", self.shape(x), &shape));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(value), shape, Op::Reshape(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let value: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(value), shape, Op::Add(a, b), rg))
    }

    /// `a + b` with `b` broadcast over every row of `a`'s last axis.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(a));
        if self.shape(b) != [cols] {
            return Err(mismatch("add_bias", self.shape(a), self.shape(b)));
        }
        let bias = self.value(b);
        let value: Vec<T> = self
            .value(a)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bias).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(value), shape, Op::AddBias(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let value: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(value), shape, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value: Vec<T> = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Cow::Owned(value), shape, Op::Scale(a, s), rg)
    }

    /// `(m x k) . (k x n) -> (m x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.shape(a))?;
        let (k2, n) = matrix_dims("matmul", self.shape(b))?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMul(a, b), rg))
    }

    /// `(m x k) . (n x k)^T -> (m x n)`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul_nt", self.shape(a))?;
        let (n, k2) = matrix_dims("matmul_nt", self.shape(b))?;
        if k != k2 {
            return Err(mismatch("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), true, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMulNT(a, b), rg))
    }

    /// Rows of a rank-2 `table` selected by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (n_rows, d) = matrix_dims("gather_rows", self.shape(table))?;
        let src = self.value(table);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n_rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    len: n_rows,
                });
            }
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Cow::Owned(out),
            vec![rows.len(), d],
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Normalises each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if cols == 0 || self.value(x).is_empty() {
            return Err(TensorError::Empty("layer_norm"));
        }
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        if !(eps > T::zero()) {
            return Err(TensorError::InvalidValue {
                op: "layer_norm",
                detail: "eps must be positive".into(),
            });
        }
        let mut out = vec![T::zero(); rows * cols];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        {
            let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
            for r in 0..rows {
                let span = r * cols..(r + 1) * cols;
                let (mu, rs) = layer_norm_row(&xv[span.clone()], gv, bv, eps, &mut out[span]);
                mean.push(mu);
                rstd.push(rs);
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value: Vec<T> = self.value(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Cow::Owned(value), shape, Op::Gelu(x), rg)
    }

    /// Softmax over the last axis. With `causal`, `x` must be rank 2 and
    /// entry `(i, j)` is masked out whenever `j > i`.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if cols == 0 {
            return Err(TensorError::Empty("softmax"));
        }
        if causal {
            matrix_dims("softmax", self.shape(x))?;
        }
        let mut out = vec![T::zero(); rows * cols];
        let xv = self.value(x);
        for r in 0..rows {
            let limit = if causal { (r + 1).min(cols) } else { cols };
            let span = r * cols..(r + 1) * cols;
            softmax_into(&xv[span.clone()], limit, &mut out[span]);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), shape, Op::Softmax(x), rg))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if start + len > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                len: cols,
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let mut shape = self.shape(x).to_vec();
        match shape.last_mut() {
            Some(last) => *last = len,
            None => shape = vec![len],
        }
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), shape, Op::SliceCols { x, start }, rg))
    }

    /// Concatenates along the last axis; every input must have the same row
    /// count. Scalars count as `1 x 1`. The result is rank 2.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(TensorError::Empty("concat_cols"));
        };
        let (rows, _) = rows_cols(self.shape(first));
        let mut total = 0;
        for &x in xs {
            let (r, c) = rows_cols(self.shape(x));
            if r != rows {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(x)));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                let (_, c) = rows_cols(self.shape(x));
                out.extend_from_slice(&self.value(x)[r * c..(r + 1) * c]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Cow::Owned(out), vec![rows, total], Op::ConcatCols(xs.to_vec()), rg))
    }

    /// Mean over rows of `-log softmax(row)[target]`; returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(logits));
        if rows == 0 || cols == 0 {
            return Err(TensorError::Empty("cross_entropy"));
        }
        if targets.len() != rows {
            return Err(mismatch("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); rows * cols];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    len: cols,
                });
            }
            let row = &lv[r * cols..(r + 1) * cols];
            total += log_sum_exp(row) - row[t];
            softmax_into(row, cols, &mut probs[r * cols..(r + 1) * cols]);
        }
        let loss = total / T::from_usize(rows).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            Cow::Owned(vec![loss]),
            vec![],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: T = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(Cow::Owned(vec![total]), vec![], Op::Sum(x), rg)
    }

    /// Inverted dropout. A zero rate records nothing and returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidValue {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let value: Vec<T> = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(value), shape, Op::Dropout { x, mask }, rg))
    }

    /// Back-propagates from a scalar `loss`, accumulating into the `grad` of
    /// every leaf that requires a gradient and is an ancestor of `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += *v),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        // Each `acc` re-borrows `grads` for one parent, so a node used as both
        // operands simply accumulates twice.
        macro_rules! acc {
            ($v:expr, |$gp:ident| $body:block) => {
                if let Some($gp) = grad_slot(grads, nodes, $v) $body
            };
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Reshape(a) => acc!(*a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }),
            Op::Add(a, b) => {
                acc!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                });
                acc!(*b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                });
            }
            Op::AddBias(a, b) => {
                acc!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                });
                acc!(*b, |gb| {
                    let cols = gb.len();
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc!(*a, |ga| {
                    for ((x, &gy), &bb) in ga.iter_mut().zip(g).zip(bv.iter()) {
                        *x += gy * bb;
                    }
                });
                acc!(*b, |gb| {
                    for ((x, &gy), &aa) in gb.iter_mut().zip(g).zip(av.iter()) {
                        *x += gy * aa;
                    }
                });
            }
            Op::Scale(a, s) => acc!(*a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s);
            }),
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc!(*a, |ga| {
                    gemm(m, n, k, g, false, bv, true, ga, true);
                });
                acc!(*b, |gb| {
                    gemm(k, m, n, av, true, g, false, gb, true);
                });
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[0];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc!(*a, |ga| {
                    gemm(m, n, k, g, false, bv, false, ga, true);
                });
                acc!(*b, |gb| {
                    gemm(n, m, k, g, true, av, false, gb, true);
                });
            }
            Op::Gather { table, rows } => acc!(*table, |gt| {
                let d = nodes[table.0].shape[1];
                for (r, &src) in rows.iter().enumerate() {
                    let dst = &mut gt[src * d..(src + 1) * d];
                    dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(x, &y)| *x += y);
                }
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xv = &nodes[x.0].value;
                let gv = &nodes[gain.0].value;
                let cols = gv.len();
                let n = T::from_usize(cols).unwrap();
                acc!(*x, |gx| {
                    let mut dxhat = vec![T::zero(); cols];
                    for (r, (&mu, &rs)) in mean.iter().zip(rstd).enumerate() {
                        let off = r * cols;
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for c in 0..cols {
                            let xhat = (xv[off + c] - mu) * rs;
                            dxhat[c] = g[off + c] * gv[c];
                            sum_d += dxhat[c];
                            sum_dx += dxhat[c] * xhat;
                        }
                        for c in 0..cols {
                            let xhat = (xv[off + c] - mu) * rs;
                            gx[off + c] += rs * (dxhat[c] - sum_d / n - xhat * sum_dx / n);
                        }
                    }
                });
                acc!(*gain, |gg| {
                    for (r, (&mu, &rs)) in mean.iter().zip(rstd).enumerate() {
                        let off = r * cols;
                        for c in 0..cols {
                            gg[c] += g[off + c] * (xv[off + c] - mu) * rs;
                        }
                    }
                });
                acc!(*bias, |gb| {
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Gelu(a) => {
                let av = &nodes[a.0].value;
                acc!(*a, |ga| {
                    for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(av.iter()) {
                        *x += gy * gelu_grad(v);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &nodes[i].value;
                let (_, cols) = rows_cols(&nodes[i].shape);
                acc!(*a, |ga| {
                    for ((gx, gy), yy) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: T = gy.iter().zip(yy).map(|(&p, &q)| p * q).sum();
                        for c in 0..cols {
                            gx[c] += yy[c] * (gy[c] - dot);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (_, cols) = rows_cols(&nodes[x.0].shape);
                let (_, len) = rows_cols(&nodes[i].shape);
                acc!(*x, |gx| {
                    for (r, row) in g.chunks(len).enumerate() {
                        let dst = &mut gx[r * cols + start..r * cols + start + len];
                        dst.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].shape[1];
                let mut offset = 0;
                for &p in parts {
                    let (_, c) = rows_cols(&nodes[p.0].shape);
                    acc!(p, |gp| {
                        for (r, dst) in gp.chunks_mut(c).enumerate() {
                            let src = &g[r * total + offset..r * total + offset + c];
                            dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                        }
                    });
                    offset += c;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => acc!(*logits, |gl| {
                let rows = targets.len();
                let cols = probs.len() / rows;
                let w = g[0] / T::from_usize(rows).unwrap();
                for (r, &t) in targets.iter().enumerate() {
                    let off = r * cols;
                    for c in 0..cols {
                        gl[off + c] += w * probs[off + c];
                    }
                    gl[off + t] -= w;
                }
            }),
            Op::Sum(a) => acc!(*a, |ga| {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }),
            Op::Dropout { x, mask } => acc!(*x, |gx| {
                for ((d, &gy), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *d += gy * m;
                }
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn sum_has_all_ones_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1., -2., 3., 0.5, 9., -1.]), true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn dot_product_gradients_swap_operands() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        let y = tape.leaf(t(&[2], &[3., 4.]), true);
        let prod = tape.mul(x, y).unwrap();
        let loss = tape.sum(prod);
        assert_eq!(tape.scalar(loss), 11.0);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert_eq!(tape.grad(y).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[5.0]), true);
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn matmul_shape_algebra() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros([2, 3]), false);
        let b = tape.leaf(Tensor::zeros([3, 4]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
        assert!(matches!(tape.matmul(b, a), Err(TensorError::ShapeMismatch { .. })));
        assert!(matches!(tape.matmul_nt(a, b), Err(TensorError::ShapeMismatch { .. })));
        let d = tape.matmul_nt(a, a).unwrap();
        assert_eq!(tape.shape(d), &[2, 2]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        let c = tape.leaf(t(&[2], &[3., 4.]), false);
        let p = tape.mul(x, c).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3, 3], &[1., 9., 9., 1., 1., 9., 1., 1., 1.]), false);
        let p = tape.softmax(x, true).unwrap();
        let v = tape.value(p);
        assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]);
        assert!((v[3] - 0.5).abs() < 1e-15 && v[5] == 0.0);
        assert!((v[6..9].iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(Tensor::zeros([4, 2]), true);
        assert!(matches!(
            tape.gather_rows(table, &[1, 4]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn zero_rate_dropout_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        assert_eq!(tape.dropout(x, 0.0, &mut rng).unwrap(), x);
        let y = tape.dropout(x, 0.5, &mut rng).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0 || v == 2.0 || v == 4.0));
    }
}
