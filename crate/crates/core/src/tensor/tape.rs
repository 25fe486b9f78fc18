use std::sync::Arc;

use super::{as_matrix, dim_err, BoolTensor, Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Silu,
    Scale(f64),
}

#[derive(Debug)]
pub(crate) enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: S },
    Sigmoid { x: Var },
    Silu { x: Var },
    MaskedSoftmax { x: Var },
    RmsNorm { x: Var, inv_rms: Vec<S> },
    Rope { x: Var, cos: Arc<Vec<S>>, sin: Arc<Vec<S>> },
    Gather { table: Var, ids: Vec<u32> },
    NarrowCols { x: Var, start: usize },
    ConcatCols { xs: Vec<Var> },
    Sum { x: Var },
    CrossEntropy { logits: Var, targets: Vec<Option<u32>>, probs: Vec<S> },
}

pub(crate) struct Node<S> {
    pub(crate) value: Tensor<S>,
    pub(crate) op: Op<S>,
    pub(crate) requires_grad: bool,
}

/// Records operations for reverse-mode (and tangent-mode) differentiation.
///
/// Node ids grow monotonically and every op refers only to earlier nodes, so
/// the node order is already a topological order.
pub struct Tape<S> {
    pub(crate) nodes: Vec<Node<S>>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// While disabled, new nodes never require gradients.
    pub fn set_grad_enabled(&mut self, enabled: bool) {
        self.grad_enabled = enabled;
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Same values, severed from the graph: nothing upstream of `x` receives
    /// gradient (or tangent) through the returned node.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix("matmul", self.value(a))?;
        let (k2, n) = as_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(dim_err(
                "matmul",
                format!("inner extents differ: [{m}, {k}] x [{k2}, {n}]"),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = as_matrix("transpose", self.value(x))?;
        let src = self.value(x).data();
        let mut out = vec![S::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let value = Tensor::new(vec![cols, rows], out)?;
        self.push("transpose", value, Op::Transpose { x, rows, cols }, &[x])
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err(
                op,
                format!("shape {sb:?} is not a trailing suffix of {sa:?}"),
            ));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        self.check_broadcast(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    /// `a + b`, where `b`'s shape is a trailing suffix of `a`'s and is
    /// repeated over the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale { x, factor }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("sigmoid", value, Op::Sigmoid { x }, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * sigmoid(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("silu", value, Op::Silu { x }, &[x])
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(dim_err(
                "elementwise",
                format!("{op:?} takes {arity} inputs, got {}", inputs.len()),
            ));
        }
        match op {
            ElementwiseOp::Add => self.add(inputs[0], inputs[1]),
            ElementwiseOp::Sub => self.sub(inputs[0], inputs[1]),
            ElementwiseOp::Mul => self.mul(inputs[0], inputs[1]),
            ElementwiseOp::Sigmoid => self.sigmoid(inputs[0]),
            ElementwiseOp::Silu => self.silu(inputs[0]),
            ElementwiseOp::Scale(f) => self.scale(inputs[0], S::lit(f)),
        }
    }

    /// Softmax over the last dimension restricted to allowed positions.
    /// Masked positions get exactly zero probability. The mask's shape must
    /// be a trailing suffix of the logits' shape (e.g. one `[t, t]` mask for
    /// `[heads, t, t]` scores).
    pub fn masked_softmax(&mut self, x: Var, mask: &BoolTensor) -> Result<Var> {
        let xv = self.value(x);
        let sx = xv.shape();
        let sm = mask.shape();
        if sm.len() > sx.len() || sx[sx.len() - sm.len()..] != *sm {
            return Err(dim_err(
                "masked_softmax",
                format!("mask shape {sm:?} is not a trailing suffix of {sx:?}"),
            ));
        }
        let n = xv.cols();
        let mask_rows = mask.data().len() / n;
        let mut out = vec![S::zero(); xv.len()];
        for (r, (row, out_row)) in xv
            .data()
            .chunks_exact(n)
            .zip(out.chunks_exact_mut(n))
            .enumerate()
        {
            let m = &mask.data()[(r % mask_rows) * n..(r % mask_rows + 1) * n];
            softmax_row_into(row, Some(m), out_row).ok_or(TensorError::DegenerateRow { row: r })?;
        }
        let value = Tensor::new(sx.to_vec(), out)?;
        self.push("masked_softmax", value, Op::MaskedSoftmax { x }, &[x])
    }

    /// Parameterless RMS normalization over the last dimension:
    /// `x / sqrt(mean(x²) + eps)`.
    pub fn rms_norm(&mut self, x: Var, eps: S) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut inv_rms = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(d) {
            let ms = row.iter().fold(S::zero(), |acc, &v| acc + v * v) / S::from_usize(d).unwrap();
            let r = (ms + eps).sqrt().recip();
            inv_rms.push(r);
            out.extend(row.iter().map(|&v| v * r));
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("rms_norm", value, Op::RmsNorm { x, inv_rms }, &[x])
    }

    /// Rotates coordinate pairs `(2i, 2i+1)` of each row of a `[t, head_dim]`
    /// tensor by `positions[row] · theta^(-2i/head_dim)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], theta: f64) -> Result<Var> {
        let (t, hd) = as_matrix("rope", self.value(x))?;
        if hd % 2 != 0 {
            return Err(dim_err("rope", format!("head_dim {hd} is odd")));
        }
        if positions.len() != t {
            return Err(dim_err(
                "rope",
                format!("{} positions for {t} rows", positions.len()),
            ));
        }
        let half = hd / 2;
        let mut cos = Vec::with_capacity(t * half);
        let mut sin = Vec::with_capacity(t * half);
        for &p in positions {
            for i in 0..half {
                let freq = theta.powf(-(2.0 * i as f64) / hd as f64);
                let angle = p as f64 * freq;
                cos.push(S::lit(angle.cos()));
                sin.push(S::lit(angle.sin()));
            }
        }
        let src = self.value(x).data();
        let mut out = vec![S::zero(); t * hd];
        rotate(src, &mut out, &cos, &sin, hd, false);
        let value = Tensor::new(vec![t, hd], out)?;
        let op = Op::Rope {
            x,
            cos: Arc::new(cos),
            sin: Arc::new(sin),
        };
        self.push("rope", value, op, &[x])
    }

    /// Selects rows of a 2-D table.
    pub fn gather_rows(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (rows, d) = as_matrix("gather_rows", self.value(table))?;
        if ids.is_empty() {
            return Err(dim_err("gather_rows", "empty id list"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    extent: rows,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        self.push("gather_rows", value, op, &[table])
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = as_matrix("narrow_cols", self.value(x))?;
        if len == 0 || start + len > cols {
            return Err(dim_err(
                "narrow_cols",
                format!("range {start}..{} outside {cols} columns", start + len),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        self.push("narrow_cols", value, Op::NarrowCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(dim_err("concat_cols", "no inputs"));
        }
        let rows = as_matrix("concat_cols", self.value(xs[0]))?.0;
        let mut total = 0;
        for &x in xs {
            let (r, c) = as_matrix("concat_cols", self.value(x))?;
            if r != rows {
                return Err(dim_err("concat_cols", format!("row counts {rows} and {r}")));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        self.push("concat_cols", value, Op::ConcatCols { xs: xs.to_vec() }, xs)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self
            .value(x)
            .data()
            .iter()
            .fold(S::zero(), |acc, &v| acc + v);
        self.push("sum", Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, S::from_usize(n).unwrap().recip())
    }

    /// Summed negative log-softmax over the rows that carry a target. Rows
    /// with `None` contribute nothing (and receive exactly zero gradient).
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<u32>]) -> Result<Var> {
        let (t, v) = as_matrix("cross_entropy", self.value(logits))?;
        if targets.len() != t {
            return Err(dim_err(
                "cross_entropy",
                format!("{} targets for {t} rows", targets.len()),
            ));
        }
        let src = self.value(logits).data();
        let mut probs = vec![S::zero(); t * v];
        let mut total = S::zero();
        for (r, target) in targets.iter().enumerate() {
            let Some(target) = *target else { continue };
            let target = target as usize;
            if target >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: target,
                    extent: v,
                });
            }
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
            let z = row.iter().fold(S::zero(), |acc, &x| acc + (x - max).exp());
            let log_z = z.ln() + max;
            total = total + (log_z - row[target]);
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - log_z).exp();
            }
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(total), op, &[logits])
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        (S::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Softmax of one row over allowed positions; `None` when nothing is allowed.
pub(crate) fn softmax_row_into<S: Scalar>(row: &[S], mask: Option<&[bool]>, out: &mut [S]) -> Option<()> {
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = S::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if allowed(j) && x > max {
            max = x;
        }
    }
    if max == S::neg_infinity() {
        return None;
    }
    let mut z = S::zero();
    for (j, (&x, o)) in row.iter().zip(out.iter_mut()).enumerate() {
        if allowed(j) {
            *o = (x - max).exp();
            z = z + *o;
        } else {
            *o = S::zero();
        }
    }
    for o in out.iter_mut() {
        *o = *o / z;
    }
    Some(())
}

/// Applies the pairwise rotation (or its inverse) row by row.
pub(crate) fn rotate<S: Scalar>(src: &[S], out: &mut [S], cos: &[S], sin: &[S], hd: usize, inverse: bool) {
    let half = hd / 2;
    for (r, (x, y)) in src.chunks_exact(hd).zip(out.chunks_exact_mut(hd)).enumerate() {
        for i in 0..half {
            let c = cos[r * half + i];
            let s = if inverse { -sin[r * half + i] } else { sin[r * half + i] };
            let (x0, x1) = (x[2 * i], x[2 * i + 1]);
            y[2 * i] = c * x0 - s * x1;
            y[2 * i + 1] = s * x0 + c * x1;
        }
    }
}
