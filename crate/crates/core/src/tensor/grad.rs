use super::tape::{rotate, sigmoid, Op, Tape, Var};
use super::{Result, Scalar, Tensor, TensorError};

/// Gradient accumulators produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` shaped like its value; zeros when none reached it.
    pub fn wrt(&self, tape: &Tape<S>, v: Var) -> Tensor<S> {
        let shape = tape.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn acc<S: Scalar>(slot: &mut Option<Vec<S>>, len: usize) -> &mut Vec<S> {
    slot.get_or_insert_with(|| vec![S::zero(); len])
}

impl<S: Scalar> Tape<S> {
    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let value = self.value(loss);
        if value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: value.shape().to_vec(),
            });
        }
        self.backward_with_seed(loss, &[S::one()])
    }

    /// Vector-Jacobian product: reverse pass seeded with `seed` at `out`.
    pub fn backward_with_seed(&self, out: Var, seed: &[S]) -> Result<Gradients<S>> {
        if seed.len() != self.value(out).len() {
            return Err(super::dim_err(
                "backward",
                format!("seed has {} entries, output has {}", seed.len(), self.value(out).len()),
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; out.0 + 1];
        if !self.nodes[out.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[out.0] = Some(seed.to_vec());
        for id in (0..=out.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.propagate(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, dy: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    // dA[m×k] += dY[m×n] · Bᵀ
                    let bv = self.value(*b).data();
                    let g = acc(&mut grads[a.0], m * k);
                    S::gemm(m, n, k, dy, (n as isize, 1), bv, (1, n as isize), g, true);
                }
                if self.wants(*b) {
                    // dB[k×n] += Aᵀ · dY
                    let av = self.value(*a).data();
                    let g = acc(&mut grads[b.0], k * n);
                    S::gemm(k, m, n, av, (1, k as isize), dy, (n as isize, 1), g, true);
                }
            }
            Op::Transpose { x, rows, cols } => {
                let g = acc(&mut grads[x.0], rows * cols);
                for i in 0..*rows {
                    for j in 0..*cols {
                        g[i * cols + j] = g[i * cols + j] + dy[j * rows + i];
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -S::one() } else { S::one() };
                if self.wants(*a) {
                    let g = acc(&mut grads[a.0], dy.len());
                    for (gi, &d) in g.iter_mut().zip(dy) {
                        *gi = *gi + d;
                    }
                }
                if self.wants(*b) {
                    let nb = self.value(*b).len();
                    let g = acc(&mut grads[b.0], nb);
                    for (i, &d) in dy.iter().enumerate() {
                        g[i % nb] = g[i % nb] + sign * d;
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let nb = bv.len();
                if self.wants(*a) {
                    let g = acc(&mut grads[a.0], dy.len());
                    for (i, (gi, &d)) in g.iter_mut().zip(dy).enumerate() {
                        *gi = *gi + d * bv[i % nb];
                    }
                }
                if self.wants(*b) {
                    let g = acc(&mut grads[b.0], nb);
                    for (i, &d) in dy.iter().enumerate() {
                        g[i % nb] = g[i % nb] + d * av[i];
                    }
                }
            }
            Op::Scale { x, factor } => {
                let g = acc(&mut grads[x.0], dy.len());
                for (gi, &d) in g.iter_mut().zip(dy) {
                    *gi = *gi + d * *factor;
                }
            }
            Op::Sigmoid { x } => {
                let g = acc(&mut grads[x.0], dy.len());
                for ((gi, &d), &s) in g.iter_mut().zip(dy).zip(y) {
                    *gi = *gi + d * s * (S::one() - s);
                }
            }
            Op::Silu { x } => {
                let xv = self.value(*x).data();
                let g = acc(&mut grads[x.0], dy.len());
                for ((gi, &d), &xi) in g.iter_mut().zip(dy).zip(xv) {
                    let s = sigmoid(xi);
                    *gi = *gi + d * s * (S::one() + xi * (S::one() - s));
                }
            }
            Op::MaskedSoftmax { x } => {
                let n = node.value.cols();
                let g = acc(&mut grads[x.0], dy.len());
                for ((gr, dr), yr) in g.chunks_exact_mut(n).zip(dy.chunks_exact(n)).zip(y.chunks_exact(n)) {
                    let dot = dr.iter().zip(yr).fold(S::zero(), |acc, (&d, &p)| acc + d * p);
                    for ((gi, &d), &p) in gr.iter_mut().zip(dr).zip(yr) {
                        *gi = *gi + p * (d - dot);
                    }
                }
            }
            Op::RmsNorm { x, inv_rms } => {
                let xv = self.value(*x).data();
                let d = node.value.cols();
                let dn = S::from_usize(d).unwrap();
                let g = acc(&mut grads[x.0], dy.len());
                for (r, ((gr, dr), xr)) in g
                    .chunks_exact_mut(d)
                    .zip(dy.chunks_exact(d))
                    .zip(xv.chunks_exact(d))
                    .enumerate()
                {
                    let inv = inv_rms[r];
                    let dot = dr.iter().zip(xr).fold(S::zero(), |acc, (&a, &b)| acc + a * b);
                    let c = inv * inv * inv * dot / dn;
                    for ((gi, &di), &xi) in gr.iter_mut().zip(dr).zip(xr) {
                        *gi = *gi + inv * di - c * xi;
                    }
                }
            }
            Op::Rope { x, cos, sin } => {
                let hd = node.value.cols();
                let mut tmp = vec![S::zero(); dy.len()];
                rotate(dy, &mut tmp, cos, sin, hd, true);
                let g = acc(&mut grads[x.0], dy.len());
                for (gi, t) in g.iter_mut().zip(tmp) {
                    *gi = *gi + t;
                }
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let g = acc(&mut grads[table.0], tv.len());
                for (r, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    for j in 0..d {
                        g[id * d + j] = g[id * d + j] + dy[r * d + j];
                    }
                }
            }
            Op::NarrowCols { x, start } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let len = node.value.cols();
                let g = acc(&mut grads[x.0], xv.len());
                for (r, dr) in dy.chunks_exact(len).enumerate() {
                    for (j, &d) in dr.iter().enumerate() {
                        let idx = r * cols + start + j;
                        g[idx] = g[idx] + d;
                    }
                }
            }
            Op::ConcatCols { xs } => {
                let total = node.value.cols();
                let mut offset = 0;
                for &x in xs {
                    let xv = self.value(x);
                    let c = xv.cols();
                    if self.wants(x) {
                        let g = acc(&mut grads[x.0], xv.len());
                        for r in 0..xv.rows() {
                            for j in 0..c {
                                g[r * c + j] = g[r * c + j] + dy[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                let g = acc(&mut grads[x.0], n);
                for gi in g.iter_mut() {
                    *gi = *gi + dy[0];
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.value(*logits).cols();
                let g = acc(&mut grads[logits.0], probs.len());
                for (r, target) in targets.iter().enumerate() {
                    let Some(target) = *target else { continue };
                    for j in 0..v {
                        let ind = if j == target as usize { S::one() } else { S::zero() };
                        g[r * v + j] = g[r * v + j] + dy[0] * (probs[r * v + j] - ind);
                    }
                }
            }
        }
    }

    /// Jacobian-vector product: replays the tape forward propagating the
    /// tangents given for some leaves, and returns the tangent at `out`.
    /// Leaves without a seed (including detached nodes) carry zero tangent.
    pub fn jvp(&self, seeds: &[(Var, &[S])], out: Var) -> Result<Vec<S>> {
        let mut tangents: Vec<Option<Vec<S>>> = vec![None; out.0 + 1];
        for (v, t) in seeds {
            if t.len() != self.value(*v).len() {
                return Err(super::dim_err("jvp", "seed length differs from value length"));
            }
            if !matches!(self.nodes[v.0].op, Op::Leaf) {
                return Err(super::dim_err("jvp", "tangent seeds must be leaves"));
            }
            if v.0 <= out.0 {
                tangents[v.0] = Some(t.to_vec());
            }
        }
        for id in 0..=out.0 {
            if tangents[id].is_some() {
                continue;
            }
            tangents[id] = self.tangent(id, &tangents);
        }
        Ok(tangents[out.0]
            .take()
            .unwrap_or_else(|| vec![S::zero(); self.value(out).len()]))
    }

    fn tangent(&self, id: usize, tan: &[Option<Vec<S>>]) -> Option<Vec<S>> {
        let node = &self.nodes[id];
        let y = node.value.data();
        let t = |v: &Var| tan[v.0].as_deref();
        match &node.op {
            Op::Leaf => None,
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ta, tb) = (t(a), t(b));
                if ta.is_none() && tb.is_none() {
                    return None;
                }
                let mut out = vec![S::zero(); m * n];
                if let Some(ta) = ta {
                    S::gemm(m, k, n, ta, (k as isize, 1), self.value(*b).data(), (n as isize, 1), &mut out, true);
                }
                if let Some(tb) = tb {
                    S::gemm(m, k, n, self.value(*a).data(), (k as isize, 1), tb, (n as isize, 1), &mut out, true);
                }
                Some(out)
            }
            Op::Transpose { x, rows, cols } => {
                let tx = t(x)?;
                let mut out = vec![S::zero(); rows * cols];
                for i in 0..*rows {
                    for j in 0..*cols {
                        out[j * rows + i] = tx[i * cols + j];
                    }
                }
                Some(out)
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -S::one() } else { S::one() };
                let (ta, tb) = (t(a), t(b));
                if ta.is_none() && tb.is_none() {
                    return None;
                }
                let mut out = ta.map(|v| v.to_vec()).unwrap_or_else(|| vec![S::zero(); y.len()]);
                if let Some(tb) = tb {
                    let nb = tb.len();
                    for (i, o) in out.iter_mut().enumerate() {
                        *o = *o + sign * tb[i % nb];
                    }
                }
                Some(out)
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (t(a), t(b));
                if ta.is_none() && tb.is_none() {
                    return None;
                }
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let nb = bv.len();
                let mut out = vec![S::zero(); y.len()];
                for (i, o) in out.iter_mut().enumerate() {
                    if let Some(ta) = ta {
                        *o = *o + ta[i] * bv[i % nb];
                    }
                    if let Some(tb) = tb {
                        *o = *o + av[i] * tb[i % nb];
                    }
                }
                Some(out)
            }
            Op::Scale { x, factor } => Some(t(x)?.iter().map(|&v| v * *factor).collect()),
            Op::Sigmoid { x } => Some(
                t(x)?
                    .iter()
                    .zip(y)
                    .map(|(&d, &s)| d * s * (S::one() - s))
                    .collect(),
            ),
            Op::Silu { x } => {
                let xv = self.value(*x).data();
                Some(
                    t(x)?
                        .iter()
                        .zip(xv)
                        .map(|(&d, &xi)| {
                            let s = sigmoid(xi);
                            d * s * (S::one() + xi * (S::one() - s))
                        })
                        .collect(),
                )
            }
            Op::MaskedSoftmax { x } => {
                let tx = t(x)?;
                let n = node.value.cols();
                let mut out = vec![S::zero(); y.len()];
                for ((o, tr), yr) in out.chunks_exact_mut(n).zip(tx.chunks_exact(n)).zip(y.chunks_exact(n)) {
                    let dot = tr.iter().zip(yr).fold(S::zero(), |acc, (&d, &p)| acc + d * p);
                    for ((oi, &d), &p) in o.iter_mut().zip(tr).zip(yr) {
                        *oi = p * (d - dot);
                    }
                }
                Some(out)
            }
            Op::RmsNorm { x, inv_rms } => {
                let tx = t(x)?;
                let xv = self.value(*x).data();
                let d = node.value.cols();
                let dn = S::from_usize(d).unwrap();
                let mut out = vec![S::zero(); y.len()];
                for (r, ((o, tr), xr)) in out
                    .chunks_exact_mut(d)
                    .zip(tx.chunks_exact(d))
                    .zip(xv.chunks_exact(d))
                    .enumerate()
                {
                    let inv = inv_rms[r];
                    let dot = tr.iter().zip(xr).fold(S::zero(), |acc, (&a, &b)| acc + a * b);
                    let dr = -inv * inv * inv * dot / dn;
                    for ((oi, &ti), &xi) in o.iter_mut().zip(tr).zip(xr) {
                        *oi = ti * inv + xi * dr;
                    }
                }
                Some(out)
            }
            Op::Rope { x, cos, sin } => {
                let tx = t(x)?;
                let mut out = vec![S::zero(); y.len()];
                rotate(tx, &mut out, cos, sin, node.value.cols(), false);
                Some(out)
            }
            Op::Gather { table, ids } => {
                let tt = t(table)?;
                let d = node.value.cols();
                let mut out = Vec::with_capacity(y.len());
                for &id in ids {
                    out.extend_from_slice(&tt[id as usize * d..(id as usize + 1) * d]);
                }
                Some(out)
            }
            Op::NarrowCols { x, start } => {
                let tx = t(x)?;
                let cols = self.value(*x).cols();
                let len = node.value.cols();
                let mut out = Vec::with_capacity(y.len());
                for r in 0..node.value.rows() {
                    out.extend_from_slice(&tx[r * cols + start..r * cols + start + len]);
                }
                Some(out)
            }
            Op::ConcatCols { xs } => {
                if xs.iter().all(|x| t(x).is_none()) {
                    return None;
                }
                let rows = node.value.rows();
                let mut out = Vec::with_capacity(y.len());
                for r in 0..rows {
                    for x in xs {
                        let c = self.value(*x).cols();
                        match t(x) {
                            Some(tx) => out.extend_from_slice(&tx[r * c..(r + 1) * c]),
                            None => out.extend(std::iter::repeat_n(S::zero(), c)),
                        }
                    }
                }
                Some(out)
            }
            Op::Sum { x } => Some(vec![t(x)?.iter().fold(S::zero(), |acc, &v| acc + v)]),
            Op::CrossEntropy { logits, targets, probs } => {
                let tl = t(logits)?;
                let v = self.value(*logits).cols();
                let mut total = S::zero();
                for (r, target) in targets.iter().enumerate() {
                    let Some(target) = *target else { continue };
                    let row = &tl[r * v..(r + 1) * v];
                    let expected = row
                        .iter()
                        .zip(&probs[r * v..(r + 1) * v])
                        .fold(S::zero(), |acc, (&d, &p)| acc + d * p);
                    total = total + expected - row[target as usize];
                }
                Some(vec![total])
            }
        }
    }
}
