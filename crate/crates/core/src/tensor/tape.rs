use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use super::sum::canonical_sum;
use super::{matmul_into, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Square(Var),
    SmoothL1(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Sum(Var),
    SumRows(Var),
    Reshape(Var),
    SliceFlat { x: Var, start: usize },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b } => vec![*a, *b],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            AddRow { x, bias } => vec![*x, *bias],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            ConcatCols(parts) => parts.clone(),
            Scale(x, _) | Shift(x) | Relu(x) | Gelu(x) | Exp(x) | Square(x) | SmoothL1(x)
            | Softmax(x) | Transpose(x) | Sum(x) | SumRows(x) | Reshape(x) => vec![*x],
            Clamp { x, .. } | SliceCols { x, .. } | SliceFlat { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run recording of tensor operations.
///
/// Nodes are appended in execution order, so inputs always precede the
/// nodes that consume them. A tape is built fresh for every forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    branches: Option<DefaultHasher>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that fingerprints which side of every non-smooth point
    /// (relu, smooth-L1, clamp, explicit selections) each element fell on.
    pub fn with_branch_tracking() -> Self {
        Self {
            nodes: Vec::new(),
            branches: Some(DefaultHasher::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mixes an externally made discrete choice (e.g. an argmin) into the
    /// branch fingerprint.
    pub fn note_branch(&mut self, choice: u64) {
        if let Some(h) = self.branches.as_mut() {
            h.write_u64(choice);
        }
    }

    pub fn branch_signature(&self) -> Option<u64> {
        self.branches.as_ref().map(|h| h.finish())
    }

    fn note_branches(&mut self, tags: impl Iterator<Item = u8>) {
        if let Some(h) = self.branches.as_mut() {
            for t in tags {
                h.write_u8(t);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn matmul_dims(&self, a: Var, b: Var) -> Result<(usize, usize, usize)> {
        let err = || TensorError::Shape {
            op: "matmul",
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        };
        let (m, k) = self.value(a).dims2().ok_or_else(err)?;
        let (k2, n) = self.value(b).dims2().ok_or_else(err)?;
        if k != k2 {
            return Err(err());
        }
        Ok((m, k, n))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = self.matmul_dims(a, b)?;
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    /// Matrix product whose inner-dimension sums use [`canonical_sum`], so
    /// permuting the inner index of `a` and `b` together leaves the result
    /// bit-identical. Used wherever a reduction runs across agents or tokens.
    pub fn matmul_stable(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = self.matmul_dims(a, b)?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        let mut terms = vec![0.0; k];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    terms[p] = ad[i * k + p] * bd[p * n + j];
                }
                out[i * n + j] = canonical_sum(&mut terms);
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("add", a, b, |p, q| p + q)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("sub", a, b, |p, q| p - q)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("mul", a, b, |p, q| p * q)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds a vector of length `last_dim(x)` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(bias).len() != n {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(r, c)| r + c))
            .collect();
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(value, Op::AddRow { x, bias }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e + c);
        self.push(v, Op::Shift(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        if self.branches.is_some() {
            let tags: Vec<u8> = self.value(x).data().iter().map(|&e| u8::from(e > 0.0)).collect();
            self.note_branches(tags.into_iter());
        }
        let v = self.value(x).map(|e| e.max(0.0));
        self.push(v, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * e);
        self.push(v, Op::Square(x))
    }

    /// Elementwise smooth-L1 of `x` (the residual): `0.5 x²` if `|x| < 1`,
    /// else `|x| - 0.5`.
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        if self.branches.is_some() {
            let tags: Vec<u8> = self
                .value(x)
                .data()
                .iter()
                .map(|&e| if e.abs() < 1.0 { 0 } else if e > 0.0 { 1 } else { 2 })
                .collect();
            self.note_branches(tags.into_iter());
        }
        let v = self.value(x).map(smooth_l1);
        self.push(v, Op::SmoothL1(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        if self.branches.is_some() {
            let tags: Vec<u8> = self
                .value(x)
                .data()
                .iter()
                .map(|&e| if e < lo { 0 } else if e > hi { 2 } else { 1 })
                .collect();
            self.note_branches(tags.into_iter());
        }
        let v = self.value(x).map(|e| e.clamp(lo, hi));
        self.push(v, Op::Clamp { x, lo, hi })
    }

    /// Softmax over the last dimension, max-subtracted, with an
    /// order-independent normalizer.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = softmax_last_dim(self.value(x));
        self.push(v, Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).last_dim();
        for p in [gamma, beta] {
            if self.value(p).len() != n {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.outer_len();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        Ok(self.push(v, Op::Transpose(x)))
    }

    /// Concatenates along the last dimension; all parts share the outer shape.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        let rows = self.value(first).outer_len();
        let outer_shape = {
            let s = self.shape(first);
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != outer_shape[..] {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(self.value(p).last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = outer_shape;
        shape.push(total);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..start + width` of the last dimension.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if width == 0 || start + width > n {
            return Err(TensorError::Dimension {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of range for width {n}", start + width),
            });
        }
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums over the last dimension, producing `[outer, 1]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let data: Vec<f64> = xv.data().chunks(n).map(|r| r.iter().sum()).collect();
        let rows = data.len();
        let v = Tensor::new(&[rows, 1], data).expect("row sums");
        self.push(v, Op::SumRows(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// A contiguous flat range of `x`, reshaped to `shape`.
    pub fn slice_flat(&mut self, x: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        let xv = self.value(x);
        if start + len > xv.len() {
            return Err(TensorError::Dimension {
                op: "slice_flat",
                msg: format!("range {start}..{} exceeds {} elements", start + len, xv.len()),
            });
        }
        let v = Tensor::new(shape, xv.data()[start..start + len].to_vec())?;
        Ok(self.push(v, Op::SliceFlat { x, start }))
    }

    /// Reverse pass from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(TensorError::NotScalar(out.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.last_dim();
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let bp = &bd[p * n..(p + 1) * n];
                            da[i * k + p] += gi.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *d += aip * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * ad[i];
                    }
                });
            }
            Op::AddRow { x, bias } => {
                acc(*x, &mut |d| add_into(d, g));
                acc(*bias, &mut |d| {
                    let n = d.len();
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(p, q)| *p += c * q)),
            Op::Shift(x) | Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Relu(x) => {
                let xd = val(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        if xd[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = val(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gelu_grad(xd[i]);
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i];
                    }
                });
            }
            Op::Square(x) => {
                let xd = val(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += 2.0 * xd[i] * g[i];
                    }
                });
            }
            Op::SmoothL1(x) => {
                let xd = val(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        let e = xd[i];
                        let slope = if e.abs() < 1.0 { e } else { e.signum() };
                        d[i] += g[i] * slope;
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xd = val(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        if xd[i] >= *lo && xd[i] <= *hi {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.last_dim();
                let yd = y.data();
                acc(*x, &mut |d| {
                    for r in 0..y.outer_len() {
                        let (ys, gs) = (&yd[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[r * n + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = node.value.last_dim();
                let gd = val(*gamma);
                acc(*gamma, &mut |d| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for gr in g.chunks(n) {
                        add_into(d, gr);
                    }
                });
                acc(*x, &mut |d| {
                    let nf = n as f64;
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<f64> = (0..n).map(|j| gr[j] * gd[j]).collect();
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[r * n + j] += is / nf * (nf * dh[j] - s1 - hr[j] * s2);
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = self.nodes[x.0].value.dims2().unwrap();
                acc(*x, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.last_dim();
                    acc(p, &mut |d| {
                        for (r, row) in d.chunks_mut(w).enumerate() {
                            add_into(row, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let w = node.value.last_dim();
                let n = self.nodes[x.0].value.last_dim();
                acc(*x, &mut |d| {
                    for (r, gr) in g.chunks(w).enumerate() {
                        add_into(&mut d[r * n + start..r * n + start + w], gr);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|e| *e += g[0])),
            Op::SumRows(x) => {
                let n = self.nodes[x.0].value.last_dim();
                acc(*x, &mut |d| {
                    for (row, gr) in d.chunks_mut(n).zip(g) {
                        row.iter_mut().for_each(|e| *e += gr);
                    }
                });
            }
            Op::SliceFlat { x, start } => {
                acc(*x, &mut |d| add_into(&mut d[*start..*start + g.len()], g));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub(crate) fn softmax_last_dim(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    let mut out = Vec::with_capacity(x.len());
    let mut buf = vec![0.0; n];
    for row in x.data().chunks(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (b, &v) in buf.iter_mut().zip(row) {
            *b = (v - max).exp();
        }
        let exps = buf.clone();
        let total = canonical_sum(&mut buf);
        out.extend(exps.iter().map(|e| e / total));
    }
    Tensor::new(x.shape(), out).expect("softmax keeps shape")
}

/// Result of [`Tape::backward`]: one gradient per recorded node.
#[derive(Debug, Clone)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`; zeros if `v` was not on any path to the output.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let m = tape.constant(t2(&[&[1.5, -2.0], &[0.25, 7.0]]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p), tape.value(m));

        let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(t2(&[&[5.0], &[6.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(TensorError::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradients_follow_transposes() {
        let mut tape = Tape::new();
        let a = tape.param(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.param(t2(&[&[5.0], &[6.0]]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        // dA = 1·Bᵀ, dB = Aᵀ·1
        assert_eq!(g.get(a).data(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(g.get(b).data(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 2], vec![0.0, 0.0, 0.0, 3f64.ln()]).unwrap());
        let y = tape.softmax(x);
        let v = tape.value(y).data();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] - 0.25).abs() < 1e-15 && (v[3] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(Tensor::new(&[1, 3], vec![5.0; 3]).unwrap());
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 3]);

        let g2 = tape.constant(Tensor::ones(&[2]));
        let b2 = tape.constant(Tensor::zeros(&[2]));
        let x2 = tape.constant(Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap());
        let y2 = tape.layer_norm(x2, g2, b2, 1e-14).unwrap();
        assert!(tape.value(y2).max_abs_diff(tape.value(x2)) < 1e-12);

        let zero_g = tape.constant(Tensor::zeros(&[2]));
        let beta = tape.constant(Tensor::new(&[2], vec![0.3, -0.7]).unwrap());
        let x3 = tape.constant(Tensor::new(&[2, 2], vec![4.0, 1.0, -2.0, 9.0]).unwrap());
        let y3 = tape.layer_norm(x3, zero_g, beta, 1e-5).unwrap();
        assert_eq!(tape.value(y3).data(), &[0.3, -0.7, 0.3, -0.7]);

        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.layer_norm(x3, bad, beta, 1e-5).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = tape.sum(x);
        assert_eq!(tape.backward(s).unwrap().get(x).data(), &[1.0; 3]);

        let sq = tape.square(x);
        let s2 = tape.sum(sq);
        assert_eq!(tape.backward(s2).unwrap().get(x).data(), &[2.0, 4.0, 6.0]);

        let x2 = tape.param(Tensor::new(&[2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1]).unwrap());
        let sm = tape.softmax(x2);
        let s3 = tape.sum(sm);
        let g = tape.backward(s3).unwrap().get(x2);
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn backward_rejects_non_scalar_and_zero_fills_unused_leaves() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        let unused = tape.param(Tensor::ones(&[4]));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).data(), &[0.0; 4]);
    }

    #[test]
    fn constants_do_not_record_backward_rules() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 2]));
        let b = tape.constant(Tensor::ones(&[2, 2]));
        let c = tape.matmul(a, b).unwrap();
        assert!(!tape.requires_grad(c));
    }

    #[test]
    fn branch_signature_sees_relu_side() {
        let sig = |v: f64| {
            let mut tape = Tape::with_branch_tracking();
            let x = tape.constant(Tensor::scalar(v));
            tape.relu(x);
            tape.branch_signature().unwrap()
        };
        assert_eq!(sig(0.5), sig(0.7));
        assert_ne!(sig(0.5), sig(-0.5));
    }
}
