//! Wengert-style tape: every primitive appends a node whose inputs already
//! exist, so node order is a topological order and the reverse sweep visits
//! each node once.

use super::{matmul_into, softmax_rows_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SoftmaxRows(Var),
    Silu(Var),
    RmsNormRows(Var, f64),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Rope { x: Var, cos: Vec<f64>, sin: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy of the recorded value with its gradient attached.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.nodes[v.0].value.clone();
        if let Some(g) = self.grad(v) {
            t.set_grad(g.to_vec()).expect("gradient length matches value");
        }
        t
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `a[i][j] + row[j]` for `a: [n, m]`, `row` of `m` elements.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.broadcast_row(a, row, "add_row", |x, r| x + r)?;
        let ng = self.needs(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// `a[i][j] * row[j]` for `a: [n, m]`, `row` of `m` elements.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.broadcast_row(a, row, "mul_row", |x, r| x * r)?;
        let ng = self.needs(&[a, row]);
        Ok(self.push(out, Op::MulRow(a, row), ng))
    }

    fn broadcast_row(
        &self,
        a: Var,
        row: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let at = self.value(a);
        let rt = self.value(row);
        let (n, m) = at.dims2()?;
        if rt.numel() != m {
            return Err(Error::shape(op, at.shape(), rt.shape()));
        }
        let mut out = at.data().to_vec();
        for i in 0..n {
            for (o, &r) in out[i * m..(i + 1) * m].iter_mut().zip(rt.data()) {
                *o = f(*o, r);
            }
        }
        Tensor::new(&[n, m], out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.needs(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    /// Softmax over the last axis of a rank-2 value.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, m) = x.dims2()?;
        let mut out = vec![0.0; n * m];
        softmax_rows_into(x.data(), &mut out, m)?;
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::SoftmaxRows(a), ng))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.needs(&[a]);
        self.push(out, Op::Silu(a), ng)
    }

    /// Parameter-free RMS normalisation of each row.
    pub fn rms_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let (n, m) = x.dims2()?;
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(m) {
            let r = rms(row, eps);
            row.iter_mut().for_each(|v| *v /= r);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::RmsNormRows(a, eps), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (n, m) = x.dims2()?;
        if start + len > m {
            return Err(Error::shape("slice_cols", x.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&x.data()[i * m + start..i * m + start + len]);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::new(&[n, len], out)?, Op::SliceCols(a, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != n {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(Tensor::new(&[n, total], out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (n, m) = x.dims2()?;
        if start + len > n {
            return Err(Error::shape("slice_rows", x.shape(), &[start, len]));
        }
        let out = x.data()[start * m..(start + len) * m].to_vec();
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::new(&[len, m], out)?, Op::SliceRows(a, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).dims2()?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != m {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let ng = self.needs(parts);
        Ok(self.push(Tensor::new(&[rows, m], out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Rotates consecutive column pairs `(2p, 2p+1)` of each row by the angle
    /// whose cosine/sine are given per `(row, pair)` in `cos`/`sin`.
    pub fn rope(&mut self, x: Var, cos: Vec<f64>, sin: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = xv.dims2()?;
        if m % 2 != 0 || cos.len() != n * m / 2 || sin.len() != cos.len() {
            return Err(Error::shape("rope", xv.shape(), &[cos.len(), sin.len()]));
        }
        let mut out = xv.data().to_vec();
        rotate_pairs(&mut out, &cos, &sin, 1.0);
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Rope { x, cos, sin }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        let ng = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Mean squared error between equally shaped values.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = self.value(pred);
        let t = self.value(target);
        if p.shape() != t.shape() {
            return Err(Error::shape("mse", p.shape(), t.shape()));
        }
        let n = p.numel() as f64;
        let s = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let ng = self.needs(&[pred, target]);
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred, target), ng))
    }

    /// Reverse sweep from a scalar root. Gradients from earlier calls are
    /// discarded; fan-out contributions are summed.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_val = &self.nodes[root.0].value;
        if root_val.numel() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.nodes[a.0].needs_grad {
                    let bt = bv.transpose().expect("rank 2");
                    let mut da = vec![0.0; m * k];
                    matmul_into(g, bt.data(), &mut da, m, n, k);
                    acc(*a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let at = av.transpose().expect("rank 2");
                    let mut db = vec![0.0; k * n];
                    matmul_into(at.data(), g, &mut db, k, m, n);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                acc(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::AddRow(a, row) => {
                let m = self.value(*row).numel();
                acc(*a, g.to_vec());
                acc(*row, column_sums(g, m, |_| 1.0));
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row).data();
                let m = r.len();
                let av = self.value(*a).data();
                acc(*a, g.iter().enumerate().map(|(idx, g)| g * r[idx % m]).collect());
                acc(*row, column_sums(g, m, |idx| av[idx]));
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|x| x * s).collect()),
            Op::Transpose(a) => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = g[i * c + j];
                    }
                }
                acc(*a, out);
            }
            Op::SoftmaxRows(a) => {
                let m = y.shape()[1];
                let mut out = vec![0.0; g.len()];
                for ((yr, gr), or) in y.data().chunks(m).zip(g.chunks(m)).zip(out.chunks_mut(m)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((o, y), g) in or.iter_mut().zip(yr).zip(gr) {
                        *o = y * (g - dot);
                    }
                }
                acc(*a, out);
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect(),
                );
            }
            Op::RmsNormRows(a, eps) => {
                let x = self.value(*a).data();
                let m = y.shape()[1];
                let mut out = vec![0.0; g.len()];
                for ((xr, (yr, gr)), or) in x
                    .chunks(m)
                    .zip(y.data().chunks(m).zip(g.chunks(m)))
                    .zip(out.chunks_mut(m))
                {
                    let r = rms(xr, *eps);
                    let mean_gy = yr.iter().zip(gr).map(|(y, g)| y * g).sum::<f64>() / m as f64;
                    for ((o, y), g) in or.iter_mut().zip(yr).zip(gr) {
                        *o = (g - y * mean_gy) / r;
                    }
                }
                acc(*a, out);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let (n, m) = (src.shape()[0], src.shape()[1]);
                let len = y.shape()[1];
                let mut out = vec![0.0; n * m];
                for i in 0..n {
                    out[i * m + start..i * m + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(*a, out);
            }
            Op::ConcatCols(parts) => {
                let (n, total) = (y.shape()[0], y.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut out = Vec::with_capacity(n * w);
                    for i in 0..n {
                        out.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    acc(p, out);
                    offset += w;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let m = src.shape()[1];
                let mut out = vec![0.0; src.numel()];
                out[start * m..start * m + g.len()].copy_from_slice(g);
                acc(*a, out);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::Rope { x, cos, sin } => {
                let mut out = g.to_vec();
                rotate_pairs(&mut out, cos, sin, -1.0);
                acc(*x, out);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::Mse(p, t) => {
                let pv = self.value(*p).data();
                let tv = self.value(*t).data();
                let k = 2.0 * g[0] / pv.len() as f64;
                let d: Vec<f64> = pv.iter().zip(tv).map(|(p, t)| k * (p - t)).collect();
                acc(*t, d.iter().map(|x| -x).collect());
                acc(*p, d);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn rms(row: &[f64], eps: f64) -> f64 {
    (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64 + eps).sqrt()
}

fn column_sums(g: &[f64], m: usize, weight: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for (idx, gv) in g.iter().enumerate() {
        out[idx % m] += gv * weight(idx);
    }
    out
}

// direction = -1 applies the transposed (inverse) rotation.
fn rotate_pairs(buf: &mut [f64], cos: &[f64], sin: &[f64], direction: f64) {
    for (pair, (c, s)) in buf.chunks_mut(2).zip(cos.iter().zip(sin)) {
        let s = direction * s;
        let (a, b) = (pair[0], pair[1]);
        pair[0] = c * a - s * b;
        pair[1] = s * a + c * b;
    }
}
