use super::tape::{Node, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{axis_split, broadcast_shape, broadcast_strides, for_each_broadcast, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
/// Vectors shorter than this are treated as zero by `squash` and `l2norm`.
pub(crate) const NORM_GUARD: f64 = 1e-12;

/// A fused operation with a hand-written vector-Jacobian product.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Adds the contribution of `grad_output` to each `input_grads[i]` that
    /// is `Some` (inputs that do not track gradient get `None`).
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[f64], input_grads: &mut [Option<Vec<f64>>]);
}

pub(super) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Exp(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    MatMul(Var, Var),
    Sum(Var),
    SumAxis(Var, usize),
    L2Norm(Var, usize),
    Softmax(Var, usize),
    Conv1d(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        rstd: Vec<f64>,
    },
    Squash(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

struct MatmulDims {
    m: usize,
    k: usize,
    p: usize,
    batch: Vec<usize>,
    a_batch_strides: Vec<usize>,
    b_batch_strides: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::dim("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, p) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::dim("matmul", a, b));
    }
    let pa = &a[..a.len() - 2];
    let pb = &b[..b.len() - 2];
    let batch = broadcast_shape("matmul", pa, pb).map_err(|_| Error::dim("matmul", a, b))?;
    let batch = if batch.is_empty() { vec![1] } else { batch };
    let pa = if pa.is_empty() { &[1][..] } else { pa };
    let pb = if pb.is_empty() { &[1][..] } else { pb };
    Ok(MatmulDims {
        m,
        k,
        p,
        a_batch_strides: broadcast_strides(pa, &batch),
        b_batch_strides: broadcast_strides(pb, &batch),
        batch,
    })
}

impl Tape {
    fn binary_broadcast(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(op_name, ta.shape(), tb.shape())?;
        let mut out = vec![0.0; out_shape.iter().product()];
        if ta.shape() == tb.shape() {
            for ((o, &x), &y) in out.iter_mut().zip(ta.data()).zip(tb.data()) {
                *o = f(x, y);
            }
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.requires_grad(x);
        self.push(value, op, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Rectifier; its derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow for large `|x|`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("identical shapes always broadcast")
    }

    /// Batched matrix product `[.., M, K] x [.., K, P] -> [.., M, P]` with
    /// broadcasting over the leading (batch) axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let d = matmul_dims(ta.shape(), tb.shape())?;
        let (m, k, p) = (d.m, d.k, d.p);
        let nb: usize = d.batch.iter().product();
        let mut out = vec![0.0; nb * m * p];
        let (da, db) = (ta.data(), tb.data());
        for_each_broadcast(&d.batch, &d.a_batch_strides, &d.b_batch_strides, |o, ia, ib| {
            let am = &da[ia * m * k..(ia + 1) * m * k];
            let bm = &db[ib * k * p..(ib + 1) * k * p];
            let om = &mut out[o * m * p..(o + 1) * m * p];
            for i in 0..m {
                for l in 0..k {
                    let av = am[i * k + l];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bm[l * p..(l + 1) * p];
                    for (ov, &bv) in om[i * p..(i + 1) * p].iter_mut().zip(brow) {
                        *ov += av * bv;
                    }
                }
            }
        });
        let mut shape = if ta.rank() == 2 && tb.rank() == 2 {
            Vec::new()
        } else {
            d.batch.clone()
        };
        shape.extend([m, p]);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums along `axis`. With `keepdim` the axis stays with extent 1,
    /// otherwise it is removed (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let t = self.value(x);
        check_axis("sum_axis", t.shape(), axis)?;
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let shape = reduced_shape(t.shape(), axis, keepdim);
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis(x, axis), rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        check_axis("mean_axis", self.shape(x), axis)?;
        let n = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis, keepdim)?;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Euclidean norm along `axis` (axis removed). The gradient at a zero
    /// vector is defined as zero.
    pub fn l2norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("l2norm", t.shape(), axis)?;
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = 0.0;
                for j in 0..n {
                    let v = d[(o * n + j) * inner + i];
                    s += v * v;
                }
                out[o * inner + i] = s.sqrt();
            }
        }
        let shape = reduced_shape(t.shape(), axis, false);
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::L2Norm(x, axis), rg))
    }

    /// Mean squared error with the usual broadcasting between `a` and `b`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.sub(a, b)?;
        let sq = self.square(diff);
        Ok(self.mean(sq))
    }

    /// Softmax along `axis`, stabilised by subtracting the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("softmax", t.shape(), axis)?;
        if !t.all_finite() {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (d[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x, axis), rg))
    }

    /// Depthwise 1-D cross-correlation of `x: [B, L, D]` with
    /// `kernel: [W, D]`, zero-padded symmetrically so the length is kept.
    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let (xs, ks) = (tx.shape(), tk.shape());
        if xs.len() != 3 || ks.len() != 2 || xs[2] != ks[1] {
            return Err(Error::dim("conv1d", xs, ks));
        }
        let w = ks[0];
        if w % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel width {w} must be odd")));
        }
        let (b, l, d) = (xs[0], xs[1], xs[2]);
        let half = w / 2;
        let (dx, dk) = (tx.data(), tk.data());
        let mut out = vec![0.0; b * l * d];
        for bi in 0..b {
            for t in 0..l {
                let o = &mut out[(bi * l + t) * d..(bi * l + t + 1) * d];
                for wi in 0..w {
                    let src = t + wi;
                    if src < half || src - half >= l {
                        continue;
                    }
                    let xrow = &dx[(bi * l + src - half) * d..(bi * l + src - half + 1) * d];
                    let krow = &dk[wi * d..(wi + 1) * d];
                    for c in 0..d {
                        o[c] += krow[c] * xrow[c];
                    }
                }
            }
        }
        let rg = self.any_grad(&[x, kernel]);
        Ok(self.push(Tensor::new([b, l, d], out)?, Op::Conv1d(x, kernel), rg))
    }

    /// Layer normalisation over the last axis with learned `gamma`/`beta`
    /// (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().expect("tensors have rank >= 1");
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != d || tb.len() != d {
            return Err(Error::dim("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.len() / d;
        let mut normalized = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let n = (row[c] - mean) * rs;
                normalized[r * d + c] = n;
                out[r * d + c] = n * tg.data()[c] + tb.data()[c];
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.any_grad(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            normalized,
            rstd,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Capsule nonlinearity over the last axis:
    /// `v = |s|^2 / (1 + |s|^2) * s / |s|`, with `v = 0` when `|s| < 1e-12`.
    pub fn squash(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().expect("tensors have rank >= 1");
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let f = if n < NORM_GUARD { 0.0 } else { n / (1.0 + n * n) };
            row.iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.requires_grad(x);
        self.push(out, Op::Squash(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Records a fused operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(output, Op::Custom(inputs.to_vec(), op), rg)
    }
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
        if s.is_empty() {
            s.push(1);
        }
    }
    s
}

/// Reduces a gradient in the broadcast output shape back onto an operand.
fn reduce_broadcast(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
    out_shape: &[usize],
    g: &[f64],
    factor: impl Fn(usize, usize) -> f64,
) {
    let shape = nodes[v.0].value.shape().to_vec();
    let Some(buf) = slot(grads, nodes, v) else { return };
    if shape == out_shape {
        for (i, (b, &gv)) in buf.iter_mut().zip(g).enumerate() {
            *b += gv * factor(i, i);
        }
    } else {
        let sv = broadcast_strides(&shape, out_shape);
        let zero = vec![0; out_shape.len()];
        for_each_broadcast(out_shape, &sv, &zero, |o, iv, _| buf[iv] += g[o] * factor(o, iv));
    }
}

impl Op {
    pub(super) fn backward(&self, nodes: &[Node], out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &nodes[v.0].value;
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                reduce_broadcast(grads, nodes, *a, out.shape(), g, |_, _| 1.0);
                reduce_broadcast(grads, nodes, *b, out.shape(), g, |_, _| 1.0);
            }
            Op::Sub(a, b) => {
                reduce_broadcast(grads, nodes, *a, out.shape(), g, |_, _| 1.0);
                reduce_broadcast(grads, nodes, *b, out.shape(), g, |_, _| -1.0);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let sa = broadcast_strides(ta.shape(), out.shape());
                let sb = broadcast_strides(tb.shape(), out.shape());
                let mut other_a = vec![0.0; out.len()];
                let mut other_b = vec![0.0; out.len()];
                for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| {
                    other_a[o] = tb.data()[ib];
                    other_b[o] = ta.data()[ia];
                });
                reduce_broadcast(grads, nodes, *a, out.shape(), g, |o, _| other_a[o]);
                reduce_broadcast(grads, nodes, *b, out.shape(), g, |o, _| other_b[o]);
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(buf) = slot(grads, nodes, *x) {
                    buf.iter_mut().zip(g).for_each(|(b, gv)| *b += gv);
                }
            }
            Op::Scale(x, c) => {
                if let Some(buf) = slot(grads, nodes, *x) {
                    buf.iter_mut().zip(g).for_each(|(b, gv)| *b += gv * c);
                }
            }
            Op::Exp(x) => {
                if let Some(buf) = slot(grads, nodes, *x) {
                    for ((b, gv), y) in buf.iter_mut().zip(g).zip(out.data()) {
                        *b += gv * y;
                    }
                }
            }
            Op::Relu(x) => {
                let tx = val(*x);
                if let Some(buf) = slot(grads, nodes, *x) {
                    for ((b, gv), xv) in buf.iter_mut().zip(g).zip(tx.data()) {
                        if *xv > 0.0 {
                            *b += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(buf) = slot(grads, nodes, *x) {
                    for ((b, gv), y) in buf.iter_mut().zip(g).zip(out.data()) {
                        *b += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Softplus(x) => {
                let tx = val(*x);
                if let Some(buf) = slot(grads, nodes, *x) {
                    for ((b, gv), xv) in buf.iter_mut().zip(g).zip(tx.data()) {
                        *b += gv * sigmoid(*xv);
                    }
                }
            }
            Op::MatMul(a, b) => matmul_backward(grads, nodes, *a, *b, g),
            Op::Sum(x) => {
                if let Some(buf) = slot(grads, nodes, *x) {
                    buf.iter_mut().for_each(|b| *b += g[0]);
                }
            }
            Op::SumAxis(x, axis) => {
                let (outer, n, inner) = axis_split(val(*x).shape(), *axis);
                if let Some(buf) = slot(grads, nodes, *x) {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                buf[(o * n + j) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::L2Norm(x, axis) => {
                let tx = val(*x);
                let (outer, n, inner) = axis_split(tx.shape(), *axis);
                if let Some(buf) = slot(grads, nodes, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let norm = out.data()[o * inner + i];
                            if norm < NORM_GUARD {
                                continue;
                            }
                            let scale = g[o * inner + i] / norm;
                            for j in 0..n {
                                let at = (o * n + j) * inner + i;
                                buf[at] += scale * tx.data()[at];
                            }
                        }
                    }
                }
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                if let Some(buf) = slot(grads, nodes, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                buf[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Conv1d(x, k) => conv1d_backward(grads, nodes, *x, *k, g),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            } => {
                let tg = val(*gamma).data().to_vec();
                let d = tg.len();
                if let Some(buf) = slot(grads, nodes, *gamma) {
                    for (r, gr) in g.chunks(d).enumerate() {
                        for c in 0..d {
                            buf[c] += gr[c] * normalized[r * d + c];
                        }
                    }
                }
                if let Some(buf) = slot(grads, nodes, *beta) {
                    for gr in g.chunks(d) {
                        buf.iter_mut().zip(gr).for_each(|(b, gv)| *b += gv);
                    }
                }
                if let Some(buf) = slot(grads, nodes, *x) {
                    for (r, gr) in g.chunks(d).enumerate() {
                        let nrow = &normalized[r * d..(r + 1) * d];
                        let gx_hat: Vec<f64> = gr.iter().zip(&tg).map(|(a, b)| a * b).collect();
                        let mean_g = gx_hat.iter().sum::<f64>() / d as f64;
                        let mean_gn = gx_hat.iter().zip(nrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            buf[r * d + c] += rstd[r] * (gx_hat[c] - mean_g - nrow[c] * mean_gn);
                        }
                    }
                }
            }
            Op::Squash(x) => {
                let tx = val(*x);
                let d = *tx.shape().last().expect("rank >= 1");
                if let Some(buf) = slot(grads, nodes, *x) {
                    for ((s, gr), br) in tx.data().chunks(d).zip(g.chunks(d)).zip(buf.chunks_mut(d)) {
                        let n2: f64 = s.iter().map(|v| v * v).sum();
                        let n = n2.sqrt();
                        if n < NORM_GUARD {
                            continue;
                        }
                        let f = n / (1.0 + n2);
                        let df = (1.0 - n2) / (1.0 + n2).powi(2);
                        let gs: f64 = gr.iter().zip(s).map(|(a, b)| a * b).sum();
                        let k = df / n * gs;
                        for c in 0..d {
                            br[c] += gr[c] * f + s[c] * k;
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).shape()[*axis];
                    if let Some(buf) = slot(grads, nodes, p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            let dst = &mut buf[o * n * inner..(o + 1) * n * inner];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += n;
                }
            }
            Op::Custom(inputs, op) => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let mut local: Vec<Option<Vec<f64>>> = inputs
                    .iter()
                    .map(|&v| nodes[v.0].requires_grad.then(|| vec![0.0; val(v).len()]))
                    .collect();
                op.backward(&tensors, out, g, &mut local);
                for (&v, contrib) in inputs.iter().zip(local) {
                    if let (Some(c), Some(buf)) = (contrib, slot(grads, nodes, v)) {
                        buf.iter_mut().zip(c).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
    }
}

fn matmul_backward(grads: &mut [Option<Vec<f64>>], nodes: &[Node], a: Var, b: Var, g: &[f64]) {
    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
    let d = matmul_dims(ta.shape(), tb.shape()).expect("validated in forward");
    let (m, k, p) = (d.m, d.k, d.p);
    let (da, db) = (ta.data(), tb.data());
    if let Some(ga) = slot(grads, nodes, a) {
        // dA = dC . B^T
        for_each_broadcast(&d.batch, &d.a_batch_strides, &d.b_batch_strides, |o, ia, ib| {
            let gm = &g[o * m * p..(o + 1) * m * p];
            let bm = &db[ib * k * p..(ib + 1) * k * p];
            let gam = &mut ga[ia * m * k..(ia + 1) * m * k];
            for i in 0..m {
                for l in 0..k {
                    let brow = &bm[l * p..(l + 1) * p];
                    let grow = &gm[i * p..(i + 1) * p];
                    gam[i * k + l] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        });
    }
    if let Some(gb) = slot(grads, nodes, b) {
        // dB = A^T . dC
        for_each_broadcast(&d.batch, &d.a_batch_strides, &d.b_batch_strides, |o, ia, ib| {
            let gm = &g[o * m * p..(o + 1) * m * p];
            let am = &da[ia * m * k..(ia + 1) * m * k];
            let gbm = &mut gb[ib * k * p..(ib + 1) * k * p];
            for i in 0..m {
                let grow = &gm[i * p..(i + 1) * p];
                for l in 0..k {
                    let av = am[i * k + l];
                    if av == 0.0 {
                        continue;
                    }
                    for (gv, &gr) in gbm[l * p..(l + 1) * p].iter_mut().zip(grow) {
                        *gv += av * gr;
                    }
                }
            }
        });
    }
}

fn conv1d_backward(grads: &mut [Option<Vec<f64>>], nodes: &[Node], x: Var, k: Var, g: &[f64]) {
    let (tx, tk) = (&nodes[x.0].value, &nodes[k.0].value);
    let (b, l, d) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
    let w = tk.shape()[0];
    let half = w / 2;
    let (dx, dk) = (tx.data(), tk.data());
    let visit = |f: &mut dyn FnMut(usize, usize, usize)| {
        for bi in 0..b {
            for t in 0..l {
                for wi in 0..w {
                    let src = t + wi;
                    if src < half || src - half >= l {
                        continue;
                    }
                    f((bi * l + t) * d, (bi * l + src - half) * d, wi * d);
                }
            }
        }
    };
    if let Some(gx) = slot(grads, nodes, x) {
        visit(&mut |o, xi, ki| {
            for c in 0..d {
                gx[xi + c] += g[o + c] * dk[ki + c];
            }
        });
    }
    if let Some(gk) = slot(grads, nodes, k) {
        visit(&mut |o, xi, ki| {
            for c in 0..d {
                gk[ki + c] += g[o + c] * dx[xi + c];
            }
        });
    }
}
