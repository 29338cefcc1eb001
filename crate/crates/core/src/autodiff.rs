//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, which is already a topological order, so
//! [`Graph::backward`] walks the tape once from the end. Leaves created with
//! [`Graph::constant`] never receive gradients and neither does anything
//! computed only from constants, which keeps data-side products out of the
//! backward pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{axis_split, gemm, standardize_with_stats, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Mask(Var, Vec<f64>),
    Concat(Vec<Var>),
    Mean { x: Var, axis: usize },
    Transpose(Var),
    Reshape(Var),
    Standardize { x: Var, inv_std: Vec<f64> },
    FrobeniusSq(Var),
    Softmax(Var),
    WeightedMean { h: Var, w: Var },
    WeightedStd { h: Var, w: Var },
    BceLogits { logits: Var, labels: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Mask(..) => "dropout",
            Op::Concat(_) => "concat",
            Op::Mean { .. } => "reduce_mean",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Standardize { .. } => "batch_standardize",
            Op::FrobeniusSq(_) => "frobenius_sq",
            Op::Softmax(_) => "softmax_over_time",
            Op::WeightedMean { .. } => "weighted_mean",
            Op::WeightedStd { .. } => "weighted_std",
            Op::BceLogits { .. } => "bce_with_logits",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Takes ownership of a gradient; a leaf that did not influence the loss
    /// gets zeros of its shape.
    pub fn take(&mut self, v: Var, shape: &[usize]) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                self.needs(*a) || self.needs(*b)
            }
            Op::WeightedMean { h, w } | Op::WeightedStd { h, w } => self.needs(*h) || self.needs(*w),
            Op::Concat(vs) => vs.iter().any(|v| self.needs(*v)),
            Op::Scale(x, _)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Mask(x, _)
            | Op::Mean { x, .. }
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Standardize { x, .. }
            | Op::FrobeniusSq(x)
            | Op::Softmax(x)
            | Op::BceLogits { logits: x, .. } => self.needs(*x),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    /// Adds a length-`m` vector to every row of an `n×m` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (_, m) = xv.dims2()?;
        if bv.shape() != [m] {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, bias))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// Inverted dropout: in training mode (an rng is supplied) each entry is
    /// kept with probability `1 - p` and rescaled by `1 / (1 - p)`. Without an
    /// rng, or with `p == 0`, this is the identity and returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout rate {p} outside [0, 1)")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        )?;
        self.push(out, Op::Mask(x, mask))
    }

    /// Concatenates 2-D tensors with equal row counts along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let (rows, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.value(*p).dims2()?;
            if r != rows {
                return Err(Error::shape("concat", self.value(*first).shape(), self.value(*p).shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        self.push(Tensor::new(vec![rows, total], out)?, Op::Concat(parts.to_vec()))
    }

    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).reduce_mean(axis)?;
        self.push(out, Op::Mean { x, axis })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        self.push(out, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    /// See [`Tensor::batch_standardize`].
    pub fn batch_standardize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (out, inv_std) = standardize_with_stats(self.value(x), eps)?;
        self.push(out, Op::Standardize { x, inv_std })
    }

    pub fn frobenius_sq(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).frobenius_sq());
        self.push(out, Op::FrobeniusSq(x))
    }

    /// Softmax along the last axis.
    pub fn softmax_over_time(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax_over_time()?;
        self.push(out, Op::Softmax(x))
    }

    /// `h: B×T×F`, `w: B×T` → `Σ_t w[b,t]·h[b,t,:]` of shape `B×F`.
    pub fn weighted_mean(&mut self, h: Var, w: Var) -> Result<Var> {
        let (b, t, f) = self.check_weighted(h, w)?;
        let out = weighted_moments(self.value(h).data(), self.value(w).data(), b, t, f).0;
        self.push(Tensor::new(vec![b, f], out)?, Op::WeightedMean { h, w })
    }

    /// Weighted standard deviation over time, `sqrt(max(E_w[h²] − μ², 0))`.
    pub fn weighted_std(&mut self, h: Var, w: Var) -> Result<Var> {
        let (b, t, f) = self.check_weighted(h, w)?;
        let (mean, sq) = weighted_moments(self.value(h).data(), self.value(w).data(), b, t, f);
        let out = mean
            .iter()
            .zip(&sq)
            .map(|(m, s)| (s - m * m).max(0.0).sqrt())
            .collect();
        self.push(Tensor::new(vec![b, f], out)?, Op::WeightedStd { h, w })
    }

    fn check_weighted(&self, h: Var, w: Var) -> Result<(usize, usize, usize)> {
        let (b, t, f) = self.value(h).dims3()?;
        if self.value(w).shape() != [b, t] {
            return Err(Error::shape("weighted_moments", self.value(h).shape(), self.value(w).shape()));
        }
        Ok((b, t, f))
    }

    /// Mean binary cross-entropy on logits, evaluated in log space.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.numel() != labels.len() {
            return Err(Error::shape("bce_with_logits", z.shape(), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::InvalidArgument(format!("label {bad} is not 0 or 1")));
        }
        let n = labels.len() as f64;
        let total: f64 = z
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        self.push(
            Tensor::scalar(total / n),
            Op::BceLogits {
                logits,
                labels: labels.to_vec(),
            },
        )
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2()?;
                let n = bv.shape()[1];
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, 0.0, &mut da);
                    self.acc(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, 0.0, &mut db);
                    self.acc(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), "mul", |g, y| g * y)?);
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), "mul", |g, x| g * x)?);
                }
            }
            Op::Scale(x, c) => self.acc(grads, *x, g.map(|v| v * c)),
            Op::AddRow(x, bias) => {
                self.acc(grads, *x, g.clone());
                if self.needs(*bias) {
                    let m = self.value(*bias).numel();
                    let mut db = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.acc(grads, *bias, Tensor::vector(db));
                }
            }
            Op::Tanh(x) => self.acc(grads, *x, g.zip_map(y, "tanh", |g, y| g * (1.0 - y * y))?),
            Op::Relu(x) => self.acc(grads, *x, g.zip_map(y, "relu", |g, y| if y > 0.0 { g } else { 0.0 })?),
            Op::Sigmoid(x) => self.acc(grads, *x, g.zip_map(y, "sigmoid", |g, y| g * y * (1.0 - y))?),
            Op::Mask(x, mask) => {
                let dx = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                self.acc(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Concat(parts) => {
                let (rows, total) = g.dims2()?;
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).shape()[1];
                    if self.needs(*p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.acc(grads, *p, Tensor::new(vec![rows, w], dp)?);
                    }
                    offset += w;
                }
            }
            Op::Mean { x, axis } => {
                let shape = self.value(*x).shape();
                let (outer, len, inner) = axis_split(shape, *axis)?;
                let scale = 1.0 / len as f64;
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for a in 0..len {
                        let dst = &mut dx[(o * len + a) * inner..(o * len + a + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s * scale;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(shape.to_vec(), dx)?);
            }
            Op::Transpose(x) => self.acc(grads, *x, g.transpose()?),
            Op::Reshape(x) => self.acc(grads, *x, g.reshape(self.value(*x).shape())?),
            Op::Standardize { x, inv_std } => {
                let b = y.shape()[0];
                let cols = inv_std.len();
                let (gd, yd) = (g.data(), y.data());
                let mut mean_g = vec![0.0; cols];
                let mut mean_gy = vec![0.0; cols];
                for r in 0..b {
                    for c in 0..cols {
                        mean_g[c] += gd[r * cols + c];
                        mean_gy[c] += gd[r * cols + c] * yd[r * cols + c];
                    }
                }
                let inv_b = 1.0 / b as f64;
                let mut dx = vec![0.0; b * cols];
                for r in 0..b {
                    for c in 0..cols {
                        let i = r * cols + c;
                        dx[i] = inv_std[c] * (gd[i] - mean_g[c] * inv_b - yd[i] * mean_gy[c] * inv_b);
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::FrobeniusSq(x) => {
                let s = 2.0 * g.item();
                self.acc(grads, *x, self.value(*x).map(|v| s * v));
            }
            Op::Softmax(x) => {
                let t = *y.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; y.numel()];
                for ((dst, gr), yr) in dx.chunks_mut(t).zip(g.data().chunks(t)).zip(y.data().chunks(t)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yi * (gi - dot);
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::WeightedMean { h, w } => {
                let (hv, wv) = (self.value(*h), self.value(*w));
                let (b, t, f) = hv.dims3()?;
                let (hd, wd, gd) = (hv.data(), wv.data(), g.data());
                if self.needs(*h) {
                    let mut dh = vec![0.0; b * t * f];
                    for bi in 0..b {
                        for ti in 0..t {
                            let wt = wd[bi * t + ti];
                            let base = (bi * t + ti) * f;
                            for fi in 0..f {
                                dh[base + fi] = wt * gd[bi * f + fi];
                            }
                        }
                    }
                    self.acc(grads, *h, Tensor::new(vec![b, t, f], dh)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; b * t];
                    for bi in 0..b {
                        for ti in 0..t {
                            let base = (bi * t + ti) * f;
                            dw[bi * t + ti] = (0..f).map(|fi| hd[base + fi] * gd[bi * f + fi]).sum();
                        }
                    }
                    self.acc(grads, *w, Tensor::new(vec![b, t], dw)?);
                }
            }
            Op::WeightedStd { h, w } => {
                let (hv, wv) = (self.value(*h), self.value(*w));
                let (b, t, f) = hv.dims3()?;
                let (hd, wd, gd, sd) = (hv.data(), wv.data(), g.data(), y.data());
                let (mean, _) = weighted_moments(hd, wd, b, t, f);
                // d sigma = d var / (2 sigma); zero where the variance was clamped.
                let half_g: Vec<f64> = gd
                    .iter()
                    .zip(sd)
                    .map(|(g, s)| if *s > 0.0 { g / (2.0 * s) } else { 0.0 })
                    .collect();
                if self.needs(*h) {
                    let mut dh = vec![0.0; b * t * f];
                    for bi in 0..b {
                        for ti in 0..t {
                            let wt = wd[bi * t + ti];
                            let base = (bi * t + ti) * f;
                            for fi in 0..f {
                                let k = bi * f + fi;
                                dh[base + fi] = half_g[k] * 2.0 * wt * (hd[base + fi] - mean[k]);
                            }
                        }
                    }
                    self.acc(grads, *h, Tensor::new(vec![b, t, f], dh)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; b * t];
                    for bi in 0..b {
                        for ti in 0..t {
                            let base = (bi * t + ti) * f;
                            dw[bi * t + ti] = (0..f)
                                .map(|fi| {
                                    let k = bi * f + fi;
                                    let hv = hd[base + fi];
                                    half_g[k] * (hv * hv - 2.0 * mean[k] * hv)
                                })
                                .sum();
                        }
                    }
                    self.acc(grads, *w, Tensor::new(vec![b, t], dw)?);
                }
            }
            Op::BceLogits { logits, labels } => {
                let z = self.value(*logits);
                let s = g.item() / labels.len() as f64;
                let dz = z
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| s * (sigmoid(z) - y))
                    .collect();
                self.acc(grads, *logits, Tensor::new(z.shape().to_vec(), dz)?);
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per (batch, feature): weighted mean and weighted mean of squares over time.
fn weighted_moments(h: &[f64], w: &[f64], b: usize, t: usize, f: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; b * f];
    let mut sq = vec![0.0; b * f];
    for bi in 0..b {
        for ti in 0..t {
            let wt = w[bi * t + ti];
            let base = (bi * t + ti) * f;
            for fi in 0..f {
                let v = h[base + fi];
                mean[bi * f + fi] += wt * v;
                sq[bi * f + fi] += wt * v * v;
            }
        }
    }
    (mean, sq)
}

/// Finite-difference step used by [`check_gradients`].
pub const FD_STEP: f64 = 1e-5;

/// Outcome of a gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub passed: bool,
    pub max_rel_error: f64,
}

/// Reverse-mode gradients of `f` with respect to every input, plus the value.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out).item();
    let mut grads = g.backward(out)?;
    let per_input = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.take(*v, t.shape()))
        .collect();
    Ok((value, per_input))
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::InvalidArgument("gradient check needs a scalar function".into()));
    }
    Ok(v.item())
}

/// Central finite differences with step [`FD_STEP`] for every input entry.
pub fn finite_difference<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let base = eval_scalar(f, inputs)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("gradient check objective".into()));
    }
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + FD_STEP;
            let plus = eval_scalar(f, &work)?;
            work[k].data_mut()[i] = x0 - FD_STEP;
            let minus = eval_scalar(f, &work)?;
            work[k].data_mut()[i] = x0;
            grad.data_mut()[i] = (plus - minus) / (2.0 * FD_STEP);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Largest entrywise relative error between two gradient sets.
///
/// Each entry is measured against `max(|a|, |n|, 1e-3·‖n‖∞, 1e-10)`, so
/// entries far below the overall gradient scale are judged against that
/// scale instead of their own vanishing magnitude.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    let scale = numeric
        .iter()
        .flat_map(|t| t.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-10);
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences. Passes iff the maximum relative error is below `rtol`.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], rtol: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (value, analytic) = analytic_gradients(&f, inputs)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("gradient check objective".into()));
    }
    let numeric = finite_difference(&f, inputs)?;
    let max_rel_error = max_relative_error(&analytic, &numeric);
    Ok(GradCheck {
        passed: max_rel_error < rtol,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_passes() {
        let check = check_gradients(
            |g, x| {
                let sq = g.mul(x[0], x[0])?;
                g.reshape(sq, &[])
            },
            &[Tensor::vector(vec![3.0])],
            1e-4,
        )
        .unwrap();
        assert!(check.passed, "{check:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let f = |g: &mut Graph, x: &[Var]| {
            let sq = g.mul(x[0], x[0])?;
            g.reshape(sq, &[])
        };
        let inputs = [Tensor::vector(vec![3.0])];
        let (_, analytic) = analytic_gradients(&f, &inputs).unwrap();
        assert_eq!(analytic[0].data(), &[6.0]);
        let corrupted: Vec<Tensor> = analytic.iter().map(|t| t.map(|v| v * 1.01)).collect();
        let numeric = finite_difference(&f, &inputs).unwrap();
        assert!(max_relative_error(&corrupted, &numeric) > 1e-4);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let r = check_gradients(
            |g, x| {
                let s = g.scale(x[0], f64::INFINITY)?;
                g.frobenius_sq(s)
            },
            &[Tensor::vector(vec![1.0])],
            1e-4,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let a = random(&[3, 4], &mut rng);
            let b = random(&[4, 2], &mut rng);
            let bias = random(&[2], &mut rng);
            let other = random(&[3, 2], &mut rng);
            let f = |g: &mut Graph, v: &[Var]| {
                let p = g.matmul(v[0], v[1])?;
                let p = g.add_row(p, v[2])?;
                let t = g.tanh(p)?;
                let s = g.sigmoid(p)?;
                let r = g.relu(p)?;
                let m = g.mul(t, v[3])?;
                let d = g.sub(m, s)?;
                let d = g.add(d, r)?;
                let c = g.concat(&[d, v[3]])?;
                let c = g.scale(c, 0.7)?;
                let ct = g.transpose(c)?;
                let st = g.batch_standardize(ct, 1e-5)?;
                let sm = g.softmax_over_time(st)?;
                let mean = g.reduce_mean(sm, 1)?;
                let fro = g.frobenius_sq(mean)?;
                let fro2 = g.frobenius_sq(c)?;
                g.add(fro, fro2)
            };
            let check = check_gradients(f, &[a, b, bias, other], 1e-4).unwrap();
            assert!(check.passed, "trial {trial}: {check:?}");
        }
    }

    #[test]
    fn weighted_moments_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let h = random(&[2, 5, 3], &mut rng);
            let scores = random(&[2, 5], &mut rng);
            let f = |g: &mut Graph, v: &[Var]| {
                let w = g.softmax_over_time(v[1])?;
                let mu = g.weighted_mean(v[0], w)?;
                let sd = g.weighted_std(v[0], w)?;
                let c = g.concat(&[mu, sd])?;
                let c = g.tanh(c)?;
                let l = g.frobenius_sq(c)?;
                g.reshape(l, &[1])
            };
            let check = check_gradients(f, &[h, scores], 1e-4).unwrap();
            assert!(check.passed, "trial {trial}: {check:?}");
        }
    }

    #[test]
    fn bce_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = [1.0, 0.0, 1.0, 0.0];
        for _ in 0..20 {
            let z = random(&[4], &mut rng).map(|v| 4.0 * v);
            let check = check_gradients(|g, v| g.bce_with_logits(v[0], &labels), &[z], 1e-4).unwrap();
            assert!(check.passed, "{check:?}");
        }
    }

    #[test]
    fn dropout_eval_is_identity_and_train_rescales() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[1000], 1.0));
        let same = g.dropout::<ChaCha8Rng>(x, 0.25, None).unwrap();
        assert_eq!(same, x);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = g.dropout(x, 0.25, Some(&mut rng)).unwrap();
        let vals = g.value(d).data();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
        let kept = vals.iter().filter(|&&v| v > 0.0).count();
        assert!((650..850).contains(&kept), "{kept}");
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::eye(2));
        let x = g.constant(Tensor::full(&[3, 2], 1.0));
        let y = g.matmul(x, w).unwrap();
        let l = g.frobenius_sq(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(x).is_none());
        assert_eq!(grads.wrt(w).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn bce_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let l = g.bce_with_logits(z, &[1.0, 0.0]).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
        let z = g.constant(Tensor::vector(vec![20.0]));
        let l = g.bce_with_logits(z, &[1.0]).unwrap();
        assert!(g.value(l).item() < 1e-8);
        let z = g.constant(Tensor::vector(vec![1.0]));
        let l = g.bce_with_logits(z, &[1.0]).unwrap();
        assert!((g.value(l).item() - 0.313_261_687_518_222_8).abs() < 1e-12);
        let z = g.constant(Tensor::vector(vec![1.0]));
        assert!(g.bce_with_logits(z, &[0.5]).is_err());
    }
}
