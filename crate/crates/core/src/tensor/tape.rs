//! Reverse-mode gradient tape.
//!
//! Each op evaluates eagerly, appends a node holding its output and whatever
//! it needs for the backward pass, and returns a [`Var`] handle. Because
//! nodes are only ever appended, the node list is already a topological
//! order and [`Tape::backward`] simply walks it in reverse.

use super::kernels::{
    batch_to_channel_major, channel_major_to_batch, col2im, conv_output_size, gemm, im2col,
    ConvGeom,
};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// `kernel / 2` zeros on each side.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with externally supplied running statistics.
    Eval { mean: &'a [f32], var: &'a [f32] },
}

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased (n - 1) variance.
    pub var: Vec<f32>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Sum(Var),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        train: bool,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    Shortcut {
        x: Var,
        stride: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    consumed: bool,
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
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

    /// Gradient accumulated by the last backward pass, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient matches value shape")
        })
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFiniteValue(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let out = Tensor::new(vec![m, n], out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        self.push("sum", Tensor::scalar(total as f32), Op::Sum(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("relu", out, Op::Relu(a), &[a])
    }

    /// 2-D convolution without bias. `x` is N×C×H×W, `w` is O×C×kh×kw.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {sx:?}, kernel {sw:?}, stride {stride}"),
            ));
        }
        let (kh, kw) = (sw[2], sw[3]);
        let pad = match padding {
            Padding::Same => {
                if kh != kw {
                    return Err(Error::shape("conv2d", "same padding needs a square kernel"));
                }
                kh / 2
            }
            Padding::Valid => 0,
        };
        let (oh, ow) = match (
            conv_output_size(sx[2], kh, stride, pad),
            conv_output_size(sx[3], kw, stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {kh}x{kw} larger than padded input {sx:?}"),
                ))
            }
        };
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let o = sw[0];
        let col = im2col(self.value(x).data(), &geom);
        let mut out = vec![0.0; o * geom.cols()];
        gemm(
            o,
            geom.rows(),
            geom.cols(),
            self.value(w).data(),
            false,
            &col,
            false,
            &mut out,
            false,
        );
        let out = channel_major_to_batch(&out, o, geom.n, oh * ow);
        let out = Tensor::new(vec![geom.n, o, oh, ow], out)?;
        self.push("conv2d", out, Op::Conv2d { x, w, geom }, &[x, w])
    }

    /// Per-channel batch normalization of an N×C×H×W tensor with affine
    /// `gamma`/`beta`. Training mode also returns the batch statistics so the
    /// caller can update its running averages.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
        eps: f32,
    ) -> Result<(Var, Option<BatchStats>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::shape("batch_norm2d", format!("input {sx:?}")));
        }
        let (n, c, plane) = (sx[0], sx[1], sx[2] * sx[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm2d",
                format!(
                    "affine shapes {:?}/{:?} for {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let count = n * plane;
        let xv = self.value(x).data();
        let (mean, var_biased, stats) = match mode {
            BatchNormMode::Train => {
                if count < 2 {
                    return Err(Error::shape(
                        "batch_norm2d",
                        "training mode needs more than one value per channel",
                    ));
                }
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                let mut unbiased = vec![0.0f32; c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        s += xv[off..off + plane].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut sq = 0.0f64;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        sq += xv[off..off + plane]
                            .iter()
                            .map(|&v| (v as f64 - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = m as f32;
                    var[ch] = (sq / count as f64) as f32;
                    unbiased[ch] = (sq / (count - 1) as f64) as f32;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(
                        "batch_norm2d",
                        format!("running stats of length {}/{} for {c} channels", mean.len(), var.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f32> = var_biased
            .iter()
            .map(|&v| 1.0 / (v as f64 + eps as f64).sqrt() as f32)
            .collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0f32; xv.len()];
        let mut out = vec![0.0f32; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let out = Tensor::new(sx, out)?;
        let train = stats.is_some();
        let var = self.push(
            "batch_norm2d",
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        )?;
        Ok((var, stats))
    }

    /// N×C×H×W -> N×C spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("input {sx:?}")));
        }
        let plane = sx[2] * sx[3];
        let data = self
            .value(x)
            .data()
            .chunks_exact(plane)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
            .collect();
        let out = Tensor::new(vec![sx[0], sx[1]], data)?;
        self.push("global_avg_pool", out, Op::GlobalAvgPool(x), &[x])
    }

    /// `x·wᵀ + b` with `x` N×in, `w` out×in, `b` out.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(Error::shape(
                "linear",
                format!("input {sx:?}, weight {sw:?}, bias {sb:?}"),
            ));
        }
        let (n, inp, outp) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0; n * outp];
        for row in out.chunks_exact_mut(outp) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(n, inp, outp, self.value(x).data(), false, self.value(w).data(), true, &mut out, true);
        let out = Tensor::new(vec![n, outp], out)?;
        self.push("linear", out, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Concatenates tensors of equal rank along `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return Err(Error::shape("concat", "no inputs")),
        };
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(out_shape, data)?;
        self.push(
            "concat",
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Mean cross-entropy of softmax(`logits`) against integer labels, using
    /// max-subtracted log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let mut probs = vec![0.0f32; s[0] * k];
        let mut total = 0.0f64;
        for (i, row) in self.value(logits).data().chunks_exact(k).enumerate() {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let sum_exp: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            for (j, &v) in row.iter().enumerate() {
                probs[i * k + j] = ((v as f64 - log_z).exp()) as f32;
            }
            total += log_z - row[labels[i]] as f64;
        }
        let loss = Tensor::scalar((total / s[0] as f64) as f32);
        self.push(
            "softmax_cross_entropy",
            loss,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Residual shortcut: spatial subsampling by `stride` and zero-padding of
    /// the channel axis up to `out_channels`.
    pub fn shortcut(&mut self, x: Var, stride: usize, out_channels: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || out_channels < sx[1] || stride == 0 {
            return Err(Error::shape(
                "shortcut",
                format!("input {sx:?} to {out_channels} channels, stride {stride}"),
            ));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let xv = self.value(x).data();
        let mut out = vec![0.0f32; n * out_channels * oh * ow];
        for b in 0..n {
            for ch in 0..c {
                let src = &xv[(b * c + ch) * h * w..];
                let dst = &mut out[(b * out_channels + ch) * oh * ow..];
                for i in 0..oh {
                    for j in 0..ow {
                        dst[i * ow + j] = src[i * stride * w + j * stride];
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, out_channels, oh, ow], out)?;
        self.push("shortcut", out, Op::Shortcut { x, stride }, &[x])
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let value = self.value(loss);
        if value.numel() != 1 || value.shape().len() > 1 {
            return Err(Error::NotScalar(value.shape().to_vec()));
        }
        let seed = Tensor::new(value.shape().to_vec(), vec![1.0])?;
        self.backward_with(loss, seed)
    }

    /// Backpropagates `seed` (same shape as `output`) as the upstream gradient.
    pub fn backward_with(&mut self, output: Var, seed: Tensor) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} for output {:?}", seed.shape(), self.shape(output)),
            ));
        }
        self.consumed = true;
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[output.0] = Some(seed.into_data());
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<f32>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn accumulate(&mut self, v: Var, delta: &[f32]) {
        if let Some(buf) = self.grad_buf(v) {
            for (b, d) in buf.iter_mut().zip(delta) {
                *b += d;
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &[f32]) -> Result<()> {
        // Swap the op out so we can borrow the rest of the tape mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let result = self.propagate_op(&op, i, g);
        self.nodes[i].op = op;
        result
    }

    fn propagate_op(&mut self, op: &Op, i: usize, g: &[f32]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    let d: Vec<f32> = g.iter().zip(self.value(b).data()).map(|(g, y)| g * y).collect();
                    self.accumulate(a, &d);
                }
                if self.requires_grad(b) {
                    let d: Vec<f32> = g.iter().zip(self.value(a).data()).map(|(g, x)| g * x).collect();
                    self.accumulate(b, &d);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.requires_grad(a) {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(b).data(), true, &mut d, false);
                    self.accumulate(a, &d);
                }
                if self.requires_grad(b) {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, self.value(a).data(), true, g, false, &mut d, false);
                    self.accumulate(b, &d);
                }
            }
            Op::Sum(a) => {
                let g0 = g[0];
                if let Some(buf) = self.grad_buf(a) {
                    buf.iter_mut().for_each(|b| *b += g0);
                }
            }
            Op::Relu(a) => {
                let out = self.nodes[i].value.data();
                let d: Vec<f32> = g
                    .iter()
                    .zip(out)
                    .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(a, &d);
            }
            Op::Conv2d { x, w, geom } => {
                let o = self.shape(w)[0];
                let p = geom.oh * geom.ow;
                let g_cm = batch_to_channel_major(g, o, geom.n, p);
                if self.requires_grad(w) {
                    let col = im2col(self.value(x).data(), &geom);
                    let mut dw = vec![0.0; o * geom.rows()];
                    gemm(o, geom.cols(), geom.rows(), &g_cm, false, &col, true, &mut dw, false);
                    self.accumulate(w, &dw);
                }
                if self.requires_grad(x) {
                    let mut dcol = vec![0.0; geom.rows() * geom.cols()];
                    gemm(
                        geom.rows(),
                        o,
                        geom.cols(),
                        self.value(w).data(),
                        true,
                        &g_cm,
                        false,
                        &mut dcol,
                        false,
                    );
                    if let Some(buf) = self.grad_buf(x) {
                        col2im(&dcol, &geom, buf);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
                train,
            } => {
                let s = self.shape(x);
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let count = (n * plane) as f64;
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for ch in 0..c {
                    let (mut sg, mut sgx) = (0.0f64, 0.0f64);
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        for idx in off..off + plane {
                            sg += g[idx] as f64;
                            sgx += (g[idx] * xhat[idx]) as f64;
                        }
                    }
                    dgamma[ch] = sgx as f32;
                    dbeta[ch] = sg as f32;
                }
                if self.requires_grad(x) {
                    let gam = self.value(gamma).data().to_vec();
                    let mut dx = vec![0.0f32; g.len()];
                    for ch in 0..c {
                        let scale = gam[ch] * inv_std[ch];
                        if train {
                            let mean_g = dbeta[ch] as f64 / count;
                            let mean_gx = dgamma[ch] as f64 / count;
                            for b in 0..n {
                                let off = (b * c + ch) * plane;
                                for idx in off..off + plane {
                                    dx[idx] = scale
                                        * (g[idx] - mean_g as f32 - xhat[idx] * mean_gx as f32);
                                }
                            }
                        } else {
                            for b in 0..n {
                                let off = (b * c + ch) * plane;
                                for idx in off..off + plane {
                                    dx[idx] = scale * g[idx];
                                }
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(x);
                let plane = s[2] * s[3];
                let scale = 1.0 / plane as f32;
                if let Some(buf) = self.grad_buf(x) {
                    for (chunk, &gv) in buf.chunks_exact_mut(plane).zip(g) {
                        chunk.iter_mut().for_each(|b| *b += gv * scale);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, inp) = (self.shape(x)[0], self.shape(x)[1]);
                let outp = self.shape(w)[0];
                if self.requires_grad(x) {
                    let mut d = vec![0.0; n * inp];
                    gemm(n, outp, inp, g, false, self.value(w).data(), false, &mut d, false);
                    self.accumulate(x, &d);
                }
                if self.requires_grad(w) {
                    let mut d = vec![0.0; outp * inp];
                    gemm(outp, n, inp, g, true, self.value(x).data(), false, &mut d, false);
                    self.accumulate(w, &d);
                }
                if self.requires_grad(b) {
                    let mut d = vec![0.0f32; outp];
                    for row in g.chunks_exact(outp) {
                        for (acc, v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(b, &d);
                }
            }
            Op::Concat { ref inputs, axis } => {
                let shape = self.nodes[i].value.shape().to_vec();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[axis] * inner;
                    if self.requires_grad(v) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                        }
                        self.accumulate(v, &d);
                    }
                    offset += chunk;
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                ref labels,
                ref probs,
            } => {
                let k = self.shape(logits)[1];
                let scale = g[0] / labels.len() as f32;
                let mut d: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= scale;
                }
                self.accumulate(logits, &d);
            }
            Op::Shortcut { x, stride } => {
                let s = self.shape(x).to_vec();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let os = self.nodes[i].value.shape();
                let (oc, oh, ow) = (os[1], os[2], os[3]);
                if let Some(buf) = self.grad_buf(x) {
                    for b in 0..n {
                        for ch in 0..c {
                            let src = &g[(b * oc + ch) * oh * ow..];
                            let dst = &mut buf[(b * c + ch) * h * w..];
                            for r in 0..oh {
                                for col in 0..ow {
                                    dst[r * stride * w + col * stride] += src[r * ow + col];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
