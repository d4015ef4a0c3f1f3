//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a node
//! holding its output value and whatever it needs for the backward sweep;
//! [`Tape::backward`] then walks the nodes in reverse insertion order, which is
//! a valid reverse topological order because nodes only reference earlier ones.
//!
//! Every forward operation checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] rather than letting a bad value propagate.

use crate::error::{Error, Result};
use crate::kernels::{col2im, gemm, gemm_new, im2col, ConvGeom, MatRef};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How batch normalization picks its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Accumulated running statistics.
    Running,
    /// Batch statistics of the evaluated batch, running statistics untouched.
    Transduction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Pool3 {
        x: Var,
        kind: PoolKind,
        /// Max: flat input index of each output's argmax. Avg: window sizes.
        aux: Vec<usize>,
    },
    AvgPool2(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Concat(Vec<Var>),
    SoftmaxXent {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; a zero tensor when `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Fingerprint of every relu mask and max-pool argmax, when enabled.
    kinks: Option<u64>,
}

fn finite(t: Tensor, what: &str) -> Result<Tensor> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn nchw(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::Shape(format!("{what} expects NCHW input, got {s:?}"))),
    }
}

fn matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::Shape(format!("{what} expects a matrix, got {s:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that fingerprints the branch taken at every non-smooth point
    /// (relu sign, max-pool argmax). Two forward passes with equal
    /// fingerprints lie on the same smooth piece of the function.
    pub fn with_kink_tracking() -> Self {
        Tape {
            nodes: Vec::new(),
            kinks: Some(0xcbf2_9ce4_8422_2325),
        }
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks
    }

    fn mix_kinks(&mut self, items: impl Iterator<Item = u64>) {
        if let Some(h) = &mut self.kinks {
            for v in items {
                *h = (*h ^ v).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf holding a parameter (`requires_grad`) or a constant input.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op, what: &str) -> Result<Var> {
        let value = finite(value, what)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::NotOnTape(v.0))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, &[a, b], Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, &[a, b], Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push(out, &[x], Op::Scale(x, s), "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        if self.kinks.is_some() {
            let mask: Vec<u64> = self.value(x).data().iter().map(|&v| (v > 0.0) as u64).collect();
            self.mix_kinks(mask.into_iter());
        }
        self.push(out, &[x], Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, &[x], Op::Sigmoid(x), "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push(out, &[x], Op::Tanh(x), "tanh")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, &[x], Op::Sum(x), "sum")
    }

    /// `[m,k] · [k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix(self.value(a), "matmul")?;
        let (k2, n) = matrix(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let out = gemm_new(
            m,
            k,
            n,
            MatRef::rows(self.value(a).data(), k),
            MatRef::rows(self.value(b).data(), n),
        );
        self.push(Tensor::new(vec![m, n], out)?, &[a, b], Op::MatMul(a, b), "matmul")
    }

    /// Adds a `[n]` bias to every row of an `[m,n]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = matrix(self.value(x), "add_bias")?;
        if self.value(b).shape() != [n] {
            return Err(Error::Shape(format!(
                "bias {:?} for {n} columns",
                self.value(b).shape()
            )));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push(out, &[x, b], Op::AddBias(x, b), "add_bias")
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = matrix(self.value(x), "slice_cols")?;
        if start + len > n {
            return Err(Error::Shape(format!("columns {start}..{} of {n}", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for row in src.chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], out)?;
        self.push(out, &[x], Op::SliceCols { x, start }, "slice_cols")
    }

    /// Rows of `table` picked by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, _) = matrix(self.value(table), "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Shape(format!("token {bad} outside vocabulary of {v}")));
        }
        let out = self.value(table).select_rows(ids);
        self.push(
            out,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    /// Stride-1 convolution of `x[n,c,h,w]` with `w[o,c,kh,kw]`, zero padding
    /// `(ph, pw)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        ph: usize,
        pw: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = nchw(self.value(x), "conv2d")?;
        let (o, kh, kw) = match *self.value(w).shape() {
            [o, wc, kh, kw] if wc == c => (o, kh, kw),
            ref s => {
                return Err(Error::Shape(format!(
                    "conv weight {s:?} for {c} input channels"
                )))
            }
        };
        if kh > h + 2 * ph || kw > wd + 2 * pw {
            return Err(Error::Shape(format!("kernel {kh}x{kw} larger than padded input")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(Error::Shape(format!(
                    "conv bias {:?} for {o} filters",
                    self.value(b).shape()
                )));
            }
        }
        let geom = ConvGeom { n, c, h, w: wd, kh, kw, ph, pw };
        // one image at a time keeps the column matrix in cache
        let single = ConvGeom { n: 1, ..geom };
        let (k, plane) = (single.k(), single.p());
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let in_plane = c * h * wd;
        let mut cols = Vec::with_capacity(n * k * plane);
        let mut out = Vec::with_capacity(n * o * plane);
        let bias = b.map(|b| self.value(b).data());
        for img in 0..n {
            let img_cols = im2col(&self.value(x).data()[img * in_plane..][..in_plane], &single);
            let mat = gemm_new(
                o,
                k,
                plane,
                MatRef::rows(self.value(w).data(), k),
                MatRef::rows(&img_cols, plane),
            );
            for (oc, row) in mat.chunks(plane).enumerate() {
                let bv = bias.map_or(0.0, |bs| bs[oc]);
                out.extend(row.iter().map(|&s| s + bv));
            }
            cols.extend_from_slice(&img_cols);
        }
        let out = Tensor::new(vec![n, o, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, &inputs, Op::Conv2d { x, w, b, geom, cols }, "conv2d")
    }

    /// 3×3 pooling, stride 1, padding 1. Average pooling divides by the number
    /// of in-bounds cells; max pooling treats padding as -inf.
    pub fn pool3(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(x), "pool3")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut aux = vec![0usize; src.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
                    let (x0, x1) = (xx.saturating_sub(1), (xx + 1).min(w - 1));
                    let o = base + y * w + xx;
                    match kind {
                        PoolKind::Avg => {
                            let mut s = 0.0;
                            for iy in y0..=y1 {
                                for ix in x0..=x1 {
                                    s += src[base + iy * w + ix];
                                }
                            }
                            let count = (y1 - y0 + 1) * (x1 - x0 + 1);
                            out[o] = s / count as f64;
                            aux[o] = count;
                        }
                        PoolKind::Max => {
                            let mut best = base + y0 * w + x0;
                            for iy in y0..=y1 {
                                for ix in x0..=x1 {
                                    let i = base + iy * w + ix;
                                    if src[i] > src[best] {
                                        best = i;
                                    }
                                }
                            }
                            out[o] = src[best];
                            aux[o] = best;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        if kind == PoolKind::Max {
            let argmax: Vec<u64> = aux.iter().map(|&i| i as u64).collect();
            self.mix_kinks(argmax.into_iter());
        }
        self.push(out, &[x], Op::Pool3 { x, kind, aux }, "pool3")
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(x), "avg_pool2")?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::Shape(format!("cannot downsample {h}x{w}")));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    let i = plane * h * w + 2 * y * w + 2 * xx;
                    out[plane * oh * ow + y * ow + xx] =
                        0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push(out, &[x], Op::AvgPool2(x), "avg_pool2")
    }

    /// Per-channel batch normalization over `[n, c, ...]`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        running_mean: &mut Tensor,
        running_var: &mut Tensor,
    ) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 || shape[0] == 0 {
            return Err(Error::Shape(format!("batch_norm input {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        for t in [self.value(gamma), self.value(beta), &*running_mean, &*running_var] {
            if t.shape() != [c] {
                return Err(Error::Shape(format!(
                    "batch_norm parameter {:?} for {c} channels",
                    t.shape()
                )));
            }
        }
        let src = self.value(x).data();
        let count = (n * inner) as f64;
        let batch_stats = mode != BnMode::Running;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if batch_stats {
            for img in 0..n {
                for ch in 0..c {
                    let s: f64 = src[(img * c + ch) * inner..][..inner].iter().sum();
                    mean[ch] += s;
                }
            }
            for m in &mut mean {
                *m /= count;
            }
            for img in 0..n {
                for ch in 0..c {
                    let m = mean[ch];
                    let s: f64 = src[(img * c + ch) * inner..][..inner]
                        .iter()
                        .map(|v| (v - m) * (v - m))
                        .sum();
                    var[ch] += s;
                }
            }
            for v in &mut var {
                *v /= count;
            }
        } else {
            mean.copy_from_slice(running_mean.data());
            var.copy_from_slice(running_var.data());
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for img in 0..n {
            for ch in 0..c {
                let off = (img * c + ch) * inner;
                for i in off..off + inner {
                    let xh = (src[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        if mode == BnMode::Train {
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for ch in 0..c {
                let rm = &mut running_mean.data_mut()[ch];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[ch];
                let rv = &mut running_var.data_mut()[ch];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[ch] * unbias;
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push(
            out,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            "batch_norm",
        )
    }

    /// `[n,c,h,w] -> [n,c]`
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(x), "global_avg_pool")?;
        let plane = h * w;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::new(vec![n, c], out)?;
        self.push(out, &[x], Op::GlobalAvgPool(x), "global_avg_pool")
    }

    /// `x[b,in] · w[out,in]ᵀ + bias[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bs, din) = matrix(self.value(x), "linear")?;
        let (dout, din2) = matrix(self.value(w), "linear")?;
        if din != din2 || self.value(b).shape() != [dout] {
            return Err(Error::Shape(format!(
                "linear x {:?}, w {:?}, b {:?}",
                self.value(x).shape(),
                self.value(w).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = Vec::with_capacity(bs * dout);
        for _ in 0..bs {
            out.extend_from_slice(self.value(b).data());
        }
        gemm(
            bs,
            din,
            dout,
            MatRef::rows(self.value(x).data(), din),
            MatRef::rows(self.value(w).data(), din).t(),
            1.0,
            &mut out,
        );
        let out = Tensor::new(vec![bs, dout], out)?;
        self.push(out, &[x, w, b], Op::Linear { x, w, b }, "linear")
    }

    /// Concatenation along the channel axis (axis 1).
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self
            .value(*xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .shape()
            .to_vec();
        if first.len() < 2 {
            return Err(Error::Shape(format!("concat input {first:?}")));
        }
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut channels = 0;
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != first.len() || s[0] != n || s[2..] != first[2..] {
                return Err(Error::Shape(format!("concat {first:?} with {s:?}")));
            }
            channels += s[1];
        }
        let mut out = Vec::with_capacity(n * channels * inner);
        for img in 0..n {
            for &v in xs {
                let t = self.value(v);
                let block = t.shape()[1] * inner;
                out.extend_from_slice(&t.data()[img * block..(img + 1) * block]);
            }
        }
        let mut shape = first;
        shape[1] = channels;
        let out = Tensor::new(shape, out)?;
        self.push(out, xs, Op::Concat(xs.to_vec()), "concat")
    }

    /// Mean softmax cross-entropy of `logits[b,c]` against integer labels.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = matrix(self.value(logits), "softmax_xent")?;
        if b == 0 || labels.len() != b {
            return Err(Error::Shape(format!("{} labels for batch of {b}", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (i, row) in src.chunks(c).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln();
            for (j, v) in row.iter().enumerate() {
                probs[i * c + j] = (v - max).exp() / z;
            }
            loss -= row[labels[i]] - max - log_z;
        }
        let out = Tensor::scalar(loss / b as f64);
        self.push(
            out,
            &[logits],
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            "softmax_xent",
        )
    }

    /// Mean squared error of `pred` against a constant target of equal length.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() || p.is_empty() {
            return Err(Error::Shape(format!(
                "mse of {} predictions against {} targets",
                p.len(),
                target.len()
            )));
        }
        let loss = p
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / p.len() as f64;
        self.push(
            Tensor::scalar(loss),
            &[pred],
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            "mse",
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(finite(g, "backward")?);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Relu(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))?;
                self.accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))?;
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::MatMul(a, b) => {
                let (m, k) = matrix(self.value(*a), "matmul")?;
                let n = self.value(*b).dim(1);
                if self.wants(*a) {
                    let da = gemm_new(
                        m,
                        n,
                        k,
                        MatRef::rows(g.data(), n),
                        MatRef::rows(self.value(*b).data(), n).t(),
                    );
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.wants(*b) {
                    let db = gemm_new(
                        k,
                        m,
                        n,
                        MatRef::rows(self.value(*a).data(), k).t(),
                        MatRef::rows(g.data(), n),
                    );
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![n], db)?);
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = matrix(self.value(*x), "slice_cols")?;
                let len = g.dim(1);
                let mut dx = vec![0.0; m * n];
                for (row, grow) in dx.chunks_mut(n).zip(g.data().chunks(len)) {
                    row[*start..start + len].copy_from_slice(grow);
                }
                self.accumulate(grads, *x, Tensor::new(vec![m, n], dx)?);
            }
            Op::Embedding { table, ids } => {
                let (v, d) = matrix(self.value(*table), "embedding")?;
                let mut dt = vec![0.0; v * d];
                for (&id, grow) in ids.iter().zip(g.data().chunks(d)) {
                    for (a, b) in dt[id * d..(id + 1) * d].iter_mut().zip(grow) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *table, Tensor::new(vec![v, d], dt)?);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let o = self.value(*w).dim(0);
                let single = ConvGeom { n: 1, ..*geom };
                let (k, plane) = (single.k(), single.p());
                let in_plane = geom.c * geom.h * geom.w;
                let g_img = |img: usize| &g.data()[img * o * plane..][..o * plane];
                let cols_img = |img: usize| &cols[img * k * plane..][..k * plane];
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; o];
                        for img in 0..geom.n {
                            for (d, row) in db.iter_mut().zip(g_img(img).chunks(plane)) {
                                *d += row.iter().sum::<f64>();
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(vec![o], db)?);
                    }
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; o * k];
                    for img in 0..geom.n {
                        gemm(
                            o,
                            plane,
                            k,
                            MatRef::rows(g_img(img), plane),
                            MatRef::rows(cols_img(img), plane).t(),
                            1.0,
                            &mut dw,
                        );
                    }
                    let dw = Tensor::new(self.value(*w).shape().to_vec(), dw)?;
                    self.accumulate(grads, *w, dw);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for img in 0..geom.n {
                        let dcols = gemm_new(
                            k,
                            o,
                            plane,
                            MatRef::rows(self.value(*w).data(), k).t(),
                            MatRef::rows(g_img(img), plane),
                        );
                        col2im(&dcols, &single, &mut dx[img * in_plane..][..in_plane]);
                    }
                    let dx = Tensor::new(self.value(*x).shape().to_vec(), dx)?;
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Pool3 { x, kind, aux } => {
                let shape = self.value(*x).shape().to_vec();
                let (h, w) = (shape[2], shape[3]);
                let mut dx = vec![0.0; self.value(*x).len()];
                match kind {
                    PoolKind::Max => {
                        for (&src, gv) in aux.iter().zip(g.data()) {
                            dx[src] += gv;
                        }
                    }
                    PoolKind::Avg => {
                        for (plane_idx, gplane) in g.data().chunks(h * w).enumerate() {
                            let base = plane_idx * h * w;
                            for y in 0..h {
                                for xx in 0..w {
                                    let o = y * w + xx;
                                    let share = gplane[o] / aux[base + o] as f64;
                                    for iy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                                        for ix in xx.saturating_sub(1)..=(xx + 1).min(w - 1) {
                                            dx[base + iy * w + ix] += share;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, dx)?);
            }
            Op::AvgPool2(x) => {
                let shape = self.value(*x).shape().to_vec();
                let (h, w) = (shape[2], shape[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; self.value(*x).len()];
                for (plane, gplane) in g.data().chunks(oh * ow).enumerate() {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let share = 0.25 * gplane[y * ow + xx];
                            let i = plane * h * w + 2 * y * w + 2 * xx;
                            dx[i] += share;
                            dx[i + 1] += share;
                            dx[i + w] += share;
                            dx[i + w + 1] += share;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, dx)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.value(*x).shape();
                let (n, c) = (shape[0], shape[1]);
                let inner = xhat.len() / (n * c);
                let gd = g.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for img in 0..n {
                    for ch in 0..c {
                        let off = (img * c + ch) * inner;
                        for i in off..off + inner {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let count = (n * inner) as f64;
                    let mut dx = vec![0.0; xhat.len()];
                    for img in 0..n {
                        for ch in 0..c {
                            let off = (img * c + ch) * inner;
                            let scale = gam[ch] * inv_std[ch];
                            for i in off..off + inner {
                                dx[i] = if *batch_stats {
                                    scale * (gd[i] - dbeta[ch] / count - xhat[i] * dgamma[ch] / count)
                                } else {
                                    scale * gd[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(shape.to_vec(), dx)?);
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta)?);
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape().to_vec();
                let plane = shape[2] * shape[3];
                let mut dx = Vec::with_capacity(self.value(*x).len());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv / plane as f64, plane));
                }
                self.accumulate(grads, *x, Tensor::new(shape, dx)?);
            }
            Op::Linear { x, w, b } => {
                let (bs, din) = matrix(self.value(*x), "linear")?;
                let dout = self.value(*w).dim(0);
                if self.wants(*x) {
                    let dx = gemm_new(
                        bs,
                        dout,
                        din,
                        MatRef::rows(g.data(), dout),
                        MatRef::rows(self.value(*w).data(), din),
                    );
                    self.accumulate(grads, *x, Tensor::new(vec![bs, din], dx)?);
                }
                if self.wants(*w) {
                    let dw = gemm_new(
                        dout,
                        bs,
                        din,
                        MatRef::rows(g.data(), dout).t(),
                        MatRef::rows(self.value(*x).data(), din),
                    );
                    self.accumulate(grads, *w, Tensor::new(vec![dout, din], dw)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; dout];
                    for row in g.data().chunks(dout) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![dout], db)?);
                }
            }
            Op::Concat(xs) => {
                let n = node.value.dim(0);
                let inner: usize = node.value.shape()[2..].iter().product();
                let total = node.value.dim(1) * inner;
                let mut offset = 0;
                for &v in xs {
                    let shape = self.value(v).shape().to_vec();
                    let block = shape[1] * inner;
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(n * block);
                        for img in 0..n {
                            dv.extend_from_slice(&g.data()[img * total + offset..][..block]);
                        }
                        self.accumulate(grads, v, Tensor::new(shape, dv)?);
                    }
                    offset += block;
                }
            }
            Op::SoftmaxXent {
                logits,
                probs,
                labels,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g.item() / b as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(vec![b, c], d)?);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let scale = 2.0 * g.item() / target.len() as f64;
                let d: Vec<f64> = p
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(a, b)| scale * (a - b))
                    .collect();
                self.accumulate(grads, *pred, Tensor::new(p.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}
