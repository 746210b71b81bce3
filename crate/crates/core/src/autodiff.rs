//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations are recorded in execution order while the forward pass runs.
//! [`Tape::backward`] replays them in exact reverse order. Parameters are
//! borrowed rather than copied, so a tape lives for one training step and is
//! dropped before the optimizer mutates the parameters.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::gemm::{gemm, Layout};
use crate::tensor::Tensor;

/// Variance floor added inside batch normalization.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in the batch-norm update.
pub const BN_MOMENTUM: f64 = 0.99;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How a batch-norm node obtains its normalization statistics.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'s> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'s [f64], var: &'s [f64] },
}

/// Per-feature mean and (biased) variance of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStats {
    /// Exponential moving average update of running statistics.
    pub fn fold_into(&self, running_mean: &mut [f64], running_var: &mut [f64]) {
        for (r, &m) in running_mean.iter_mut().zip(&self.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, &v) in running_var.iter_mut().zip(&self.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    filters: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Copy, Debug)]
struct FeatureGeom {
    batch: usize,
    channels: usize,
    spatial: usize,
}

impl FeatureGeom {
    fn of(dims: &[usize]) -> Self {
        FeatureGeom {
            batch: dims[0],
            channels: dims[1],
            spatial: dims[2..].iter().product(),
        }
    }

    fn index(&self, b: usize, c: usize, s: usize) -> usize {
        (b * self.channels + c) * self.spatial + s
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddBias { x: Var, bias: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Tanh { x: Var },
    Relu { x: Var },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
        geom: FeatureGeom,
    },
    Mse { pred: Var, target: Var },
    Reshape { x: Var },
    Sum { x: Var },
    Add { a: Var, b: Var },
    SoftmaxCrossEntropy { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
}

struct Node<'a> {
    dims: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation for a single forward/backward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (acc, c) in g.iter_mut().zip(contrib) {
                *acc += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (h, w, kh, kw) = (g.height, g.width, g.kh, g.kw);
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let hw = g.pixels();
    for c in 0..g.in_ch {
        let plane = &x[c * hw..(c + 1) * hw];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut cols[((c * kh + ki) * kw + kj) * hw..][..hw];
                let ox_lo = pw.saturating_sub(kj);
                let ox_hi = (w + pw).saturating_sub(kj).min(w);
                for oy in 0..h {
                    let out = &mut row[oy * w..(oy + 1) * w];
                    let iy = oy + ki;
                    if iy < ph || iy - ph >= h || ox_lo >= ox_hi {
                        out.fill(0.0);
                        continue;
                    }
                    let iy = iy - ph;
                    out[..ox_lo].fill(0.0);
                    out[ox_hi..].fill(0.0);
                    let src = &plane[iy * w + ox_lo + kj - pw..][..ox_hi - ox_lo];
                    out[ox_lo..ox_hi].copy_from_slice(src);
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (h, w, kh, kw) = (g.height, g.width, g.kh, g.kw);
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let hw = g.pixels();
    for c in 0..g.in_ch {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &cols[((c * kh + ki) * kw + kj) * hw..][..hw];
                let ox_lo = pw.saturating_sub(kj);
                let ox_hi = (w + pw).saturating_sub(kj).min(w);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..h {
                    let iy = oy + ki;
                    if iy < ph || iy - ph >= h {
                        continue;
                    }
                    let iy = iy - ph;
                    let dst = &mut plane[iy * w + ox_lo + kj - pw..][..ox_hi - ox_lo];
                    for (d, s) in dst.iter_mut().zip(&row[oy * w + ox_lo..oy * w + ox_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, dims: Vec<usize>, value: Cow<'a, [f64]>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            dims,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    /// Registers a borrowed trainable tensor.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(t.dims().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, true)
    }

    /// Registers a borrowed tensor that receives no gradient.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.push(t.dims().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, false)
    }

    /// Registers an owned leaf.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let dims = t.dims().to_vec();
        self.push(dims, Cow::Owned(t.into_data()), Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.node(v).dims
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.dims.clone(), n.value.to_vec()).expect("tape nodes keep consistent shapes")
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(shape_err("matmul", da, db));
        }
        let (m, k, n) = (da[0], da[1], db[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), Layout::Normal, self.value(b), Layout::Normal, &mut out, false);
        let needs = self.grad_flag(&[a, b]);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul { a, b, m, k, n }, needs))
    }

    /// Adds a per-column bias to a `B x F` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (dx, dbias) = (self.dims(x), self.dims(bias));
        let features: usize = dbias.iter().product();
        if dx.len() != 2 || dx[1] != features {
            return Err(shape_err("add_bias", dx, dbias));
        }
        let dims = dx.to_vec();
        let bv = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .chunks(features)
            .flat_map(|row| row.iter().zip(bv).map(|(v, b)| v + b))
            .collect();
        let needs = self.grad_flag(&[x, bias]);
        Ok(self.push(dims, Cow::Owned(out), Op::AddBias { x, bias }, needs))
    }

    /// Stride-1 "same" cross-correlation of `B x C x H x W` input with
    /// `F x C x kh x kw` filters plus a per-filter bias. Kernels must have odd
    /// extents; the input is zero padded by `(k - 1) / 2` on each side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (dx, dw, db) = (self.dims(x), self.dims(w), self.dims(b));
        if dx.len() != 4 || dw.len() != 4 || dw[1] != dx[1] {
            return Err(shape_err("conv2d", dx, dw));
        }
        if dw[2] % 2 == 0 || dw[3] % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv2d: kernel extents must be odd, got {}x{}",
                dw[2], dw[3]
            )));
        }
        if db.iter().product::<usize>() != dw[0] {
            return Err(shape_err("conv2d bias", dw, db));
        }
        let geom = ConvGeom {
            batch: dx[0],
            in_ch: dx[1],
            height: dx[2],
            width: dx[3],
            filters: dw[0],
            kh: dw[2],
            kw: dw[3],
        };
        let (hw, patch) = (geom.pixels(), geom.patch_len());
        let in_len = geom.in_ch * hw;
        let out_len = geom.filters * hw;
        let mut out = vec![0.0; geom.batch * out_len];
        let mut cols = vec![0.0; patch * hw];
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        for s in 0..geom.batch {
            im2col(&xv[s * in_len..(s + 1) * in_len], &geom, &mut cols);
            let out_s = &mut out[s * out_len..(s + 1) * out_len];
            gemm(geom.filters, patch, hw, wv, Layout::Normal, &cols, Layout::Normal, out_s, false);
            for (f, row) in out_s.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v += bv[f]);
            }
        }
        let needs = self.grad_flag(&[x, w, b]);
        let dims = vec![geom.batch, geom.filters, geom.height, geom.width];
        Ok(self.push(dims, Cow::Owned(out), Op::Conv2d { x, w, b, geom }, needs))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v.tanh()).collect();
        let dims = self.dims(x).to_vec();
        let needs = self.grad_flag(&[x]);
        self.push(dims, Cow::Owned(out), Op::Tanh { x }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let dims = self.dims(x).to_vec();
        let needs = self.grad_flag(&[x]);
        self.push(dims, Cow::Owned(out), Op::Relu { x }, needs)
    }

    /// Batch normalization over axis 1 (features of a `B x F` matrix or
    /// channels of a `B x C x H x W` map). Train mode also returns the batch
    /// statistics so the caller can fold them into its running averages.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let dx = self.dims(x);
        if dx.len() < 2 {
            return Err(shape_err("batchnorm", dx, self.dims(gamma)));
        }
        let geom = FeatureGeom::of(dx);
        let c = geom.channels;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err("batchnorm", dx, self.dims(gamma)));
        }
        let xv = self.value(x);
        let (mean, var, train) = match mode {
            BatchNormMode::Train => {
                if geom.batch < 2 {
                    return Err(Error::invalid(
                        "batchnorm: train mode needs a batch of at least 2",
                    ));
                }
                let count = (geom.batch * geom.spatial) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (ch, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                    let mut sum = 0.0;
                    for b in 0..geom.batch {
                        for s in 0..geom.spatial {
                            sum += xv[geom.index(b, ch, s)];
                        }
                    }
                    *m = sum / count;
                    let mut sq = 0.0;
                    for b in 0..geom.batch {
                        for s in 0..geom.spatial {
                            let d = xv[geom.index(b, ch, s)] - *m;
                            sq += d * d;
                        }
                    }
                    *v = sq / count;
                }
                (mean, var, true)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batchnorm", dx, &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..geom.batch {
            for ch in 0..c {
                for s in 0..geom.spatial {
                    let i = geom.index(b, ch, s);
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let dims = dx.to_vec();
        let needs = self.grad_flag(&[x, gamma, beta]);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
            geom,
        };
        let var_out = self.push(dims, Cow::Owned(out), op, needs);
        let stats = train.then_some(BatchStats { mean, var });
        Ok((var_out, stats))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (dp, dt) = (self.dims(pred), self.dims(target));
        if dp != dt {
            return Err(shape_err("mse", dp, dt));
        }
        let (p, t) = (self.value(pred), self.value(target));
        let mut acc = 0.0;
        for (a, b) in p.iter().zip(t) {
            let d = a - b;
            acc += d * d;
        }
        let loss = acc / p.len() as f64;
        let needs = self.grad_flag(&[pred, target]);
        Ok(self.push(vec![1], Cow::Owned(vec![loss]), Op::Mse { pred, target }, needs))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let dx = self.dims(x);
        if dims.iter().product::<usize>() != self.value(x).len() || dims.iter().any(|&d| d == 0) {
            return Err(shape_err("reshape", dx, dims));
        }
        let value = self.value(x).to_vec();
        let needs = self.grad_flag(&[x]);
        Ok(self.push(dims.to_vec(), Cow::Owned(value), Op::Reshape { x }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        let needs = self.grad_flag(&[x]);
        self.push(vec![1], Cow::Owned(vec![total]), Op::Sum { x }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(shape_err("add", da, db));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let dims = da.to_vec();
        let needs = self.grad_flag(&[a, b]);
        Ok(self.push(dims, Cow::Owned(out), Op::Add { a, b }, needs))
    }

    /// Mean negative log-likelihood of `labels` under a row-wise softmax of
    /// `B x K` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let dl = self.dims(logits);
        if dl.len() != 2 || dl[0] != labels.len() {
            return Err(shape_err("softmax_cross_entropy", dl, &[labels.len()]));
        }
        let k = dl[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax_rows(self.value(logits), k);
        let mut nll = 0.0;
        for (row, &label) in probs.chunks(k).zip(labels) {
            nll -= row[label].max(f64::MIN_POSITIVE).ln();
        }
        let loss = nll / labels.len() as f64;
        let needs = self.grad_flag(&[logits]);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.push(vec![1], Cow::Owned(vec![loss]), op, needs))
    }

    /// Populates gradients of `loss` with respect to every leaf that requires
    /// them. Leaves unreachable from `loss` get no entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss);
        if root.value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got dims {:?}",
                root.dims
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, g, idx, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    fn backward_node(&self, node: &Node<'a>, g: Vec<f64>, idx: usize, grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => grads[idx] = Some(g),
            &Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, &g, Layout::Normal, self.value(b), Layout::Transposed, &mut da, false);
                    accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(a), Layout::Transposed, &g, Layout::Normal, &mut db, false);
                    accumulate(grads, b, db);
                }
            }
            &Op::AddBias { x, bias } => {
                if self.wants(bias) {
                    let f = self.value(bias).len();
                    let mut db = vec![0.0; f];
                    for row in g.chunks(f) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, bias, db);
                }
                if self.wants(x) {
                    accumulate(grads, x, g);
                }
            }
            &Op::Conv2d { x, w, b, geom } => self.conv2d_backward(x, w, b, &geom, &g, grads),
            &Op::Tanh { x } => {
                if self.wants(x) {
                    let dx = g.iter().zip(node.value.iter()).map(|(d, y)| d * (1.0 - y * y)).collect();
                    accumulate(grads, x, dx);
                }
            }
            &Op::Relu { x } => {
                if self.wants(x) {
                    let dx = g
                        .iter()
                        .zip(node.value.iter())
                        .map(|(&d, &y)| if y > 0.0 { d } else { 0.0 })
                        .collect();
                    accumulate(grads, x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                geom,
            } => self.batchnorm_backward(*x, *gamma, *beta, xhat, inv_std, *train, geom, &g, grads),
            &Op::Mse { pred, target } => {
                let (p, t) = (self.value(pred), self.value(target));
                let scale = 2.0 * g[0] / p.len() as f64;
                let dp: Vec<f64> = p.iter().zip(t).map(|(a, b)| scale * (a - b)).collect();
                if self.wants(target) {
                    accumulate(grads, target, dp.iter().map(|v| -v).collect());
                }
                if self.wants(pred) {
                    accumulate(grads, pred, dp);
                }
            }
            &Op::Reshape { x } => {
                if self.wants(x) {
                    accumulate(grads, x, g);
                }
            }
            &Op::Sum { x } => {
                if self.wants(x) {
                    accumulate(grads, x, vec![g[0]; self.value(x).len()]);
                }
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.wants(b) {
                    accumulate(grads, b, g);
                }
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                if self.wants(*logits) {
                    let k = probs.len() / labels.len();
                    let scale = g[0] / labels.len() as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (row, &label) in d.chunks_mut(k).zip(labels) {
                        row[label] -= scale;
                    }
                    accumulate(grads, *logits, d);
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        geom: &ConvGeom,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (hw, patch) = (geom.pixels(), geom.patch_len());
        let in_len = geom.in_ch * hw;
        let out_len = geom.filters * hw;
        if self.wants(b) {
            let mut db = vec![0.0; geom.filters];
            for s in 0..geom.batch {
                for (f, row) in g[s * out_len..(s + 1) * out_len].chunks(hw).enumerate() {
                    db[f] += row.iter().sum::<f64>();
                }
            }
            accumulate(grads, b, db);
        }
        let (want_w, want_x) = (self.wants(w), self.wants(x));
        if !want_w && !want_x {
            return;
        }
        let (xv, wv) = (self.value(x), self.value(w));
        let mut dw = vec![0.0; if want_w { geom.filters * patch } else { 0 }];
        let mut dx = vec![0.0; if want_x { xv.len() } else { 0 }];
        let mut cols = vec![0.0; patch * hw];
        for s in 0..geom.batch {
            let g_s = &g[s * out_len..(s + 1) * out_len];
            if want_w {
                im2col(&xv[s * in_len..(s + 1) * in_len], geom, &mut cols);
                gemm(geom.filters, hw, patch, g_s, Layout::Normal, &cols, Layout::Transposed, &mut dw, true);
            }
            if want_x {
                gemm(patch, geom.filters, hw, wv, Layout::Transposed, g_s, Layout::Normal, &mut cols, false);
                col2im_add(&cols, geom, &mut dx[s * in_len..(s + 1) * in_len]);
            }
        }
        if want_w {
            accumulate(grads, w, dw);
        }
        if want_x {
            accumulate(grads, x, dx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batchnorm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[f64],
        inv_std: &[f64],
        train: bool,
        geom: &FeatureGeom,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let c = geom.channels;
        let gv = self.value(gamma);
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for b in 0..geom.batch {
            for ch in 0..c {
                for s in 0..geom.spatial {
                    let i = geom.index(b, ch, s);
                    dgamma[ch] += g[i] * xhat[i];
                    dbeta[ch] += g[i];
                }
            }
        }
        if self.wants(x) {
            let mut dx = vec![0.0; g.len()];
            if train {
                // dx = inv_std / M * (M * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
                let count = (geom.batch * geom.spatial) as f64;
                for ch in 0..c {
                    // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                    let sum_d = gv[ch] * dbeta[ch];
                    let sum_dx = gv[ch] * dgamma[ch];
                    let scale = inv_std[ch] / count;
                    for b in 0..geom.batch {
                        for s in 0..geom.spatial {
                            let i = geom.index(b, ch, s);
                            let dxhat = g[i] * gv[ch];
                            dx[i] = scale * (count * dxhat - sum_d - xhat[i] * sum_dx);
                        }
                    }
                }
            } else {
                for b in 0..geom.batch {
                    for ch in 0..c {
                        for s in 0..geom.spatial {
                            let i = geom.index(b, ch, s);
                            dx[i] = g[i] * gv[ch] * inv_std[ch];
                        }
                    }
                }
            }
            accumulate(grads, x, dx);
        }
        if self.wants(gamma) {
            accumulate(grads, gamma, dgamma);
        }
        if self.wants(beta) {
            accumulate(grads, beta, dbeta);
        }
    }
}

/// Numerically stable row-wise softmax of a `rows x k` matrix.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    out
}
