//! Operation recording and reverse-mode replay.

use std::fmt;

use crate::engine::kernels::{self, ConvGeom};
use crate::engine::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::maps::{ChangeMask, LabelMap};

/// Lower bound applied to probabilities before taking logarithms in the
/// losses; the upper bound is `1 - PROB_CLAMP`.
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance estimate, as used for running averages.
    pub var: Vec<f64>,
}

/// Backward rule of a user-defined op: given the input values, the output
/// value and the output gradient, return one optional gradient per input.
pub type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Option<Vec<T>>>>;

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        mode: UpsampleMode,
    },
    Concat(Var, Var),
    SliceChannels {
        input: Var,
        start: usize,
    },
    Softmax(Var),
    Correlation {
        f1: Var,
        f2: Var,
        max_disp: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    /// Fused softmax + cross-entropy; stores d(loss)/d(logits).
    Loss {
        logits: Var,
        dlogits: Vec<T>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::MaxPool { .. } => "max_pool2d",
            Op::Upsample { .. } => "upsample2x",
            Op::Concat(..) => "channel_concat",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Softmax(_) => "channel_softmax",
            Op::Correlation { .. } => "correlation2d",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Loss { .. } => "loss",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation. Nodes are stored in
/// creation order, which is a topological order of the graph.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.nodes.iter().map(|n| (n.op.name(), n.value.shape())))
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    sizes: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, zero-filled when unreachable from the loss.
    pub fn wrt(&self, var: Var) -> Vec<T> {
        self.get(var)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); self.sizes[var.0]])
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf value that gradients are tracked for.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Record a leaf value treated as a constant by `backward`.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad(*v))
    }

    fn dims4(&self, var: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        self.value(var).dims4(op)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, cin, h, w) = self.dims4(input, OP)?;
        let (cout, wcin, kh, kw) = self.dims4(weight, OP)?;
        if wcin != cin {
            return Err(Error::shape(
                OP,
                format!("input {:?} has {cin} channels but weight {:?} expects {wcin}", self.shape(input), self.shape(weight)),
            ));
        }
        if kh == 0 || kw == 0 || stride == 0 {
            return Err(Error::invalid(OP, "kernel extents and stride must be >= 1"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                OP,
                format!("padded input {}x{} smaller than kernel {kh}x{kw}", h + 2 * padding, w + 2 * padding),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape(OP, format!("bias {:?} for {cout} output channels", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.any_grad(&[input, weight]) || bias.is_some_and(|b| self.requires_grad(b));
        let value = Tensor::new(vec![n, cout, geom.ho, geom.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.requires_grad(input);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn max_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        const OP: &str = "max_pool2d";
        let dims @ (n, c, h, w) = self.dims4(input, OP)?;
        if k == 0 || stride == 0 {
            return Err(Error::invalid(OP, "window and stride must be >= 1"));
        }
        if k > h || k > w {
            return Err(Error::shape(OP, format!("window {k} larger than input {h}x{w}")));
        }
        let (out, argmax, ho, wo) = kernels::max_pool_forward(self.value(input).data(), dims, k, stride);
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg))
    }

    pub fn upsample2x(&mut self, input: Var, mode: UpsampleMode) -> Result<Var> {
        const OP: &str = "upsample2x";
        let (n, c, h, w) = self.dims4(input, OP)?;
        if h == 0 || w == 0 {
            return Err(Error::shape(OP, "empty spatial extent"));
        }
        let x = self.value(input).data();
        let out = match mode {
            UpsampleMode::Nearest => kernels::upsample_nearest_forward(x, n * c, h, w),
            UpsampleMode::Bilinear => kernels::upsample_bilinear_forward(x, n * c, h, w),
        };
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::Upsample { input, mode }, rg))
    }

    /// Concatenate along the channel axis: channels of `a`, then of `b`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "channel_concat";
        let (n, ca, h, w) = self.dims4(a, OP)?;
        let (nb, cb, hb, wb) = self.dims4(b, OP)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(
                OP,
                format!("{:?} and {:?} differ outside the channel axis", self.shape(a), self.shape(b)),
            ));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        for s in 0..n {
            out.extend_from_slice(&xa[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&xb[s * cb * hw..(s + 1) * cb * hw]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// Channels `start..start+len` of a rank-4 tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        const OP: &str = "slice_channels";
        let (n, c, h, w) = self.dims4(input, OP)?;
        if start + len > c {
            return Err(Error::shape(OP, format!("channels {start}..{} of {c}", start + len)));
        }
        let hw = h * w;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            out.extend_from_slice(&x[(s * c + start) * hw..(s * c + start + len) * hw]);
        }
        let value = Tensor::new(vec![n, len, h, w], out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::SliceChannels { input, start }, rg))
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "channel_softmax";
        let (n, c, h, w) = self.dims4(input, OP)?;
        if c < 2 {
            return Err(Error::shape(OP, format!("needs at least 2 channels, got {c}")));
        }
        let out = kernels::softmax_channels(self.value(input).data(), n, c, h * w);
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::Softmax(input), rg))
    }

    /// Cost volume between two feature maps over a square window of
    /// displacements; see [`kernels::displacements`] for channel order.
    pub fn correlation(&mut self, f1: Var, f2: Var, max_disp: usize) -> Result<Var> {
        const OP: &str = "correlation2d";
        let dims @ (n, _, h, w) = self.dims4(f1, OP)?;
        if self.shape(f1) != self.shape(f2) {
            return Err(Error::shape(OP, format!("{:?} vs {:?}", self.shape(f1), self.shape(f2))));
        }
        let out = kernels::correlation_forward(self.value(f1).data(), self.value(f2).data(), dims, max_disp);
        let nd = (2 * max_disp + 1).pow(2);
        let value = Tensor::new(vec![n, nd, h, w], out)?;
        let rg = self.any_grad(&[f1, f2]);
        Ok(self.push(value, Op::Correlation { f1, f2, max_disp }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let x = self.value(input);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v * factor).collect()).expect("same shape");
        let rg = self.requires_grad(input);
        self.push(value, Op::Scale(input, factor), rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().copied().sum();
        let rg = self.requires_grad(input);
        self.push(Tensor::scalar(total), Op::Sum(input), rg)
    }

    fn check_bn_params(&self, input: Var, params: &[Var]) -> Result<(usize, usize, usize)> {
        const OP: &str = "batch_norm";
        let (n, c, h, w) = self.dims4(input, OP)?;
        for &p in params {
            if self.shape(p) != [c] {
                return Err(Error::shape(OP, format!("parameter {:?} for {c} channels", self.shape(p))));
            }
        }
        Ok((n, c, h * w))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(&mut self, input: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64, batch_stats: bool) -> Result<Var> {
        let (n, c, hw) = self.check_bn_params(input, &[gamma, beta])?;
        let x = self.value(input).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let inv_std: Vec<T> = var.iter().map(|&v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                let m = T::from_f64(mean[ch]);
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (x[i] - m) * inv_std[ch];
                    out[i] = xhat[i] * g[ch] + b[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// Batch normalization with statistics of the current batch.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, hw) = self.check_bn_params(input, &[gamma, beta])?;
        let x = self.value(input).data();
        let count = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for s in 0..n {
                let base = (s * c + ch) * hw;
                acc += x[base..base + hw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            mean[ch] = acc / count;
            let mut sq = 0.0;
            for s in 0..n {
                let base = (s * c + ch) * hw;
                sq += x[base..base + hw].iter().map(|v| (v.as_f64() - mean[ch]).powi(2)).sum::<f64>();
            }
            var[ch] = sq / count;
        }
        let unbiased = var.iter().map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v }).collect();
        let out = self.bn_apply(input, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, input: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (_, c, _) = self.check_bn_params(input, &[gamma, beta])?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", format!("running stats for {} channels, input has {c}", mean.len())));
        }
        self.bn_apply(input, gamma, beta, mean, var, eps, false)
    }

    fn loss_value(&mut self, logits: Var, total: f64, mut dlogits: Vec<T>, pixels: usize, reduction: Reduction) -> Var {
        let (total, factor) = match reduction {
            Reduction::Sum => (total, 1.0),
            Reduction::Mean => (total / pixels.max(1) as f64, 1.0 / pixels.max(1) as f64),
        };
        if factor != 1.0 {
            let f = T::from_f64(factor);
            dlogits.iter_mut().for_each(|d| *d *= f);
        }
        let rg = self.requires_grad(logits);
        self.push(Tensor::scalar(T::from_f64(total)), Op::Loss { logits, dlogits }, rg)
    }

    /// Pixel-wise binary cross-entropy on 2-channel logits: channel 1 after a
    /// per-pixel softmax is the change probability. One mask per batch item.
    pub fn bce_change_loss(&mut self, logits: Var, targets: &[ChangeMask], reduction: Reduction) -> Result<Var> {
        const OP: &str = "bce_change_loss";
        let (n, c, h, w) = self.dims4(logits, OP)?;
        if c != 2 {
            return Err(Error::shape(OP, format!("expected 2 logit channels, got {c}")));
        }
        if targets.len() != n {
            return Err(Error::shape(OP, format!("{} masks for batch of {n}", targets.len())));
        }
        if let Some(t) = targets.iter().find(|t| t.width() != w || t.height() != h) {
            return Err(Error::shape(OP, format!("mask {}x{} vs logits {w}x{h}", t.width(), t.height())));
        }
        let hw = h * w;
        let x = self.value(logits).data();
        let mut dl = vec![T::zero(); x.len()];
        let mut total = 0.0f64;
        for (s, t) in targets.iter().enumerate() {
            for p in 0..hw {
                let i0 = s * 2 * hw + p;
                let i1 = i0 + hw;
                let (l0, l1) = (x[i0].as_f64(), x[i1].as_f64());
                let m = l0.max(l1);
                let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
                let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
                let changed = t.data()[p] != 0;
                let p_true = if changed { p1 } else { p0 };
                let clamped = p_true.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                total -= clamped.ln();
                if clamped == p_true {
                    let (t0, t1) = if changed { (0.0, 1.0) } else { (1.0, 0.0) };
                    dl[i0] = T::from_f64(p0 - t0);
                    dl[i1] = T::from_f64(p1 - t1);
                }
            }
        }
        Ok(self.loss_value(logits, total, dl, n * hw, reduction))
    }

    /// Pixel-wise cross-entropy on `2K` logit channels split into two
    /// `K`-channel halves, scored against one label map per half.
    pub fn split_semantic_loss(&mut self, logits: Var, first: &[LabelMap], second: &[LabelMap], reduction: Reduction) -> Result<Var> {
        const OP: &str = "split_semantic_loss";
        let (n, c2, h, w) = self.dims4(logits, OP)?;
        if c2 < 4 || c2 % 2 != 0 {
            return Err(Error::shape(OP, format!("expected 2K logit channels with K >= 2, got {c2}")));
        }
        let k = c2 / 2;
        if first.len() != n || second.len() != n {
            return Err(Error::shape(OP, format!("{}/{} label maps for batch of {n}", first.len(), second.len())));
        }
        for t in first.iter().chain(second) {
            if !t.same_size(w, h) {
                return Err(Error::shape(OP, format!("labels {}x{} vs logits {w}x{h}", t.width(), t.height())));
            }
        }
        let hw = h * w;
        for (s, (a, b)) in first.iter().zip(second).enumerate() {
            for t in [a, b] {
                if let Some(p) = t.data().iter().position(|&v| v as usize >= k) {
                    return Err(Error::ClassOutOfRange {
                        class: t.data()[p],
                        num_classes: k,
                        n: s,
                        y: p / w,
                        x: p % w,
                    });
                }
            }
        }
        let x = self.value(logits).data();
        let mut dl = vec![T::zero(); x.len()];
        let mut total = 0.0f64;
        let mut probs = vec![0.0f64; k];
        for s in 0..n {
            for (half, labels) in [&first[s], &second[s]].into_iter().enumerate() {
                let base = (s * c2 + half * k) * hw;
                for p in 0..hw {
                    let mut m = f64::NEG_INFINITY;
                    for ch in 0..k {
                        m = m.max(x[base + ch * hw + p].as_f64());
                    }
                    let mut z = 0.0;
                    for (ch, pr) in probs.iter_mut().enumerate() {
                        *pr = (x[base + ch * hw + p].as_f64() - m).exp();
                        z += *pr;
                    }
                    probs.iter_mut().for_each(|pr| *pr /= z);
                    let target = labels.data()[p] as usize;
                    let p_true = probs[target];
                    let clamped = p_true.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                    total -= clamped.ln();
                    if clamped == p_true {
                        for (ch, &pr) in probs.iter().enumerate() {
                            let onehot = if ch == target { 1.0 } else { 0.0 };
                            dl[base + ch * hw + p] = T::from_f64(pr - onehot);
                        }
                    }
                }
            }
        }
        Ok(self.loss_value(logits, total, dl, 2 * n * hw, reduction))
    }

    /// Record an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: CustomBackward<T>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    /// Reverse-mode replay from a scalar `loss`. The tape is left intact, so
    /// repeated calls produce identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, grad) in self.backward_node(node, &g) {
                if self.requires_grad(input) {
                    accumulate(&mut grads[input.0], grad);
                }
            }
        }
        Ok(Gradients {
            grads,
            sizes: self.nodes.iter().map(|n| n.value.numel()).collect(),
        })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let rg = |v: Var| self.requires_grad(v);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = (rg(*input), rg(*weight), bias.is_some_and(rg));
                let cg = kernels::conv2d_backward(self.value(*input).data(), self.value(*weight).data(), g, geom, need);
                out.extend(cg.input.map(|d| (*input, d)));
                out.extend(cg.weight.map(|d| (*weight, d)));
                if let (Some(b), Some(d)) = (bias, cg.bias) {
                    out.push((*b, d));
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let d = x.iter().zip(g).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect();
                out.push((*input, d));
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![T::zero(); self.value(*input).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
                out.push((*input, d));
            }
            Op::Upsample { input, mode } => {
                let (n, c, h, w) = self.value(*input).dims4("upsample2x").expect("validated in forward");
                let d = match mode {
                    UpsampleMode::Nearest => kernels::upsample_nearest_backward(g, n * c, h, w),
                    UpsampleMode::Bilinear => kernels::upsample_bilinear_backward(g, n * c, h, w),
                };
                out.push((*input, d));
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4("channel_concat").expect("validated in forward");
                let cb = self.shape(*b)[1];
                let hw = h * w;
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut db = Vec::with_capacity(n * cb * hw);
                for s in 0..n {
                    let base = s * (ca + cb) * hw;
                    da.extend_from_slice(&g[base..base + ca * hw]);
                    db.extend_from_slice(&g[base + ca * hw..base + (ca + cb) * hw]);
                }
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::SliceChannels { input, start } => {
                let (n, c, h, w) = self.value(*input).dims4("slice_channels").expect("validated in forward");
                let len = node.value.shape()[1];
                let hw = h * w;
                let mut d = vec![T::zero(); n * c * hw];
                for s in 0..n {
                    d[(s * c + start) * hw..(s * c + start + len) * hw].copy_from_slice(&g[s * len * hw..(s + 1) * len * hw]);
                }
                out.push((*input, d));
            }
            Op::Softmax(input) => {
                let (n, c, h, w) = node.value.dims4("channel_softmax").expect("validated in forward");
                out.push((*input, kernels::softmax_channels_backward(node.value.data(), g, n, c, h * w)));
            }
            Op::Correlation { f1, f2, max_disp } => {
                let dims = self.value(*f1).dims4("correlation2d").expect("validated in forward");
                let (d1, d2) = kernels::correlation_backward(
                    self.value(*f1).data(),
                    self.value(*f2).data(),
                    g,
                    dims,
                    *max_disp,
                    (rg(*f1), rg(*f2)),
                );
                out.extend(d1.map(|d| (*f1, d)));
                out.extend(d2.map(|d| (*f2, d)));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, g.iter().zip(xb).map(|(&gv, &v)| gv * v).collect()));
                out.push((*b, g.iter().zip(xa).map(|(&gv, &v)| gv * v).collect()));
            }
            Op::Scale(input, factor) => {
                out.push((*input, g.iter().map(|&gv| gv * *factor).collect()));
            }
            Op::Sum(input) => {
                out.push((*input, vec![g[0]; self.value(*input).numel()]));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = self.value(*input).dims4("batch_norm").expect("validated in forward");
                let hw = h * w;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if rg(*input) {
                    let mut dx = vec![T::zero(); g.len()];
                    let count = T::from_f64((n * hw) as f64);
                    for ch in 0..c {
                        let scale = gam[ch] * inv_std[ch];
                        for s in 0..n {
                            let base = (s * c + ch) * hw;
                            for i in base..base + hw {
                                dx[i] = if *batch_stats {
                                    scale * (g[i] - dbeta[ch] / count - xhat[i] * dgamma[ch] / count)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Loss { logits, dlogits } => {
                out.push((*logits, dlogits.iter().map(|&d| d * g[0]).collect()));
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                for (v, d) in inputs.iter().zip(backward(&vals, &node.value, g)) {
                    if let Some(d) = d {
                        out.push((*v, d));
                    }
                }
            }
        }
        out
    }
}
