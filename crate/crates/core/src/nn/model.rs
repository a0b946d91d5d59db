use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::engine::{BatchStats, Gradients, ParamStore, Tape, Tensor, UpsampleMode, Var};
use crate::error::{Error, Result};
use crate::nn::config::{Architecture, ModelKind};
use crate::nn::layout::{ConvLayer, Layout};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether batch norm uses batch statistics (and reports them) or the
/// stored running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A network and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Architecture,
    layout: Layout,
    params: ParamStore<f32>,
}

impl Model {
    /// Build with Kaiming-normal (fan-in) weights drawn from `seed`; biases
    /// and batch-norm shifts start at zero, scales at one.
    pub fn build(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for layer in layout.layers() {
            let fan_in = layer.in_channels * layer.kernel * layer.kernel;
            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
            let w = Tensor::from_fn(&layer.weight_shape(), |_| normal.sample(&mut rng));
            params.insert(layer.weight_name(), w, true)?;
            if layer.bias {
                params.insert(layer.bias_name(), Tensor::zeros(&[layer.out_channels]), true)?;
            }
            if layer.batchnorm {
                let c = layer.out_channels;
                params.insert(layer.bn_name("gamma"), Tensor::full(&[c], 1.0), true)?;
                params.insert(layer.bn_name("beta"), Tensor::zeros(&[c]), true)?;
                params.insert(layer.bn_name("running_mean"), Tensor::zeros(&[c]), false)?;
                params.insert(layer.bn_name("running_var"), Tensor::full(&[c], 1.0), false)?;
            }
        }
        Ok(Model { arch, layout, params })
    }

    pub fn kind(&self) -> ModelKind {
        self.arch.kind()
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn session(&self, mode: Mode) -> Session<'_> {
        Session::new(self, mode)
    }

    /// Fold batch statistics from a training forward pass into the running
    /// averages.
    pub fn apply_batch_stats(&mut self, updates: &[(String, BatchStats)]) -> Result<()> {
        for (layer, stats) in updates {
            for (field, values) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let name = format!("{layer}.bn.{field}");
                let p = self
                    .params
                    .get_mut(&name)
                    .ok_or_else(|| Error::Config(format!("no buffer `{name}`")))?;
                for (r, &v) in p.tensor.data_mut().iter_mut().zip(values) {
                    *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * v) as f32;
                }
            }
        }
        Ok(())
    }

    fn check_kind(&self, expected: ModelKind) -> Result<()> {
        if self.kind() != expected {
            return Err(Error::CheckpointMismatch {
                expected: expected.to_string(),
                found: self.kind().to_string(),
            });
        }
        Ok(())
    }

    /// Eval-mode change logits `[N, 2, H, W]`.
    pub fn predict_change(&self, i1: &Tensor, i2: &Tensor) -> Result<Tensor> {
        let mut s = self.session(Mode::Eval);
        let out = s.forward_change(i1, i2)?;
        Ok(s.tape.value(out).clone())
    }

    /// Eval-mode semantic logits for both time points, `[N, K, H, W]` each.
    pub fn predict_semantic(&self, i1: &Tensor, i2: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut s = self.session(Mode::Eval);
        let out = s.forward_semantic(i1, i2, mask)?;
        Ok((s.tape.value(out.first).clone(), s.tape.value(out.second).clone()))
    }

    pub fn predict_semantic_direct(&self, i1: &Tensor, i2: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut s = self.session(Mode::Eval);
        let out = s.forward_semantic_direct(i1, i2)?;
        Ok((s.tape.value(out.first).clone(), s.tape.value(out.second).clone()))
    }
}

/// The `2K` output of a semantic head and its two `K`-channel halves
/// (first half: earlier time point).
#[derive(Clone, Copy, Debug)]
pub struct SplitLogits {
    pub joint: Var,
    pub first: Var,
    pub second: Var,
}

/// A model bound to a fresh tape for one forward (and optional backward)
/// pass. The model is only read; parameter updates happen afterwards.
pub struct Session<'m> {
    model: &'m Model,
    pub tape: Tape<f32>,
    vars: Vec<Option<Var>>,
    mode: Mode,
    batch_stats: Vec<(String, BatchStats)>,
}

impl<'m> Session<'m> {
    fn new(model: &'m Model, mode: Mode) -> Self {
        let mut tape = Tape::new();
        let vars = model
            .params
            .iter()
            .map(|p| match (p.trainable, mode) {
                (false, _) => None,
                (true, Mode::Train) => Some(tape.variable(p.tensor.clone())),
                (true, Mode::Eval) => Some(tape.constant(p.tensor.clone())),
            })
            .collect();
        Session {
            model,
            tape,
            vars,
            mode,
            batch_stats: Vec::new(),
        }
    }

    /// Tape variable of a trainable parameter.
    pub fn param(&self, name: &str) -> Result<Var> {
        self.model
            .params
            .position(name)
            .and_then(|i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("no trainable parameter `{name}`")))
    }

    /// Gradients for every store entry, in store order (empty for buffers).
    pub fn param_grads(&self, grads: &Gradients<f32>) -> Vec<Vec<f32>> {
        self.vars.iter().map(|v| v.map(|v| grads.wrt(v)).unwrap_or_default()).collect()
    }

    /// Batch statistics recorded by training-mode batch norms, keyed by layer.
    pub fn take_batch_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.batch_stats)
    }

    fn buffer(&self, name: &str) -> Result<Vec<f64>> {
        let p = self
            .model
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("no buffer `{name}`")))?;
        Ok(p.tensor.data().iter().map(|&v| v as f64).collect())
    }

    fn conv(&mut self, x: Var, layer: &ConvLayer, relu: bool) -> Result<Var> {
        let w = self.param(&layer.weight_name())?;
        let b = if layer.bias { Some(self.param(&layer.bias_name())?) } else { None };
        let mut y = self.tape.conv2d(x, w, b, layer.stride, layer.padding)?;
        if layer.batchnorm {
            let gamma = self.param(&layer.bn_name("gamma"))?;
            let beta = self.param(&layer.bn_name("beta"))?;
            y = match self.mode {
                Mode::Train => {
                    let (y, stats) = self.tape.batch_norm_train(y, gamma, beta, BN_EPS)?;
                    self.batch_stats.push((layer.name.clone(), stats));
                    y
                }
                Mode::Eval => {
                    let mean = self.buffer(&layer.bn_name("running_mean"))?;
                    let var = self.buffer(&layer.bn_name("running_var"))?;
                    self.tape.batch_norm_eval(y, gamma, beta, &mean, &var, BN_EPS)?
                }
            };
        }
        Ok(if relu { self.tape.relu(y) } else { y })
    }

    /// Encoder features: index 0 is the full-resolution stem output, index
    /// `s + 1` the output of stage `s`.
    fn encode(&mut self, x: Var) -> Result<Vec<Var>> {
        let enc = &self.model.layout.encoder;
        let stem = self.conv(x, &enc.stem, true)?;
        let mut feats = vec![stem];
        let mut h = self.tape.max_pool2d(stem, 2, 2)?;
        for stage in &enc.stages {
            for block in stage {
                let a = self.conv(h, &block.conv1, true)?;
                let b = self.conv(a, &block.conv2, false)?;
                let skip = match &block.shortcut {
                    Some(layer) => self.conv(h, layer, false)?,
                    None => h,
                };
                let sum = self.tape.add(b, skip)?;
                h = self.tape.relu(sum);
            }
            feats.push(h);
        }
        Ok(feats)
    }

    fn upsample_mode(&self) -> UpsampleMode {
        match &self.model.arch {
            Architecture::Change(c) => c.upsample,
            Architecture::Direct(c) => c.trunk.upsample,
            Architecture::Semantic(c) => c.upsample,
        }
    }

    /// U-Net style decoder over one or two feature pyramids, with optional
    /// cost volumes between the two at the configured stages.
    fn decode(&mut self, branches: &[Vec<Var>]) -> Result<Var> {
        let layout = &self.model.layout;
        let mode = self.upsample_mode();
        let stages = layout.num_stages();
        let mut up: Option<Var> = None;
        for (i, level) in layout.decoder.levels.iter().enumerate() {
            let s = stages - 1 - i;
            let mut x = match up {
                Some(u) => u,
                None => branches[0][s + 1],
            };
            let skips = if up.is_some() { branches } else { &branches[1..] };
            for feats in skips {
                x = self.tape.concat(x, feats[s + 1])?;
            }
            if layout.correlation_stages.contains(&s) {
                let c = self.tape.correlation(branches[0][s + 1], branches[1][s + 1], layout.max_disp)?;
                x = self.tape.concat(x, c)?;
            }
            let y = self.conv(x, level, true)?;
            up = Some(self.tape.upsample2x(y, mode)?);
        }
        let mut x = up.expect("at least one stage");
        for feats in branches {
            x = self.tape.concat(x, feats[0])?;
        }
        let y = self.conv(x, &layout.decoder.full, true)?;
        self.conv(y, &layout.decoder.head, false)
    }

    fn check_images(&self, i1: &Tensor, i2: Option<&Tensor>, channels: usize) -> Result<()> {
        const OP: &str = "forward";
        let (_, c, h, w) = i1.dims4(OP)?;
        if c != channels {
            return Err(Error::shape(OP, format!("expected {channels} input channels, got {c}")));
        }
        if let Some(i2) = i2 {
            if i2.shape() != i1.shape() {
                return Err(Error::shape(OP, format!("image pair shapes differ: {:?} vs {:?}", i1.shape(), i2.shape())));
            }
        }
        let f = self.model.arch.encoder().downsampling_factor();
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::shape(OP, format!("spatial size {h}x{w} must be a positive multiple of {f}")));
        }
        Ok(())
    }

    fn siamese_trunk(&mut self, i1: &Tensor, i2: &Tensor) -> Result<Var> {
        self.check_images(i1, Some(i2), 3)?;
        let a = self.tape.constant(i1.clone());
        let b = self.tape.constant(i2.clone());
        let f1 = self.encode(a)?;
        let f2 = self.encode(b)?;
        self.decode(&[f1, f2])
    }

    fn split(&mut self, joint: Var) -> Result<SplitLogits> {
        let k = self.tape.shape(joint)[1] / 2;
        let first = self.tape.slice_channels(joint, 0, k)?;
        let second = self.tape.slice_channels(joint, k, k)?;
        Ok(SplitLogits { joint, first, second })
    }

    /// Change logits `[N, 2, H, W]` from a CSCDNet.
    pub fn forward_change(&mut self, i1: &Tensor, i2: &Tensor) -> Result<Var> {
        self.model.check_kind(ModelKind::Cscdnet)?;
        self.siamese_trunk(i1, i2)
    }

    /// Semantic change logits from an SSCDNet given both images and a
    /// binary change mask `[N, 1, H, W]`.
    pub fn forward_semantic(&mut self, i1: &Tensor, i2: &Tensor, mask: &Tensor) -> Result<SplitLogits> {
        self.model.check_kind(ModelKind::Sscdnet)?;
        self.check_images(i1, Some(i2), 3)?;
        let (n, _, h, w) = i1.dims4("forward_semantic")?;
        if mask.shape() != [n, 1, h, w] {
            return Err(Error::shape("forward_semantic", format!("mask {:?} for images {:?}", mask.shape(), i1.shape())));
        }
        if let Some((index, &value)) = mask.data().iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinaryTarget { index, value: value as f64 });
        }
        let a = self.tape.constant(i1.clone());
        let b = self.tape.constant(i2.clone());
        let m = self.tape.constant(mask.clone());
        let ab = self.tape.concat(a, b)?;
        let x = self.tape.concat(ab, m)?;
        let feats = self.encode(x)?;
        let joint = self.decode(&[feats])?;
        self.split(joint)
    }

    /// Semantic change logits straight from an image pair (CSSCDNet).
    pub fn forward_semantic_direct(&mut self, i1: &Tensor, i2: &Tensor) -> Result<SplitLogits> {
        self.model.check_kind(ModelKind::Csscdnet)?;
        let joint = self.siamese_trunk(i1, i2)?;
        self.split(joint)
    }
}
