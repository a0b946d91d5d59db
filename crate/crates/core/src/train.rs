//! Minibatch training loops for the three networks.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::PanoramaPair;
use crate::engine::{AdamConfig, AdamState, Reduction, Tensor, Var};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::maps::{ChangeMask, LabelMap};
use crate::nn::{mask_tensor, save_weights, Mode, Model, ModelKind, Session};
use crate::synthesis::{augment_mask, AugmentConfig, SyntheticSample};

pub const CHANGE_ITERATIONS: usize = 30_000;
pub const SEMANTIC_ITERATIONS: usize = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    /// Mask augmentation; only used when training the semantic labeler.
    pub augment: AugmentConfig,
    /// Iterations between checkpoints; `None` means a tenth of the run.
    pub checkpoint_every: Option<usize>,
}

impl TrainConfig {
    pub fn new(kind: ModelKind, seed: u64) -> Self {
        TrainConfig {
            batch_size: 32,
            iterations: match kind {
                ModelKind::Cscdnet => CHANGE_ITERATIONS,
                _ => SEMANTIC_ITERATIONS,
            },
            lr: 2e-4,
            seed,
            augment: AugmentConfig::default(),
            checkpoint_every: None,
        }
    }

    /// Toy-scale preset: batch 8.
    pub fn toy(kind: ModelKind, seed: u64, iterations: usize) -> Self {
        TrainConfig {
            batch_size: 8,
            iterations,
            ..Self::new(kind, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::Config("batch_size and iterations must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        self.augment.validate()
    }

    pub fn checkpoint_interval(&self) -> usize {
        self.checkpoint_every.unwrap_or((self.iterations / 10).max(1))
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("batch_size", self.batch_size);
        kv.set("iterations", self.iterations);
        kv.set("lr", self.lr);
        kv.set("seed", self.seed);
        kv.set("augment", self.augment.enabled);
        kv.set("augment_kernel_min", self.augment.kernel_min);
        kv.set("augment_kernel_max", self.augment.kernel_max);
        if let Some(n) = self.checkpoint_every {
            kv.set("checkpoint_every", n);
        }
        kv
    }

    /// Override fields present in `kv`.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        if let Some(v) = kv.get("batch_size")? {
            self.batch_size = v;
        }
        if let Some(v) = kv.get("iterations")? {
            self.iterations = v;
        }
        if let Some(v) = kv.get("lr")? {
            self.lr = v;
        }
        if let Some(v) = kv.get("seed")? {
            self.seed = v;
        }
        if let Some(v) = kv.get("augment")? {
            self.augment.enabled = v;
        }
        if let Some(v) = kv.get("augment_kernel_min")? {
            self.augment.kernel_min = v;
        }
        if let Some(v) = kv.get("augment_kernel_max")? {
            self.augment.kernel_max = v;
        }
        if let Some(v) = kv.get("checkpoint_every")? {
            self.checkpoint_every = Some(v);
        }
        self.validate()
    }
}

/// State handed to the observer after every update.
pub struct Progress<'a> {
    /// 1-based count of completed updates.
    pub iteration: usize,
    /// Loss of the batch just trained on, per pixel.
    pub loss: f64,
    pub model: &'a Model,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

pub struct TrainReport {
    pub model: Model,
    /// Per-pixel batch loss of each iteration.
    pub loss_trace: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn iterations_run(&self) -> usize {
        self.loss_trace.len()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().copied()
    }
}

/// A training example as a pair with semantic labels.
pub fn synthetic_to_pair(id: impl Into<String>, s: SyntheticSample) -> PanoramaPair {
    PanoramaPair::new(id, s.i1, s.i2, s.mask, Some((s.l1, s.l2))).expect("synthesized tuples are consistent")
}

pub fn stack_images<'a>(items: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let refs: Vec<&Tensor> = items.collect();
    Tensor::stack(&refs)
}

fn labels_of(batch: &[&PanoramaPair]) -> Result<(Vec<LabelMap>, Vec<LabelMap>)> {
    batch
        .iter()
        .map(|p| {
            p.labels
                .clone()
                .ok_or_else(|| Error::Config(format!("pair `{}` has no semantic change labels", p.id)))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().unzip())
}

fn check_data(data: &[PanoramaPair], needs_labels: bool, num_classes: Option<usize>) -> Result<()> {
    let first = data.first().ok_or_else(|| Error::Config("training set is empty".into()))?;
    for p in data {
        if (p.width(), p.height()) != (first.width(), first.height()) {
            return Err(Error::shape("train", format!("pair `{}` is {}x{}, expected {}x{}", p.id, p.width(), p.height(), first.width(), first.height())));
        }
        if needs_labels {
            let (a, b) = p
                .labels
                .as_ref()
                .ok_or_else(|| Error::Config(format!("pair `{}` has no semantic change labels", p.id)))?;
            let k = num_classes.expect("semantic model");
            for (i, l) in [a, b].into_iter().enumerate() {
                if let Some(pos) = l.data().iter().position(|&c| c as usize >= k) {
                    return Err(Error::ClassOutOfRange {
                        class: l.data()[pos],
                        num_classes: k,
                        n: i,
                        y: pos / l.width(),
                        x: pos % l.width(),
                    });
                }
            }
        }
    }
    Ok(())
}

fn save_checkpoint(model: &Model, dir: &Path, name: &str, saved: &mut Vec<PathBuf>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    save_weights(model, &path)?;
    saved.push(path);
    Ok(())
}

/// The shared loop: sample a batch with replacement, build the loss, step
/// Adam, fold batch-norm statistics, log, checkpoint, ask the observer.
fn run<F>(mut model: Model, data: &[PanoramaPair], cfg: &TrainConfig, checkpoint_dir: Option<&Path>, observer: &mut dyn FnMut(&Progress) -> Control, mut build: F) -> Result<TrainReport>
where
    F: FnMut(&mut Session, &[&PanoramaPair], &mut ChaCha8Rng) -> Result<(Var, usize)>,
{
    cfg.validate()?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut loss_trace = Vec::with_capacity(cfg.iterations);
    let mut checkpoints: Vec<PathBuf> = Vec::new();
    let mut stopped_early = false;
    let every = cfg.checkpoint_interval();
    for it in 1..=cfg.iterations {
        let batch: Vec<&PanoramaPair> = (0..cfg.batch_size).map(|_| &data[rng.random_range(0..data.len())]).collect();
        let (loss, grads, stats) = {
            let mut s = model.session(Mode::Train);
            let (loss, pixels) = build(&mut s, &batch, &mut rng)?;
            let value = s.tape.value(loss).item() as f64 / pixels as f64;
            let grads = if value.is_finite() { Some(s.param_grads(&s.tape.backward(loss)?)) } else { None };
            (value, grads, s.take_batch_stats())
        };
        let diverged = || Error::Diverged {
            iteration: it,
            last_checkpoint: checkpoints.last().cloned(),
        };
        let Some(grads) = grads else { return Err(diverged()) };
        match adam.step(model.params_mut(), &grads) {
            Err(Error::NonFiniteGradient { .. }) => return Err(diverged()),
            other => other?,
        }
        model.apply_batch_stats(&stats)?;
        loss_trace.push(loss);
        let stop = observer(&Progress {
            iteration: it,
            loss,
            model: &model,
        }) == Control::Stop;
        if let Some(dir) = checkpoint_dir {
            if it % every == 0 && it != cfg.iterations && !stop {
                save_checkpoint(&model, dir, &format!("iter_{it:07}.sscd"), &mut checkpoints)?;
            }
        }
        if stop {
            stopped_early = it < cfg.iterations;
            break;
        }
    }
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(&model, dir, "final.sscd", &mut checkpoints)?;
    }
    Ok(TrainReport {
        model,
        loss_trace,
        checkpoints,
        stopped_early,
    })
}

pub fn never_stop(_: &Progress) -> Control {
    Control::Continue
}

/// Train a change detector on image pairs and their masks with the
/// pixel-wise binary cross-entropy.
pub fn train_change(model: Model, data: &[PanoramaPair], cfg: &TrainConfig, checkpoint_dir: Option<&Path>, observer: &mut dyn FnMut(&Progress) -> Control) -> Result<TrainReport> {
    if model.kind() != ModelKind::Cscdnet {
        return Err(Error::CheckpointMismatch {
            expected: ModelKind::Cscdnet.to_string(),
            found: model.kind().to_string(),
        });
    }
    check_data(data, false, None)?;
    run(model, data, cfg, checkpoint_dir, observer, |s, batch, _| {
        let i1 = stack_images(batch.iter().map(|p| &p.i1))?;
        let i2 = stack_images(batch.iter().map(|p| &p.i2))?;
        let masks: Vec<ChangeMask> = batch.iter().map(|p| p.mask.clone()).collect();
        let logits = s.forward_change(&i1, &i2)?;
        let pixels = batch.len() * masks[0].data().len();
        Ok((s.tape.bce_change_loss(logits, &masks, Reduction::Sum)?, pixels))
    })
}

/// Train the semantic labeler on tuples `(I1, I2, M, L1', L2')`. With
/// augmentation enabled each sampled mask is independently transformed
/// before it is fed to the network; the targets are left as they are.
pub fn train_semantic(model: Model, data: &[PanoramaPair], cfg: &TrainConfig, checkpoint_dir: Option<&Path>, observer: &mut dyn FnMut(&Progress) -> Control) -> Result<TrainReport> {
    let k = semantic_classes(&model, ModelKind::Sscdnet)?;
    check_data(data, true, Some(k))?;
    let augment = cfg.augment;
    run(model, data, cfg, checkpoint_dir, observer, |s, batch, rng| {
        let i1 = stack_images(batch.iter().map(|p| &p.i1))?;
        let i2 = stack_images(batch.iter().map(|p| &p.i2))?;
        let masks = batch
            .iter()
            .map(|p| augment_mask(&p.mask, &augment, rng))
            .collect::<Result<Vec<_>>>()?;
        let (l1, l2) = labels_of(batch)?;
        let out = s.forward_semantic(&i1, &i2, &mask_tensor(&masks)?)?;
        let pixels = 2 * batch.len() * l1[0].data().len();
        Ok((s.tape.split_semantic_loss(out.joint, &l1, &l2, Reduction::Sum)?, pixels))
    })
}

/// Train the end-to-end semantic change detector on labeled pairs.
pub fn train_direct(model: Model, data: &[PanoramaPair], cfg: &TrainConfig, checkpoint_dir: Option<&Path>, observer: &mut dyn FnMut(&Progress) -> Control) -> Result<TrainReport> {
    let k = semantic_classes(&model, ModelKind::Csscdnet)?;
    check_data(data, true, Some(k))?;
    run(model, data, cfg, checkpoint_dir, observer, |s, batch, _| {
        let i1 = stack_images(batch.iter().map(|p| &p.i1))?;
        let i2 = stack_images(batch.iter().map(|p| &p.i2))?;
        let (l1, l2) = labels_of(batch)?;
        let out = s.forward_semantic_direct(&i1, &i2)?;
        let pixels = 2 * batch.len() * l1[0].data().len();
        Ok((s.tape.split_semantic_loss(out.joint, &l1, &l2, Reduction::Sum)?, pixels))
    })
}

fn semantic_classes(model: &Model, expected: ModelKind) -> Result<usize> {
    if model.kind() != expected {
        return Err(Error::CheckpointMismatch {
            expected: expected.to_string(),
            found: model.kind().to_string(),
        });
    }
    Ok(model.architecture().num_classes().expect("semantic kind"))
}

/// Dispatch on the model kind.
pub fn train(model: Model, data: &[PanoramaPair], cfg: &TrainConfig, checkpoint_dir: Option<&Path>, observer: &mut dyn FnMut(&Progress) -> Control) -> Result<TrainReport> {
    match model.kind() {
        ModelKind::Cscdnet => train_change(model, data, cfg, checkpoint_dir, observer),
        ModelKind::Sscdnet => train_semantic(model, data, cfg, checkpoint_dir, observer),
        ModelKind::Csscdnet => train_direct(model, data, cfg, checkpoint_dir, observer),
    }
}
