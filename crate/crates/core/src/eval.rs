//! Batched inference and the four evaluation modes.

use std::fmt;
use std::str::FromStr;

use crate::dataio::PanoramaPair;
use crate::engine::{Reduction, Tensor};
use crate::error::{Error, Result};
use crate::maps::{ChangeMask, LabelMap, UNLABELED};
use crate::metrics::{binarize, miou_from_confusion, ChangeCounts, ConfusionMatrix, MetricsReport};
use crate::nn::{mask_tensor, Mode, Model, ModelKind};
use crate::train::stack_images;

pub const EVAL_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Change masks from a change detector, scored with F1.
    Cd,
    /// The semantic labeler fed ground-truth masks.
    Sscd,
    /// Binarized change-detector output fed to the semantic labeler.
    Pipeline,
    /// The end-to-end semantic change detector.
    Csscd,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Cd => "cd",
            EvalMode::Sscd => "sscd",
            EvalMode::Pipeline => "pipeline",
            EvalMode::Csscd => "csscd",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cd" => Ok(EvalMode::Cd),
            "sscd" => Ok(EvalMode::Sscd),
            "pipeline" => Ok(EvalMode::Pipeline),
            "csscd" => Ok(EvalMode::Csscd),
            other => Err(Error::Config(format!("unknown eval mode `{other}` (cd, sscd, pipeline, csscd)"))),
        }
    }
}

fn require_kind(model: &Model, kind: ModelKind) -> Result<()> {
    if model.kind() != kind {
        return Err(Error::CheckpointMismatch {
            expected: kind.to_string(),
            found: model.kind().to_string(),
        });
    }
    Ok(())
}

/// Change probability (softmax channel 1) per pair, `[N, 1, H, W]`.
pub fn change_probabilities(model: &Model, pairs: &[PanoramaPair]) -> Result<Tensor> {
    require_kind(model, ModelKind::Cscdnet)?;
    let first = pairs.first().ok_or_else(|| Error::invalid("eval", "no pairs"))?;
    let plane = first.width() * first.height();
    let mut data = Vec::with_capacity(pairs.len() * plane);
    for chunk in pairs.chunks(EVAL_BATCH) {
        let i1 = stack_images(chunk.iter().map(|p| &p.i1))?;
        let i2 = stack_images(chunk.iter().map(|p| &p.i2))?;
        let logits = model.predict_change(&i1, &i2)?;
        for s in 0..chunk.len() {
            let base = s * 2 * plane;
            let l = logits.data();
            data.extend((0..plane).map(|p| 1.0 / (1.0 + (l[base + p] - l[base + plane + p]).exp())));
        }
    }
    Tensor::new(vec![pairs.len(), 1, first.height(), first.width()], data)
}

pub fn predict_masks(model: &Model, pairs: &[PanoramaPair], tau: f32) -> Result<Vec<ChangeMask>> {
    binarize(&change_probabilities(model, pairs)?, tau)
}

/// Per-pixel argmax over the channels of `[N, K, H, W]` logits; ties go to
/// the lower class.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<LabelMap>> {
    let (n, k, h, w) = logits.dims4("argmax_labels")?;
    let plane = h * w;
    (0..n)
        .map(|s| {
            let x = &logits.data()[s * k * plane..(s + 1) * k * plane];
            let data = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if x[c * plane + p] > x[best * plane + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(w, h, data)
        })
        .collect()
}

/// Semantic change labels for both time points. An SSCDNet needs `masks`;
/// a CSSCDNet ignores them.
pub fn predict_semantic_labels(model: &Model, pairs: &[PanoramaPair], masks: Option<&[ChangeMask]>) -> Result<Vec<(LabelMap, LabelMap)>> {
    let mut out = Vec::with_capacity(pairs.len());
    for (c, chunk) in pairs.chunks(EVAL_BATCH).enumerate() {
        let i1 = stack_images(chunk.iter().map(|p| &p.i1))?;
        let i2 = stack_images(chunk.iter().map(|p| &p.i2))?;
        let (a, b) = match model.kind() {
            ModelKind::Sscdnet => {
                let masks = masks.ok_or_else(|| Error::invalid("eval", "the semantic labeler needs change masks"))?;
                if masks.len() != pairs.len() {
                    return Err(Error::shape("eval", format!("{} masks for {} pairs", masks.len(), pairs.len())));
                }
                let start = c * EVAL_BATCH;
                let m = mask_tensor(&masks[start..start + chunk.len()])?;
                model.predict_semantic(&i1, &i2, &m)?
            }
            ModelKind::Csscdnet => model.predict_semantic_direct(&i1, &i2)?,
            ModelKind::Cscdnet => {
                return Err(Error::CheckpointMismatch {
                    expected: "sscdnet or csscdnet".into(),
                    found: model.kind().to_string(),
                })
            }
        };
        out.extend(argmax_labels(&a)?.into_iter().zip(argmax_labels(&b)?));
    }
    Ok(out)
}

/// Metrics for a dataset and for each pair, plus the predictions.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub mode: EvalMode,
    pub report: MetricsReport,
    pub per_image: Vec<(String, Option<MetricsReport>)>,
    pub masks: Vec<ChangeMask>,
    pub labels: Vec<(LabelMap, LabelMap)>,
    /// Best F1 over a threshold grid and its threshold (change mode only).
    pub best_threshold: Option<(f32, f64)>,
    pub confusion: Option<ConfusionMatrix>,
}

pub const THRESHOLD_GRID: [f32; 19] = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

fn pooled_counts(pred: &[ChangeMask], pairs: &[PanoramaPair]) -> Result<(ChangeCounts, Vec<ChangeCounts>)> {
    let mut total = ChangeCounts::default();
    let mut each = Vec::with_capacity(pairs.len());
    for (m, p) in pred.iter().zip(pairs) {
        let c = ChangeCounts::from_masks(m, &p.mask)?;
        total.merge(&c);
        each.push(c);
    }
    Ok((total, each))
}

pub fn evaluate_change(model: &Model, pairs: &[PanoramaPair], tau: f32) -> Result<Evaluation> {
    let probs = change_probabilities(model, pairs)?;
    let masks = binarize(&probs, tau)?;
    let (total, each) = pooled_counts(&masks, pairs)?;
    let mut best: Option<(f32, f64)> = None;
    for t in THRESHOLD_GRID {
        let f1 = pooled_counts(&binarize(&probs, t)?, pairs)?.0.metrics().f1;
        if best.is_none_or(|(_, b)| f1 > b) {
            best = Some((t, f1));
        }
    }
    Ok(Evaluation {
        mode: EvalMode::Cd,
        report: MetricsReport::from_change(&total),
        per_image: pairs.iter().zip(&each).map(|(p, c)| (p.id.clone(), Some(MetricsReport::from_change(c)))).collect(),
        masks,
        labels: Vec::new(),
        best_threshold: best,
        confusion: None,
    })
}

/// Both time points' predictions are scored against their labels and pooled
/// into one confusion matrix; unlabeled pixels are skipped.
pub fn semantic_confusion(pred: &[(LabelMap, LabelMap)], pairs: &[PanoramaPair], num_classes: usize) -> Result<(ConfusionMatrix, Vec<ConfusionMatrix>)> {
    let mut total = ConfusionMatrix::new(num_classes);
    let mut each = Vec::with_capacity(pairs.len());
    for ((a, b), p) in pred.iter().zip(pairs) {
        let (ga, gb) = p
            .labels
            .as_ref()
            .ok_or_else(|| Error::Config(format!("pair `{}` has no semantic change labels", p.id)))?;
        let mut cm = ConfusionMatrix::new(num_classes);
        cm.accumulate(a, ga, Some(UNLABELED))?;
        cm.accumulate(b, gb, Some(UNLABELED))?;
        total.merge(&cm)?;
        each.push(cm);
    }
    Ok((total, each))
}

fn semantic_evaluation(mode: EvalMode, model: &Model, pairs: &[PanoramaPair], masks: Vec<ChangeMask>) -> Result<Evaluation> {
    let k = model.architecture().num_classes().expect("semantic model");
    let labels = predict_semantic_labels(model, pairs, Some(&masks))?;
    let (total, each) = semantic_confusion(&labels, pairs, k)?;
    Ok(Evaluation {
        mode,
        report: miou_from_confusion(&total)?,
        per_image: pairs.iter().zip(&each).map(|(p, cm)| (p.id.clone(), miou_from_confusion(cm).ok())).collect(),
        masks,
        labels,
        best_threshold: None,
        confusion: Some(total),
    })
}

/// The semantic labeler with the given masks (ground truth for `sscd` mode).
pub fn evaluate_semantic(model: &Model, pairs: &[PanoramaPair], masks: &[ChangeMask]) -> Result<Evaluation> {
    require_kind(model, ModelKind::Sscdnet)?;
    semantic_evaluation(EvalMode::Sscd, model, pairs, masks.to_vec())
}

pub fn evaluate_pipeline(change: &Model, semantic: &Model, pairs: &[PanoramaPair], tau: f32) -> Result<Evaluation> {
    require_kind(semantic, ModelKind::Sscdnet)?;
    let masks = predict_masks(change, pairs, tau)?;
    semantic_evaluation(EvalMode::Pipeline, semantic, pairs, masks)
}

pub fn evaluate_direct(model: &Model, pairs: &[PanoramaPair]) -> Result<Evaluation> {
    require_kind(model, ModelKind::Csscdnet)?;
    semantic_evaluation(EvalMode::Csscd, model, pairs, Vec::new())
}

/// Ground-truth masks of `pairs`.
pub fn gt_masks(pairs: &[PanoramaPair]) -> Vec<ChangeMask> {
    pairs.iter().map(|p| p.mask.clone()).collect()
}

/// Per-pixel binary cross-entropy of an eval-mode change detector over
/// `pairs`.
pub fn change_loss(model: &Model, pairs: &[PanoramaPair]) -> Result<f64> {
    require_kind(model, ModelKind::Cscdnet)?;
    let mut total = 0.0;
    let mut pixels = 0usize;
    for chunk in pairs.chunks(EVAL_BATCH) {
        let i1 = stack_images(chunk.iter().map(|p| &p.i1))?;
        let i2 = stack_images(chunk.iter().map(|p| &p.i2))?;
        let masks = gt_masks(chunk);
        let mut s = model.session(Mode::Eval);
        let logits = s.forward_change(&i1, &i2)?;
        let loss = s.tape.bce_change_loss(logits, &masks, Reduction::Sum)?;
        total += s.tape.value(loss).item() as f64;
        pixels += chunk.len() * masks[0].data().len();
    }
    Ok(total / pixels as f64)
}

/// Per-pixel split cross-entropy of an eval-mode semantic model; `masks`
/// feed an SSCDNet and are ignored by a CSSCDNet.
pub fn semantic_loss(model: &Model, pairs: &[PanoramaPair], masks: Option<&[ChangeMask]>) -> Result<f64> {
    let mut total = 0.0;
    let mut pixels = 0usize;
    for (c, chunk) in pairs.chunks(EVAL_BATCH).enumerate() {
        let i1 = stack_images(chunk.iter().map(|p| &p.i1))?;
        let i2 = stack_images(chunk.iter().map(|p| &p.i2))?;
        let (l1, l2): (Vec<LabelMap>, Vec<LabelMap>) = chunk
            .iter()
            .map(|p| p.labels.clone().ok_or_else(|| Error::Config(format!("pair `{}` has no semantic change labels", p.id))))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        let mut s = model.session(Mode::Eval);
        let out = match (model.kind(), masks) {
            (ModelKind::Sscdnet, Some(m)) => {
                let start = c * EVAL_BATCH;
                let m = mask_tensor(&m[start..start + chunk.len()])?;
                s.forward_semantic(&i1, &i2, &m)?
            }
            (ModelKind::Sscdnet, None) => return Err(Error::invalid("eval", "the semantic labeler needs change masks")),
            _ => s.forward_semantic_direct(&i1, &i2)?,
        };
        let loss = s.tape.split_semantic_loss(out.joint, &l1, &l2, Reduction::Sum)?;
        total += s.tape.value(loss).item() as f64;
        pixels += 2 * chunk.len() * l1[0].data().len();
    }
    Ok(total / pixels as f64)
}
