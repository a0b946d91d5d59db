//! Change-detection F1/IoU and semantic mIoU from confusion counts.

use std::fmt::Write as _;

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::maps::{ChangeMask, LabelMap};

/// Threshold probabilities into masks: `[N, 2, H, W]` uses the change
/// channel (index 1), `[N, 1, H, W]` the single channel. `p >= tau` is a
/// change.
pub fn binarize(prob: &Tensor, tau: f32) -> Result<Vec<ChangeMask>> {
    let (n, c, h, w) = prob.dims4("binarize")?;
    if c != 1 && c != 2 {
        return Err(Error::shape("binarize", format!("expected 1 or 2 channels, got {c}")));
    }
    if let Some((i, v)) = prob.data().iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid("binarize", format!("probability {v} at flat index {i} outside [0, 1]")));
    }
    let plane = h * w;
    (0..n)
        .map(|b| {
            let start = (b * c + c - 1) * plane;
            let data = prob.data()[start..start + plane].iter().map(|&p| u8::from(p >= tau)).collect();
            ChangeMask::new(w, h, data)
        })
        .collect()
}

/// Binary change counts over the positive (changed) class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ChangeCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ChangeCounts {
    pub fn from_masks(pred: &ChangeMask, gt: &ChangeMask) -> Result<Self> {
        if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
            return Err(Error::shape(
                "f1_change",
                format!("pred {}x{} vs gt {}x{}", pred.width(), pred.height(), gt.width(), gt.height()),
            ));
        }
        let mut c = ChangeCounts::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, other: &ChangeCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn metrics(&self) -> ChangeMetrics {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        if self.tp + self.fp + self.fn_ == 0 {
            return ChangeMetrics {
                precision: 0.0,
                recall: 0.0,
                f1: 1.0,
                iou: 1.0,
            };
        }
        let ratio = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
        ChangeMetrics {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: 2.0 * tp / (2.0 * tp + fp + fn_),
            iou: tp / (tp + fp + fn_),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChangeMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

/// Precision, recall, F1 and IoU of the changed class. Both masks empty
/// counts as a perfect match (F1 = IoU = 1).
pub fn f1_change(pred: &ChangeMask, gt: &ChangeMask) -> Result<ChangeMetrics> {
    Ok(ChangeCounts::from_masks(pred, gt)?.metrics())
}

/// `K x K` counts; entry `(g, p)` is the number of pixels with ground truth
/// `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::shape("confusion", format!("{} counts for K = {k}", counts.len())));
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, g: usize) -> u64 {
        self.counts[g * self.k..(g + 1) * self.k].iter().sum()
    }

    pub fn col_sum(&self, p: usize) -> u64 {
        (0..self.k).map(|g| self.get(g, p)).sum()
    }

    /// Add one prediction/ground-truth pair. Pixels whose ground truth equals
    /// `ignore` are skipped; every other value must be below `K`.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, ignore: Option<u8>) -> Result<()> {
        if !pred.same_size(gt.width(), gt.height()) {
            return Err(Error::shape(
                "accumulate_confusion",
                format!("pred {}x{} vs gt {}x{}", pred.width(), pred.height(), gt.width(), gt.height()),
            ));
        }
        let w = gt.width();
        let mut add = vec![0u64; self.counts.len()];
        for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
            if Some(g) == ignore {
                continue;
            }
            for class in [g, p] {
                if class as usize >= self.k {
                    return Err(Error::ClassOutOfRange {
                        class,
                        num_classes: self.k,
                        n: 0,
                        y: i / w,
                        x: i % w,
                    });
                }
            }
            add[g as usize * self.k + p as usize] += 1;
        }
        for (c, a) in self.counts.iter_mut().zip(add) {
            *c += a;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape("confusion merge", format!("K = {} vs {}", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` where the class is absent from both prediction
    /// and ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let den = self.row_sum(c) + self.col_sum(c) - tp;
                (den > 0).then(|| tp as f64 / den as f64)
            })
            .collect()
    }
}

/// IoU summary of a confusion matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean over every evaluable class.
    pub miou: f64,
    /// Mean over evaluable classes other than class 0 (no change); `None`
    /// when class 0 is the only evaluable one.
    pub miou_without_background: Option<f64>,
    pub change: Option<ChangeMetrics>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn miou_from_confusion(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let per_class_iou = cm.iou();
    let miou = mean(per_class_iou.iter().flatten().copied()).ok_or(Error::NoEvaluableClasses)?;
    let miou_without_background = mean(per_class_iou.iter().skip(1).flatten().copied());
    Ok(MetricsReport {
        per_class_iou,
        miou,
        miou_without_background,
        change: None,
    })
}

impl MetricsReport {
    pub fn from_change(counts: &ChangeCounts) -> Self {
        let m = counts.metrics();
        let cm = ConfusionMatrix {
            k: 2,
            counts: vec![counts.tn, counts.fp, counts.fn_, counts.tp],
        };
        let per_class_iou = cm.iou();
        MetricsReport {
            miou: mean(per_class_iou.iter().flatten().copied()).unwrap_or(1.0),
            miou_without_background: Some(m.iou),
            per_class_iou,
            change: Some(m),
        }
    }

    /// Machine-readable `metric,class,value` lines; `class` is empty for
    /// aggregate values and `nan` marks an absent class.
    pub fn to_csv(&self, class_names: &[&str]) -> String {
        let mut out = String::from("metric,class,value\n");
        if let Some(c) = &self.change {
            for (name, v) in [("precision", c.precision), ("recall", c.recall), ("f1", c.f1), ("iou", c.iou)] {
                let _ = writeln!(out, "{name},,{v}");
            }
        }
        let _ = writeln!(out, "miou,,{}", self.miou);
        if let Some(v) = self.miou_without_background {
            let _ = writeln!(out, "miou_without_background,,{v}");
        }
        for (k, iou) in self.per_class_iou.iter().enumerate() {
            let name = class_names.get(k).map(|s| s.to_string()).unwrap_or_else(|| k.to_string());
            match iou {
                Some(v) => writeln!(out, "iou,{name},{v}"),
                None => writeln!(out, "iou,{name},nan"),
            }
            .expect("write to String");
        }
        out
    }

    /// Human-readable summary.
    pub fn to_text(&self, class_names: &[&str]) -> String {
        let mut out = String::new();
        if let Some(c) = &self.change {
            let _ = writeln!(
                out,
                "precision {:.4}  recall {:.4}  F1 {:.4}  IoU {:.4}",
                c.precision, c.recall, c.f1, c.iou
            );
        }
        let _ = writeln!(out, "mIoU {:.4}", self.miou);
        if let Some(v) = self.miou_without_background {
            let _ = writeln!(out, "mIoU without no-change {v:.4}");
        }
        for (k, iou) in self.per_class_iou.iter().enumerate() {
            let name = class_names.get(k).copied().unwrap_or("?");
            match iou {
                Some(v) => writeln!(out, "  {k:>3} {name:<14} {v:.4}"),
                None => writeln!(out, "  {k:>3} {name:<14} absent"),
            }
            .expect("write to String");
        }
        out
    }
}
