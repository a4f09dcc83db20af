//! Segmentation metrics, threshold sweeps, per-method reports and the
//! multi-method comparison grid.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{validation, Result};
use crate::image::{MaskMap, ProbMap};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `0.00, 0.05, ..., 1.00`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=20).map(|i| f64::from(i) / 20.0).collect()
}

/// Pixel is set iff its probability is strictly above `threshold`.
pub fn binarize(p: &ProbMap, threshold: f64) -> MaskMap {
    p.map(|v| u8::from(v > threshold))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn of(pred: &MaskMap, gt: &MaskMap) -> Result<Self> {
        if !pred.same_shape(gt) {
            return Err(validation(format!("mask shapes differ: {}x{} vs {}x{}", pred.width(), pred.height(), gt.width(), gt.height())));
        }
        let mut c = Confusion::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                _ => {}
            }
        }
        Ok(c)
    }

    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    pub fn precision(&self) -> f64 {
        let d = self.tp + self.fp;
        if d == 0 {
            1.0
        } else {
            self.tp as f64 / d as f64
        }
    }

    pub fn recall(&self) -> f64 {
        let d = self.tp + self.fn_;
        if d == 0 {
            1.0
        } else {
            self.tp as f64 / d as f64
        }
    }
}

/// Intersection over union; two empty masks score 1.
pub fn iou(pred: &MaskMap, gt: &MaskMap) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.iou())
}

/// Precision is 1 for an empty prediction, recall is 1 for an empty ground truth.
pub fn precision_recall(pred: &MaskMap, gt: &MaskMap) -> Result<(f64, f64)> {
    let c = Confusion::of(pred, gt)?;
    Ok((c.precision(), c.recall()))
}

/// Per-method Top-1 percentages from a `methods x samples` IoU table.
/// Every method attaining a sample's maximum is credited with the win.
pub fn iou_top1(table: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = table.first() else {
        return Ok(Vec::new());
    };
    let n = first.len();
    if table.iter().any(|row| row.len() != n) {
        return Err(validation("ragged IoU table: methods cover different sample counts"));
    }
    if n == 0 {
        return Err(validation("IoU table has no samples"));
    }
    let mut wins = alloc::vec![0usize; table.len()];
    for s in 0..n {
        let best = table.iter().map(|row| row[s]).fold(f64::NEG_INFINITY, f64::max);
        for (m, row) in table.iter().enumerate() {
            if row[s] == best {
                wins[m] += 1;
            }
        }
    }
    Ok(wins.into_iter().map(|w| w as f64 / n as f64 * 100.0).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub threshold: f64,
    pub mean_iou: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Mean IoU, precision and recall over the set at each threshold.
pub fn sweep(probs: &[&ProbMap], gts: &[&MaskMap], thresholds: &[f64]) -> Result<Vec<CurveRow>> {
    if probs.is_empty() {
        return Err(validation("sweep over an empty sample set"));
    }
    if probs.len() != gts.len() {
        return Err(validation("sweep needs one ground truth per probability map"));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) || thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(validation("thresholds must be sorted ascending within [0, 1]"));
    }
    let n = probs.len() as f64;
    thresholds
        .iter()
        .map(|&t| {
            let mut row = CurveRow { threshold: t, mean_iou: 0.0, precision: 0.0, recall: 0.0 };
            for (p, g) in probs.iter().zip(gts) {
                let c = Confusion::of(&binarize(p, t), g)?;
                row.mean_iou += c.iou() / n;
                row.precision += c.precision() / n;
                row.recall += c.recall() / n;
            }
            Ok(row)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub records: Vec<SampleRecord>,
    pub mean_iou: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub curve: Vec<CurveRow>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl TaskReport {
    fn build(ids: Vec<String>, probs: &[&ProbMap], gts: &[&MaskMap], thresholds: &[f64]) -> Result<Self> {
        let mut records = Vec::with_capacity(ids.len());
        for ((id, p), g) in ids.into_iter().zip(probs).zip(gts) {
            let c = Confusion::of(&binarize(p, DEFAULT_THRESHOLD), g)?;
            records.push(SampleRecord { id, iou: c.iou(), precision: c.precision(), recall: c.recall() });
        }
        let curve = sweep(probs, gts, thresholds)?;
        let mut r = TaskReport { records, mean_iou: 0.0, mean_precision: 0.0, mean_recall: 0.0, curve };
        r.recompute_aggregates();
        Ok(r)
    }

    pub fn recompute_aggregates(&mut self) {
        self.mean_iou = mean(self.records.iter().map(|r| r.iou));
        self.mean_precision = mean(self.records.iter().map(|r| r.precision));
        self.mean_recall = mean(self.records.iter().map(|r| r.recall));
    }

    /// Whether stored aggregates equal a recomputation from the records.
    pub fn aggregates_consistent(&self) -> bool {
        let mut c = self.clone();
        c.recompute_aggregates();
        c.mean_iou == self.mean_iou && c.mean_precision == self.mean_precision && c.mean_recall == self.mean_recall
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub dataset: String,
    /// Top-1 tie convention used when reports are compared.
    pub top1_ties: String,
    pub skin: Option<TaskReport>,
    pub body: Option<TaskReport>,
}

/// Predictions of one method for one validation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub skin: Option<ProbMap>,
    pub body: Option<ProbMap>,
}

/// Scores predictions against the validation samples that carry each mask.
///
/// A task (skin or body) is scored when at least one prediction provides it;
/// every validation sample with that task's mask then needs a prediction.
pub fn evaluate_method(
    method: &str,
    dataset: &str,
    predictions: &[Prediction],
    validation_set: &[Sample],
    thresholds: &[f64],
) -> Result<EvalReport> {
    let by_id: BTreeMap<&str, &Prediction> = predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut missing = Vec::new();
    let mut task = |want_skin: bool| -> Result<Option<TaskReport>> {
        if !predictions.iter().any(|p| if want_skin { p.skin.is_some() } else { p.body.is_some() }) {
            return Ok(None);
        }
        let mut ids = Vec::new();
        let mut probs = Vec::new();
        let mut gts = Vec::new();
        for s in validation_set {
            let gt = if want_skin { s.skin_mask.as_ref() } else { s.body_mask.as_ref() };
            let Some(gt) = gt else { continue };
            let pred = by_id.get(s.id.as_str()).and_then(|p| if want_skin { p.skin.as_ref() } else { p.body.as_ref() });
            match pred {
                Some(p) => {
                    ids.push(s.id.clone());
                    probs.push(p);
                    gts.push(gt);
                }
                None => missing.push(format!("{}:{}", s.id, if want_skin { "skin" } else { "body" })),
            }
        }
        if probs.is_empty() {
            return Ok(None);
        }
        TaskReport::build(ids, &probs, &gts, thresholds).map(Some)
    };
    let skin = task(true)?;
    let body = task(false)?;
    if !missing.is_empty() {
        return Err(validation(format!("missing predictions for: {}", missing.join(", "))));
    }
    Ok(EvalReport { method: method.into(), dataset: dataset.into(), top1_ties: "shared".into(), skin, body })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub mean_iou: f64,
    pub top1_percent: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
}

/// Merges per-method reports of one task into a grid with a Top-1 column.
/// All reports must cover the same sample ids.
pub fn compare(reports: &[EvalReport], skin_task: bool) -> Result<Vec<ComparisonRow>> {
    let tasks: Vec<(&EvalReport, &TaskReport)> = reports
        .iter()
        .map(|r| {
            let t = if skin_task { r.skin.as_ref() } else { r.body.as_ref() };
            t.map(|t| (r, t)).ok_or_else(|| validation(format!("report '{}' lacks the requested task", r.method)))
        })
        .collect::<Result<_>>()?;
    let Some((_, first)) = tasks.first() else {
        return Ok(Vec::new());
    };
    let order: Vec<&str> = first.records.iter().map(|r| r.id.as_str()).collect();
    let mut table = Vec::with_capacity(tasks.len());
    for (r, t) in &tasks {
        let lookup: BTreeMap<&str, f64> = t.records.iter().map(|s| (s.id.as_str(), s.iou)).collect();
        if lookup.len() != order.len() {
            return Err(validation(format!("report '{}' covers a different sample list", r.method)));
        }
        let row = order
            .iter()
            .map(|id| lookup.get(id).copied().ok_or_else(|| validation(format!("report '{}' lacks sample {id}", r.method))))
            .collect::<Result<Vec<_>>>()?;
        table.push(row);
    }
    let top1 = iou_top1(&table)?;
    Ok(tasks
        .iter()
        .zip(top1)
        .map(|((r, t), top)| ComparisonRow {
            method: r.method.clone(),
            mean_iou: t.mean_iou,
            top1_percent: top,
            mean_precision: t.mean_precision,
            mean_recall: t.mean_recall,
        })
        .collect())
}
