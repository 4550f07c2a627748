//! Matching instability between epochs and a compact average-precision
//! evaluator.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::denoising::GtObject;
use crate::error::{invalid, Result};
use crate::geometry::{iou, BBox};
use crate::losses::LossBreakdown;
use crate::matching::Assignment;

/// Entry `n` is the ground-truth index matched to prediction `n`, or -1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexVector(pub Vec<i64>);

impl IndexVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn index_vector(a: &Assignment, n_preds: usize) -> Result<IndexVector> {
    let mut v = vec![-1i64; n_preds];
    for &(n, m) in &a.pairs {
        if n >= n_preds {
            return Err(invalid(format!("prediction index {n} >= {n_preds}")));
        }
        if v[n] != -1 {
            return Err(invalid(format!("prediction {n} assigned twice")));
        }
        v[n] = m as i64;
    }
    Ok(IndexVector(v))
}

/// Number of predictions whose matched ground truth changed.
pub fn instability(now: &IndexVector, prev: &IndexVector) -> Result<usize> {
    if now.len() != prev.len() {
        return Err(invalid(format!(
            "index vectors of length {} and {}",
            now.len(),
            prev.len()
        )));
    }
    Ok(now.0.iter().zip(&prev.0).filter(|(a, b)| a != b).count())
}

/// Mean per-image instability over a fixed image set.
pub fn dataset_instability(now: &[IndexVector], prev: &[IndexVector]) -> Result<f64> {
    if now.len() != prev.len() {
        return Err(invalid(format!(
            "{} images this epoch, {} the previous",
            now.len(),
            prev.len()
        )));
    }
    if now.is_empty() {
        return Err(invalid("no images to compare"));
    }
    let mut total = 0usize;
    for (a, b) in now.iter().zip(prev) {
        total += instability(a, b)?;
    }
    Ok(total as f64 / now.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub label: usize,
}

/// One image: its detections and its ground truth.
#[derive(Debug, Clone, Default)]
pub struct EvalImage {
    pub detections: Vec<Detection>,
    pub gts: Vec<GtObject>,
}

/// All-point interpolated area under a precision-recall sequence.
fn interpolated_area(tp_flags: &[bool], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &hit) in tp_flags.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // precision envelope from the right
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        area += (r - prev_recall) * p;
        prev_recall = *r;
    }
    area
}

fn class_ap(images: &[EvalImage], class: usize, threshold: f64) -> f64 {
    let n_gt: usize = images
        .iter()
        .map(|im| im.gts.iter().filter(|g| g.label == class).count())
        .sum();
    let mut dets: Vec<(usize, &Detection)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| im.detections.iter().filter(|d| d.label == class).map(move |d| (i, d)))
        .collect();
    if n_gt == 0 {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    // stable: equal scores keep image/detection order
    dets.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap_or(Ordering::Equal));

    let mut used: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.gts.len()]).collect();
    let flags: Vec<bool> = dets
        .iter()
        .map(|&(i, d)| {
            let mut best = None;
            let mut best_iou = threshold;
            for (m, gt) in images[i].gts.iter().enumerate() {
                if gt.label != class || used[i][m] {
                    continue;
                }
                let v = iou(&d.bbox, &gt.bbox);
                if v >= best_iou {
                    best_iou = v;
                    best = Some(m);
                }
            }
            match best {
                Some(m) => {
                    used[i][m] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    interpolated_area(&flags, n_gt)
}

/// Class-averaged AP at one IoU threshold.
pub fn average_precision(images: &[EvalImage], n_classes: usize, threshold: f64) -> f64 {
    (0..n_classes).map(|c| class_ap(images, c, threshold)).sum::<f64>() / n_classes as f64
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| 0.5 + 0.05 * k as f64).collect()
}

/// AP averaged over several IoU thresholds.
pub fn mean_average_precision(images: &[EvalImage], n_classes: usize, thresholds: &[f64]) -> f64 {
    thresholds
        .iter()
        .map(|&t| average_precision(images, n_classes, t))
        .sum::<f64>()
        / thresholds.len() as f64
}

/// Summary of one training epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub index_vectors: Vec<IndexVector>,
    /// Mean instability against the previous epoch; `None` for the first.
    pub mean_is: Option<f64>,
    pub ap50: f64,
    pub mean_ap: f64,
    pub losses: LossBreakdown,
    pub lr: f64,
    pub wall_secs: f64,
}

/// One CSV row of an [`EpochRecord`], in the fixed column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    #[serde(rename = "mean_IS")]
    pub mean_is: Option<f64>,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    pub mean_ap: f64,
    pub loss_cls: f64,
    pub loss_l1: f64,
    pub loss_giou: f64,
    pub loss_dn_cls: f64,
    pub loss_dn_l1: f64,
    pub loss_dn_giou: f64,
    pub lr: f64,
}

impl From<&EpochRecord> for EpochRow {
    fn from(r: &EpochRecord) -> Self {
        Self {
            epoch: r.epoch,
            mean_is: r.mean_is,
            ap50: r.ap50,
            mean_ap: r.mean_ap,
            loss_cls: r.losses.cls,
            loss_l1: r.losses.l1,
            loss_giou: r.losses.giou,
            loss_dn_cls: r.losses.dn_cls,
            loss_dn_l1: r.losses.dn_l1,
            loss_dn_giou: r.losses.dn_giou,
            lr: r.lr,
        }
    }
}

pub const CSV_HEADER: [&str; 11] = [
    "epoch", "mean_IS", "AP50", "mean_ap", "loss_cls", "loss_l1", "loss_giou", "loss_dn_cls",
    "loss_dn_l1", "loss_dn_giou", "lr",
];
