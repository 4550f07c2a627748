//! Training objectives.
//!
//! The matching part is supervised through an optimal assignment to the
//! ground truth (the Hungarian loss); the denoising part is supervised
//! directly by the object each query was noised from, with no matching.
//! Both apply focal classification plus L1 and GIoU box terms at every
//! decoder layer.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::denoising::{GtObject, QueryBatch};
use crate::geometry::{giou, BBox};
use crate::matching::{build_cost_matrix, hungarian_assign, Assignment, MatchWeights};
use crate::model::{DecoderOutput, LayerOutput};

/// Probability floor used by [`focal_loss`].
pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Coefficient of the denoising loss relative to the Hungarian loss.
    pub denoising: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 1.0,
            l1: 5.0,
            giou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            denoising: 1.0,
        }
    }
}

/// Unweighted components, summed over decoder layers, plus the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub dn_cls: f64,
    pub dn_l1: f64,
    pub dn_giou: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.cls, self.l1, self.giou, self.dn_cls, self.dn_l1, self.dn_giou, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, o: &LossBreakdown) {
        self.cls += o.cls;
        self.l1 += o.l1;
        self.giou += o.giou;
        self.dn_cls += o.dn_cls;
        self.dn_l1 += o.dn_l1;
        self.dn_giou += o.dn_giou;
        self.total += o.total;
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            cls: self.cls * k,
            l1: self.l1 * k,
            giou: self.giou * k,
            dn_cls: self.dn_cls * k,
            dn_l1: self.dn_l1 * k,
            dn_giou: self.dn_giou * k,
            total: self.total * k,
        }
    }
}

/// `-alpha * (1 - p_t)^gamma * ln(p_t)` with `p_t` floored at [`PROB_FLOOR`].
pub fn focal_loss(p_t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p_t.clamp(PROB_FLOOR, 1.0);
    -alpha * (1.0 - p).powf(gamma) * p.ln()
}

/// Focal loss of one query's class probabilities against a one-hot target
/// (`None` for background), summed over classes.
pub fn focal_over_classes(probs: &[f64], target: Option<usize>, alpha: f64, gamma: f64) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(c, &p)| {
            if Some(c) == target {
                focal_loss(p, alpha, gamma)
            } else {
                focal_loss(1.0 - p, 1.0 - alpha, gamma)
            }
        })
        .sum()
}

/// `(L1 in center form, 1 - GIoU)`.
pub fn box_losses(pred: &BBox, target: &BBox) -> (f64, f64) {
    (pred.l1(target), 1.0 - giou(pred, target))
}

/// Graph terms of one supervised part at one layer.
struct PartTerms {
    cls: Var,
    l1: Option<Var>,
    giou: Option<Var>,
}

/// Focal + box terms for `rows` of `(logits, boxes)` supervised by `targets`.
///
/// `class_targets` has one row per logit row; `box_rows` picks the rows that
/// carry a box target, in the order of `box_targets`.
fn part_terms(
    g: &mut Graph,
    logits: Var,
    boxes: Var,
    class_targets: Tensor,
    box_rows: Vec<usize>,
    box_targets: &[BBox],
    w: &LossWeights,
) -> PartTerms {
    let cls = g.sigmoid_focal(logits, class_targets, w.focal_alpha, w.focal_gamma);
    if box_rows.is_empty() {
        return PartTerms {
            cls,
            l1: None,
            giou: None,
        };
    }
    let target = Tensor::from_shape_fn((box_targets.len(), 4), |(i, j)| box_targets[i].as_array()[j]);
    let picked = g.gather_rows(boxes, box_rows);
    let l1 = g.l1_to(picked, target.clone());
    let gl = g.giou_loss_to(picked, target);
    PartTerms {
        cls,
        l1: Some(l1),
        giou: Some(gl),
    }
}

/// Accumulates weighted terms into one scalar node.
struct Accumulator {
    total: Option<Var>,
}

impl Accumulator {
    fn new() -> Self {
        Self {
            total: None,
        }
    }

    fn add(&mut self, g: &mut Graph, term: Var, norm: f64, weight: f64) -> f64 {
        let scaled = g.scale(term, weight / norm);
        self.total = Some(match self.total {
            Some(t) => g.add(t, scaled),
            None => scaled,
        });
        g.scalar_value(term) / norm
    }
}

/// Matching for one layer's matching part against `gts`.
pub fn match_layer(
    g: &Graph,
    layer: &LayerOutput,
    dn_len: usize,
    gts: &[GtObject],
    weights: &MatchWeights,
) -> Assignment {
    let logits = g.value(layer.logits);
    let boxes = g.value(layer.boxes);
    let n_classes = logits.ncols();
    let probs: Vec<f64> = logits
        .slice(ndarray::s![dn_len.., ..])
        .iter()
        .map(|&x| 1.0 / (1.0 + (-x).exp()))
        .collect();
    let pred_boxes: Vec<BBox> = boxes
        .slice(ndarray::s![dn_len.., ..])
        .axis_iter(Axis(0))
        .map(|r| BBox::new(r[0], r[1], r[2], r[3]))
        .collect();
    let cost = build_cost_matrix(&probs, n_classes, &pred_boxes, gts, weights)
        .expect("decoder outputs are finite and consistently shaped");
    hungarian_assign(&cost).0
}

/// Scalar node and breakdown of a loss.
pub struct LossOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Hungarian loss of the matching part, summed over decoder layers.
///
/// Returns the weighted scalar node, the unweighted `(cls, l1, giou)` sums and
/// each layer's assignment.
pub fn hungarian_loss(
    g: &mut Graph,
    out: &DecoderOutput,
    gts: &[GtObject],
    match_weights: &MatchWeights,
    w: &LossWeights,
) -> (Var, [f64; 3], Vec<Assignment>) {
    let dn = out.dn_len;
    let norm = gts.len().max(1) as f64;
    let mut acc = Accumulator::new();
    let mut sums = [0.0; 3];
    let mut assignments = Vec::with_capacity(out.layers.len());
    for layer in &out.layers {
        let assignment = match_layer(g, layer, dn, gts, match_weights);
        let logits = g.slice_rows(layer.logits, dn, out.width);
        let boxes = g.slice_rows(layer.boxes, dn, out.width);
        let (rows, n_classes) = g.shape(logits);
        let mut class_targets = Tensor::zeros((rows, n_classes));
        let mut box_rows = Vec::with_capacity(assignment.len());
        let mut box_targets = Vec::with_capacity(assignment.len());
        for &(n, m) in &assignment.pairs {
            class_targets[[n, gts[m].label]] = 1.0;
            box_rows.push(n);
            box_targets.push(gts[m].bbox);
        }
        let terms = part_terms(g, logits, boxes, class_targets, box_rows, &box_targets, w);
        sums[0] += acc.add(g, terms.cls, norm, w.class);
        if let (Some(l1), Some(gl)) = (terms.l1, terms.giou) {
            sums[1] += acc.add(g, l1, norm, w.l1);
            sums[2] += acc.add(g, gl, norm, w.giou);
        }
        assignments.push(assignment);
    }
    let total = acc.total.expect("decoder has at least one layer");
    (total, sums, assignments)
}

/// Reconstruction loss of the denoising part, averaged over its queries and
/// summed over layers. Query `k` is supervised by the original object
/// `batch.dn_targets[k]`, label included even when its input label was
/// flipped. `None` when there is no denoising part.
pub fn denoising_loss(
    g: &mut Graph,
    out: &DecoderOutput,
    batch: &QueryBatch,
    gts: &[GtObject],
    w: &LossWeights,
) -> Option<(Var, [f64; 3])> {
    let dn = out.dn_len;
    if dn == 0 {
        return None;
    }
    let norm = dn as f64;
    let mut acc = Accumulator::new();
    let mut sums = [0.0; 3];
    let box_targets: Vec<BBox> = batch.dn_targets.iter().map(|&m| gts[m].bbox).collect();
    for layer in &out.layers {
        let logits = g.slice_rows(layer.logits, 0, dn);
        let boxes = g.slice_rows(layer.boxes, 0, dn);
        let n_classes = g.shape(logits).1;
        let mut class_targets = Tensor::zeros((dn, n_classes));
        for (k, &m) in batch.dn_targets.iter().enumerate() {
            class_targets[[k, gts[m].label]] = 1.0;
        }
        let terms = part_terms(g, logits, boxes, class_targets, (0..dn).collect(), &box_targets, w);
        sums[0] += acc.add(g, terms.cls, norm, w.class);
        sums[1] += acc.add(g, terms.l1.expect("box terms"), norm, w.l1);
        sums[2] += acc.add(g, terms.giou.expect("box terms"), norm, w.giou);
    }
    acc.total.map(|t| (t, sums))
}

/// Hungarian loss plus weighted denoising loss.
pub fn total_loss(
    g: &mut Graph,
    out: &DecoderOutput,
    batch: &QueryBatch,
    gts: &[GtObject],
    match_weights: &MatchWeights,
    w: &LossWeights,
) -> LossOutput {
    let (h, hs, _) = hungarian_loss(g, out, gts, match_weights, w);
    let mut breakdown = LossBreakdown {
        cls: hs[0],
        l1: hs[1],
        giou: hs[2],
        ..LossBreakdown::default()
    };
    let total = match denoising_loss(g, out, batch, gts, w) {
        Some((d, ds)) => {
            breakdown.dn_cls = ds[0];
            breakdown.dn_l1 = ds[1];
            breakdown.dn_giou = ds[2];
            let d = g.scale(d, w.denoising);
            g.add(h, d)
        }
        None => h,
    };
    breakdown.total = g.scalar_value(total);
    LossOutput { total, breakdown }
}
