//! Detection evaluation: matching, precision/recall, F-beta, COCO-style
//! average precision, confidence-threshold search and arctan curve fitting.

mod assignment;
mod threshold;

pub use assignment::{hungarian_match, Assignment};
pub use threshold::{best_threshold, default_threshold_grid, fit_arctan_schedule, ArctanFit, ThresholdChoice};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// IoU thresholds 0.50:0.05:0.95.
pub const COCO_IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Number of recall sample points used for interpolated AP.
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: usize, score: f64) -> Self {
        Detection { bbox, class_id, score }
    }
}

/// Ground-truth (or pseudo) labels of one image as parallel arrays.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
}

impl LabelSet {
    pub fn new(boxes: Vec<BBox>, classes: Vec<usize>) -> Result<Self> {
        if boxes.len() != classes.len() {
            return Err(Error::LengthMismatch { left: boxes.len(), right: classes.len() });
        }
        Ok(LabelSet { boxes, classes })
    }

    pub fn empty() -> Self {
        LabelSet::default()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn push(&mut self, bbox: BBox, class_id: usize) {
        self.boxes.push(bbox);
        self.classes.push(class_id);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BBox, usize)> {
        self.boxes.iter().zip(self.classes.iter().copied())
    }

    /// Detections turned into labels, dropping the scores.
    pub fn from_detections(dets: &[Detection]) -> Self {
        LabelSet {
            boxes: dets.iter().map(|d| d.bbox).collect(),
            classes: dets.iter().map(|d| d.class_id).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
}

/// Result of greedy score-ordered matching on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    /// Prediction indices in descending score order.
    pub order: Vec<usize>,
    /// TP flag per prediction, indexed like the input predictions.
    pub pred_tp: Vec<bool>,
    /// Matched flag per ground-truth box.
    pub gt_matched: Vec<bool>,
}

impl MatchOutcome {
    pub fn tp(&self) -> usize {
        self.pred_tp.iter().filter(|&&f| f).count()
    }

    pub fn fp(&self) -> usize {
        self.pred_tp.len() - self.tp()
    }

    pub fn counts(&self) -> MatchCounts {
        MatchCounts { tp: self.tp(), fp: self.fp(), n_gt: self.gt_matched.len() }
    }

    /// TP flags in ranking order.
    pub fn ranked_flags(&self) -> Vec<bool> {
        self.order.iter().map(|&i| self.pred_tp[i]).collect()
    }
}

/// Accumulated TP/FP/GT counts, summable across images.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub n_gt: usize,
}

impl std::ops::AddAssign for MatchCounts {
    fn add_assign(&mut self, o: MatchCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.n_gt += o.n_gt;
    }
}

/// Descending-score order, ties kept in input order.
fn score_order(preds: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    order
}

/// Greedy one-to-one matching: predictions in descending score order each
/// take the highest-IoU unmatched ground truth of the same class, provided
/// the IoU reaches `iou_thresh`.
pub fn match_at_iou(preds: &[Detection], gt: &LabelSet, iou_thresh: f64) -> MatchOutcome {
    let order = score_order(preds);
    let mut pred_tp = vec![false; preds.len()];
    let mut gt_matched = vec![false; gt.len()];
    for &pi in &order {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gb, gc)) in gt.iter().enumerate() {
            if gt_matched[gi] || gc != p.class_id {
                continue;
            }
            let o = iou(&p.bbox, gb);
            if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        if let Some((gi, _)) = best {
            gt_matched[gi] = true;
            pred_tp[pi] = true;
        }
    }
    MatchOutcome { order, pred_tp, gt_matched }
}

/// `P = TP/(TP+FP)`, 1 without predictions; `R = TP/#GT`, 1 without GT.
pub fn precision_recall(counts: &MatchCounts) -> PrPoint {
    let predicted = counts.tp + counts.fp;
    let precision = if predicted == 0 { 1.0 } else { counts.tp as f64 / predicted as f64 };
    let recall = if counts.n_gt == 0 { 1.0 } else { counts.tp as f64 / counts.n_gt as f64 };
    PrPoint { precision, recall }
}

/// Weighted harmonic mean of precision and recall.
pub fn f_beta(pr: PrPoint, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * pr.precision + pr.recall;
    if denom <= 0.0 {
        0.0
    } else {
        (1.0 + b2) * pr.precision * pr.recall / denom
    }
}

/// 101-point interpolated AP of a ranked TP/FP list against `n_gt`
/// ground-truth objects. Precision is replaced by its running maximum from
/// the right before sampling.
pub fn ap_from_ranked(ranked_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if ranked_tp.is_empty() { 1.0 } else { 0.0 };
    }
    let mut recall = Vec::with_capacity(ranked_tp.len());
    let mut precision = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (k, &hit) in ranked_tp.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0usize;
    for i in 0..RECALL_POINTS {
        let level = recall_level(i);
        while k < recall.len() && recall[k] < level {
            k += 1;
        }
        if k == recall.len() {
            break;
        }
        sum += precision[k];
    }
    sum / RECALL_POINTS as f64
}

pub(crate) fn recall_level(i: usize) -> f64 {
    i as f64 / (RECALL_POINTS - 1) as f64
}

/// AP of one image's predictions, all classes pooled into a single ranking
/// (matching stays class-aware).
pub fn average_precision(preds: &[Detection], gt: &LabelSet, iou_thresh: f64) -> f64 {
    let m = match_at_iou(preds, gt, iou_thresh);
    ap_from_ranked(&m.ranked_flags(), gt.len())
}

/// Dataset-level COCO summary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// Per-class AP over many scenes at one IoU threshold.
fn class_ap(preds: &[Vec<Detection>], gts: &[LabelSet], class_id: usize, iou_thresh: f64) -> Option<f64> {
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut n_gt = 0usize;
    for (s, (p, g)) in preds.iter().zip(gts).enumerate() {
        let pc: Vec<Detection> = p.iter().copied().filter(|d| d.class_id == class_id).collect();
        let gc = LabelSet {
            boxes: g.iter().filter(|(_, c)| *c == class_id).map(|(b, _)| *b).collect(),
            classes: vec![class_id; g.classes.iter().filter(|&&c| c == class_id).count()],
        };
        n_gt += gc.len();
        let m = match_at_iou(&pc, &gc, iou_thresh);
        for (rank, &i) in m.order.iter().enumerate() {
            ranked.push((pc[i].score, s, rank, m.pred_tp[i]));
        }
    }
    if n_gt == 0 {
        return None;
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let flags: Vec<bool> = ranked.iter().map(|r| r.3).collect();
    Some(ap_from_ranked(&flags, n_gt))
}

/// Class-averaged AP at one IoU threshold; classes without ground truth are
/// skipped, and 0 is returned when no class has any.
pub fn dataset_ap(preds: &[Vec<Detection>], gts: &[LabelSet], iou_thresh: f64) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch { left: preds.len(), right: gts.len() });
    }
    let n_classes = gts.iter().flat_map(|g| g.classes.iter()).max().map_or(0, |&c| c + 1);
    let aps: Vec<f64> = (0..n_classes).filter_map(|c| class_ap(preds, gts, c, iou_thresh)).collect();
    Ok(if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 })
}

/// mAP over IoU 0.50:0.95 together with AP50 and AP75.
pub fn coco_metrics(preds: &[Vec<Detection>], gts: &[LabelSet]) -> Result<MetricsRecord> {
    let mut per_thresh = [0.0; COCO_IOU_THRESHOLDS.len()];
    for (slot, &t) in per_thresh.iter_mut().zip(COCO_IOU_THRESHOLDS.iter()) {
        *slot = dataset_ap(preds, gts, t)?;
    }
    Ok(MetricsRecord {
        map: per_thresh.iter().sum::<f64>() / per_thresh.len() as f64,
        ap50: per_thresh[0],
        ap75: per_thresh[5],
    })
}

/// Summed match counts over many scenes.
pub fn dataset_counts(preds: &[Vec<Detection>], gts: &[LabelSet], iou_thresh: f64) -> MatchCounts {
    let mut total = MatchCounts::default();
    for (p, g) in preds.iter().zip(gts) {
        total += match_at_iou(p, g, iou_thresh).counts();
    }
    total
}
