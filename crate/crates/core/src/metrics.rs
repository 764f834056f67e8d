//! Overlap, detection matching and ranking metrics.

use serde::{Deserialize, Serialize};

use crate::geometry::TextBox;

/// Intersection over union of two boxes.
///
/// Axis-aligned pairs use the closed form. If either box is rotated, both are
/// rasterized on the 1-px grid (pixel centers at half-integers) and the pixel
/// counts are compared.
pub fn iou(a: &TextBox, b: &TextBox) -> f64 {
    if a.theta == 0.0 && b.theta == 0.0 {
        iou_axis_aligned(a, b)
    } else {
        iou_raster(a, b)
    }
}

fn iou_axis_aligned(a: &TextBox, b: &TextBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.bounds();
    let (bx0, by0, bx1, by1) = b.bounds();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Pixel-count IoU of two (possibly rotated) boxes on the 1-px grid.
pub fn iou_raster(a: &TextBox, b: &TextBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.bounds();
    let (bx0, by0, bx1, by1) = b.bounds();
    let x_lo = ax0.min(bx0).floor() as i64;
    let y_lo = ay0.min(by0).floor() as i64;
    let x_hi = ax1.max(bx1).ceil() as i64;
    let y_hi = ay1.max(by1).ceil() as i64;
    let (mut inter, mut union) = (0u64, 0u64);
    for py in y_lo..y_hi {
        let y = py as f64 + 0.5;
        for px in x_lo..x_hi {
            let x = px as f64 + 0.5;
            match (a.contains(x, y), b.contains(x, y)) {
                (true, true) => {
                    inter += 1;
                    union += 1;
                }
                (true, false) | (false, true) => union += 1,
                (false, false) => {}
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Outcome of matching one image's detections against its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Per detection (input order): matched ground-truth index, if a true positive.
    pub det_match: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchResult {
    pub fn is_tp(&self, det: usize) -> bool {
        self.det_match[det].is_some()
    }
}

/// Order of detections by descending score; ties keep input order.
pub fn score_order(dets: &[TextBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
    order
}

/// Greedy matching in descending score order. Each detection takes the unmatched
/// ground truth of highest IoU at or above `iou_thresh`; with `require_transcript`
/// the claim also needs an exact (case-sensitive) transcript match, otherwise the
/// detection is a false positive and the ground truth stays available.
pub fn match_detections(
    dets: &[TextBox],
    gts: &[TextBox],
    iou_thresh: f64,
    require_transcript: bool,
) -> MatchResult {
    let mut det_match = vec![None; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for i in score_order(dets) {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(j, _)| !gt_matched[*j])
            .map(|(j, g)| (j, iou(&dets[i], g)))
            .filter(|&(_, o)| o >= iou_thresh)
            .fold(None, |best: Option<(usize, f64)>, (j, o)| match best {
                Some((_, bo)) if bo >= o => best,
                _ => Some((j, o)),
            });
        if let Some((j, _)) = best {
            let text_ok = !require_transcript
                || matches!((&dets[i].transcript, &gts[j].transcript), (Some(a), Some(b)) if a == b);
            if text_ok {
                det_match[i] = Some(j);
                gt_matched[j] = true;
            }
        }
    }
    let tp = det_match.iter().filter(|m| m.is_some()).count();
    MatchResult {
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
        tp,
        det_match,
        gt_matched,
    }
}

/// A detection's score and whether it was a true positive, for global ranking.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedDetection {
    pub score: f64,
    pub tp: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    /// Set when there was no ground truth, in which case `ap` is reported as 0.
    pub undefined: bool,
}

/// Area under the precision-recall curve after making precision monotonically
/// non-increasing in recall. Detections from all images are ranked together.
pub fn average_precision(dets: &[RankedDetection], num_gts: usize) -> ApResult {
    if num_gts == 0 {
        return ApResult { ap: 0.0, undefined: true };
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &i in &order {
        if dets[i].tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gts as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ApResult {
        ap: ap.clamp(0.0, 1.0),
        undefined: false,
    }
}

/// Harmonic mean of precision and recall; 0 when there are no true positives.
pub fn f_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub image: String,
    pub detections: usize,
    pub ground_truth: usize,
    pub localization_tp: usize,
    pub end_to_end_tp: usize,
}

/// Dataset-level evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub localization_ap: f64,
    pub end_to_end_ap: f64,
    /// End-to-end f-score over all detections.
    pub f_score: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_threshold: f64,
    pub images: Vec<ImageReport>,
}

/// Scores a dataset of `(name, detections, ground truth)` triples.
pub fn evaluate<'a>(
    samples: impl IntoIterator<Item = (String, &'a [TextBox], &'a [TextBox])>,
    iou_thresh: f64,
) -> EvalReport {
    let (mut loc, mut e2e) = (Vec::new(), Vec::new());
    let (mut tp, mut fp, mut fn_, mut n_gt) = (0, 0, 0, 0);
    let mut images = Vec::new();
    for (name, dets, gts) in samples {
        let l = match_detections(dets, gts, iou_thresh, false);
        let e = match_detections(dets, gts, iou_thresh, true);
        for (k, d) in dets.iter().enumerate() {
            loc.push(RankedDetection { score: d.score, tp: l.is_tp(k) });
            e2e.push(RankedDetection { score: d.score, tp: e.is_tp(k) });
        }
        tp += e.tp;
        fp += e.fp;
        fn_ += e.fn_;
        n_gt += gts.len();
        images.push(ImageReport {
            image: name,
            detections: dets.len(),
            ground_truth: gts.len(),
            localization_tp: l.tp,
            end_to_end_tp: e.tp,
        });
    }
    EvalReport {
        localization_ap: average_precision(&loc, n_gt).ap,
        end_to_end_ap: average_precision(&e2e, n_gt).ap,
        f_score: f_score(tp, fp, fn_),
        tp,
        fp,
        fn_,
        iou_threshold: iou_thresh,
        images,
    }
}
