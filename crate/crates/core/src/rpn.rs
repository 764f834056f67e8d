//! Anchors, box deltas, proposal scoring and the second-stage box head.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, Level};
use crate::error::{Error, Result};
use crate::geometry::{Label, TextBox};
use crate::metrics::iou;
use crate::nn::{Conv, Init, Linear};
use crate::roi::roi_align_batch;
use crate::tensor::{Conv2dSpec, Graph, ParamStore, Var};

/// Width-to-height ratios of the anchors at every cell.
pub const ASPECT_RATIOS: [f64; 3] = [1.0, 2.0, 4.0];

/// Largest log-scale extent change allowed when decoding.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Pooled grid of the classification/regression head.
pub const BOX_POOL: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpnConfig {
    /// Predict an angle per box.
    pub rotation: bool,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub proposal_nms: f64,
    pub inference_nms: f64,
    pub p2_base_size: f64,
    pub p3_base_size: f64,
    /// Anchors sampled per image for the objectness loss.
    pub anchor_batch: usize,
    pub pre_nms_top: usize,
    pub post_nms_top: usize,
    /// RoIs sampled per image for the box head, a quarter of them positive.
    pub roi_batch: usize,
    pub roi_fg_iou: f64,
    pub head_hidden: usize,
}

impl Default for RpnConfig {
    fn default() -> Self {
        RpnConfig {
            rotation: false,
            pos_iou: 0.7,
            neg_iou: 0.3,
            proposal_nms: 0.7,
            inference_nms: 0.3,
            p2_base_size: 16.0,
            p3_base_size: 32.0,
            anchor_batch: 256,
            pre_nms_top: 300,
            post_nms_top: 50,
            roi_batch: 32,
            roi_fg_iou: 0.5,
            head_hidden: 128,
        }
    }
}

impl RpnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pos_iou > self.neg_iou) {
            return Err(Error::Config("pos_iou must exceed neg_iou".into()));
        }
        if self.p2_base_size <= 0.0 || self.p3_base_size <= 0.0 {
            return Err(Error::Config("anchor base sizes must be positive".into()));
        }
        if self.anchor_batch == 0 || self.roi_batch == 0 || self.post_nms_top == 0 || self.head_hidden == 0 {
            return Err(Error::Config("rpn batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn delta_dim(&self) -> usize {
        if self.rotation {
            5
        } else {
            4
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub level: Level,
}

impl Anchor {
    pub fn as_box(&self) -> TextBox {
        TextBox::new(self.cx, self.cy, self.w, self.h)
    }
}

/// One anchor per (cell, ratio), cells in row-major order; each has area `base_size²`.
pub fn generate_anchors(level: Level, stride: usize, (h, w): (usize, usize), base_size: f64) -> Vec<Anchor> {
    let s = stride as f64;
    let mut out = Vec::with_capacity(h * w * ASPECT_RATIOS.len());
    for y in 0..h {
        for x in 0..w {
            for r in ASPECT_RATIOS {
                out.push(Anchor {
                    cx: (x as f64 + 0.5) * s,
                    cy: (y as f64 + 0.5) * s,
                    w: base_size * r.sqrt(),
                    h: base_size / r.sqrt(),
                    level,
                });
            }
        }
    }
    out
}

/// Anchors for a feature map on a graph.
pub fn anchors_for(g: &Graph, map: &FeatureMap, base_size: f64) -> Vec<Anchor> {
    let s = g.shape(map.tensor);
    generate_anchors(map.level, map.stride, (s[0], s[1]), base_size)
}

/// Regression target relative to a reference box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
    pub ttheta: Option<f64>,
}

impl BoxDelta {
    pub fn to_vec(&self, dim: usize) -> Vec<f64> {
        let mut v = vec![self.tx, self.ty, self.tw, self.th];
        if dim == 5 {
            v.push(self.ttheta.unwrap_or(0.0));
        }
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BoxDelta {
            tx: v[0],
            ty: v[1],
            tw: v[2],
            th: v[3],
            ttheta: v.get(4).copied(),
        }
    }
}

/// `(cx - cx_a)/w_a, (cy - cy_a)/h_a, ln(w/w_a), ln(h/h_a), θ - θ_a`.
pub fn encode_box(gt: &TextBox, reference: &TextBox, rotation: bool) -> BoxDelta {
    BoxDelta {
        tx: (gt.cx - reference.cx) / reference.w,
        ty: (gt.cy - reference.cy) / reference.h,
        tw: (gt.w / reference.w).ln(),
        th: (gt.h / reference.h).ln(),
        ttheta: rotation.then(|| gt.theta - reference.theta),
    }
}

pub fn decode_box(d: &BoxDelta, reference: &TextBox) -> TextBox {
    let theta = match d.ttheta {
        Some(t) => reference.theta + t,
        None => 0.0,
    };
    TextBox {
        cx: reference.cx + d.tx * reference.w,
        cy: reference.cy + d.ty * reference.h,
        w: reference.w * d.tw.min(MAX_LOG_SCALE).exp(),
        h: reference.h * d.th.min(MAX_LOG_SCALE).exp(),
        theta,
        ..TextBox::new(0.0, 0.0, 1.0, 1.0)
    }
}

pub fn encode_deltas(gt: &TextBox, anchor: &Anchor, rotation: bool) -> BoxDelta {
    encode_box(gt, &anchor.as_box(), rotation)
}

pub fn decode_deltas(d: &BoxDelta, anchor: &Anchor) -> TextBox {
    decode_box(d, &anchor.as_box())
}

/// Greedy non-maximum suppression. Output is in descending score order.
pub fn nms(boxes: &[TextBox], iou_threshold: f64) -> Vec<TextBox> {
    nms_indices(boxes, iou_threshold).into_iter().map(|i| boxes[i].clone()).collect()
}

pub fn nms_indices(boxes: &[TextBox], iou_threshold: f64) -> Vec<usize> {
    let order = crate::metrics::score_order(boxes);
    let bounds: Vec<_> = boxes.iter().map(TextBox::bounds).collect();
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[k + 1..] {
            if suppressed[j] {
                continue;
            }
            let (a, b) = (bounds[i], bounds[j]);
            if a.2 <= b.0 || b.2 <= a.0 || a.3 <= b.1 || b.3 <= a.1 {
                continue;
            }
            if iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

/// Axis-aligned IoU between an anchor and the enclosing rectangle of a box.
fn anchor_iou(a: &Anchor, gt_bounds: (f64, f64, f64, f64)) -> f64 {
    let (gx0, gy0, gx1, gy1) = gt_bounds;
    let (ax0, ay0) = (a.cx - a.w / 2.0, a.cy - a.h / 2.0);
    let (ax1, ay1) = (a.cx + a.w / 2.0, a.cy + a.h / 2.0);
    let iw = (ax1.min(gx1) - ax0.max(gx0)).max(0.0);
    let ih = (ay1.min(gy1) - ay0.max(gy0)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + (gx1 - gx0) * (gy1 - gy0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Labels anchors for objectness training. Assignment uses axis-aligned IoU
/// against each ground truth's enclosing rectangle, even in rotation mode.
pub fn assign_rpn_targets(anchors: &[Anchor], gts: &[TextBox], pos_iou: f64, neg_iou: f64) -> Vec<AnchorLabel> {
    if gts.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let bounds: Vec<_> = gts.iter().map(TextBox::bounds).collect();
    let mut best_gt = vec![(0usize, 0.0f64); anchors.len()];
    let mut best_anchor = vec![0.0f64; gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (j, &b) in bounds.iter().enumerate() {
            let o = anchor_iou(a, b);
            if o > best_gt[i].1 {
                best_gt[i] = (j, o);
            }
            best_anchor[j] = best_anchor[j].max(o);
        }
    }
    let mut labels: Vec<AnchorLabel> = best_gt
        .iter()
        .map(|&(j, o)| {
            if o >= pos_iou {
                AnchorLabel::Positive(j)
            } else if o < neg_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    // Every ground truth keeps its best anchors, ties included.
    for (i, a) in anchors.iter().enumerate() {
        for (j, &b) in bounds.iter().enumerate() {
            if best_anchor[j] > 0.0 && anchor_iou(a, b) == best_anchor[j] {
                if !matches!(labels[i], AnchorLabel::Positive(_)) {
                    labels[i] = AnchorLabel::Positive(j);
                }
            }
        }
    }
    labels
}

/// Subsamples labelled indices to at most `batch`, up to half of them positive.
pub fn sample_anchors(labels: &[AnchorLabel], batch: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| matches!(labels[i], AnchorLabel::Positive(_))).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == AnchorLabel::Negative).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(batch / 2);
    neg.truncate(batch - pos.len());
    let mut out = pos;
    out.extend(neg);
    out.sort_unstable();
    out
}

/// RPN outputs over P2 and P3, rows ordered P2 anchors then P3 anchors.
pub struct RpnOutput {
    /// `N` objectness logits.
    pub objectness: Var,
    /// `N x D` deltas.
    pub deltas: Var,
    pub anchors: Vec<Anchor>,
}

#[derive(Clone, Debug)]
pub struct RpnHead {
    shared: Conv,
    objectness: Conv,
    deltas: Conv,
    delta_dim: usize,
}

impl RpnHead {
    pub fn new(store: &mut ParamStore, channels: usize, cfg: &RpnConfig, rng: &mut impl Rng) -> Result<Self> {
        let a = ASPECT_RATIOS.len();
        let d = cfg.delta_dim();
        Ok(RpnHead {
            shared: Conv::new(store, "rpn.shared", (3, 3), channels, channels, Conv2dSpec::new(1, 1), Init::He, rng)?,
            objectness: Conv::new(store, "rpn.objectness", (1, 1), channels, a, Conv2dSpec::new(1, 0), Init::Normal(0.01), rng)?,
            deltas: Conv::new(store, "rpn.deltas", (1, 1), channels, a * d, Conv2dSpec::new(1, 0), Init::Normal(0.01), rng)?,
            delta_dim: d,
        })
    }

    pub fn forward(&self, g: &mut Graph, p2: &FeatureMap, p3: &FeatureMap, cfg: &RpnConfig) -> Result<RpnOutput> {
        let mut objs = Vec::new();
        let mut dels = Vec::new();
        let mut anchors = Vec::new();
        for (map, base) in [(p2, cfg.p2_base_size), (p3, cfg.p3_base_size)] {
            let level_anchors = anchors_for(g, map, base);
            let n = level_anchors.len();
            anchors.extend(level_anchors);
            let h = self.shared.forward_relu(g, map.tensor)?;
            let o = self.objectness.forward(g, h)?;
            objs.push(g.reshape(o, &[n, 1])?);
            let d = self.deltas.forward(g, h)?;
            dels.push(g.reshape(d, &[n, self.delta_dim])?);
        }
        let obj = g.concat_rows(&objs)?;
        let n = anchors.len();
        let objectness = g.reshape(obj, &[n])?;
        let deltas = g.concat_rows(&dels)?;
        Ok(RpnOutput { objectness, deltas, anchors })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes, clips, ranks and suppresses RPN outputs into proposals.
pub fn proposals(g: &Graph, out: &RpnOutput, cfg: &RpnConfig, image_hw: (usize, usize)) -> Vec<TextBox> {
    let obj = g.value(out.objectness).data();
    let del = g.value(out.deltas);
    let d = del.last_dim();
    let (ih, iw) = (image_hw.0 as f64, image_hw.1 as f64);
    let mut order: Vec<usize> = (0..obj.len()).collect();
    order.sort_by(|&a, &b| obj[b].total_cmp(&obj[a]).then(a.cmp(&b)));
    order.truncate(cfg.pre_nms_top);
    let boxes: Vec<TextBox> = order
        .iter()
        .map(|&i| {
            let delta = BoxDelta::from_slice(&del.data()[i * d..(i + 1) * d]);
            let mut b = decode_deltas(&delta, &out.anchors[i]);
            b.theta = b.theta.clamp(-std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_4);
            b.clipped(iw, ih).with_score(sigmoid(obj[i]))
        })
        .collect();
    let mut kept = nms(&boxes, cfg.proposal_nms);
    kept.truncate(cfg.post_nms_top);
    kept
}

/// Second-stage text/background classifier and box refiner over P2.
#[derive(Clone, Debug)]
pub struct BoxHead {
    fc1: Linear,
    fc2: Linear,
    cls: Linear,
    reg: Linear,
}

pub struct BoxHeadOutput {
    /// `N x 2` logits, column 0 background, column 1 text.
    pub class_logits: Var,
    /// `N x D` refinement deltas relative to each proposal.
    pub deltas: Var,
}

impl BoxHead {
    pub fn new(store: &mut ParamStore, channels: usize, cfg: &RpnConfig, rng: &mut impl Rng) -> Result<Self> {
        let n_in = BOX_POOL * BOX_POOL * channels;
        let hdim = cfg.head_hidden;
        Ok(BoxHead {
            fc1: Linear::new(store, "box_head.fc1", n_in, hdim, Init::He, rng)?,
            fc2: Linear::new(store, "box_head.fc2", hdim, hdim, Init::He, rng)?,
            cls: Linear::new(store, "box_head.cls", hdim, 2, Init::Normal(0.01), rng)?,
            reg: Linear::new(store, "box_head.reg", hdim, cfg.delta_dim(), Init::Normal(0.001), rng)?,
        })
    }

    /// Parameters of the two output layers (class, regression), for tests and inspection.
    pub fn output_layers(&self) -> (&Linear, &Linear) {
        (&self.cls, &self.reg)
    }

    /// Class logits and refinement deltas per proposal; `None` for no proposals.
    pub fn classify_and_refine(&self, g: &mut Graph, p2: &FeatureMap, proposals: &[TextBox]) -> Result<Option<BoxHeadOutput>> {
        if proposals.is_empty() {
            return Ok(None);
        }
        let rows = roi_align_batch(g, p2, proposals, BOX_POOL, BOX_POOL)?;
        let c = g.shape(rows)[1];
        let flat = g.reshape(rows, &[proposals.len(), BOX_POOL * BOX_POOL * c])?;
        let h = self.fc1.forward(g, flat)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, h)?;
        let h = g.relu(h);
        Ok(Some(BoxHeadOutput {
            class_logits: self.cls.forward(g, h)?,
            deltas: self.reg.forward(g, h)?,
        }))
    }
}

/// Per-RoI training target for the box head.
#[derive(Clone, Debug)]
pub struct RoiTarget {
    pub proposal: TextBox,
    /// Matched ground truth for text RoIs.
    pub gt: Option<usize>,
}

/// Mixes ground truth into the proposals, labels each by IoU and samples a 1:3
/// text:background batch.
pub fn sample_rois(proposals: &[TextBox], gts: &[TextBox], cfg: &RpnConfig, rng: &mut impl Rng) -> Vec<RoiTarget> {
    let mut candidates: Vec<TextBox> = proposals.to_vec();
    for gt in gts {
        let mut b = gt.clone();
        if !cfg.rotation {
            b = b.axis_aligned();
        }
        b.label = Label::Text;
        candidates.push(b);
    }
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for b in candidates {
        let best = gts
            .iter()
            .enumerate()
            .map(|(j, g)| (j, iou(&b, g)))
            .fold(None, |acc: Option<(usize, f64)>, (j, o)| match acc {
                Some((_, bo)) if bo >= o => acc,
                _ => Some((j, o)),
            });
        match best {
            Some((j, o)) if o >= cfg.roi_fg_iou => fg.push(RoiTarget { proposal: b, gt: Some(j) }),
            _ => bg.push(RoiTarget { proposal: b, gt: None }),
        }
    }
    fg.shuffle(rng);
    bg.shuffle(rng);
    fg.truncate(cfg.roi_batch / 4);
    bg.truncate(cfg.roi_batch - fg.len());
    fg.extend(bg);
    fg
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn anchor_counts_and_shapes() {
        let a = generate_anchors(Level::P2, 4, (2, 2), 16.0);
        assert_eq!(a.len(), 12);
        let sq = a[0];
        assert!((sq.w - 16.0).abs() < 1e-12 && (sq.h - 16.0).abs() < 1e-12);
        let wide = a[2];
        assert!((wide.w - 32.0).abs() < 1e-12 && (wide.h - 8.0).abs() < 1e-12);
        for x in &a {
            let r = x.w / x.h;
            assert!(ASPECT_RATIOS.iter().any(|t| (r - t).abs() < 1e-9));
            assert!((x.w * x.h - 256.0).abs() < 1e-9);
        }
        assert_eq!((a[3].cx, a[3].cy), (6.0, 2.0));
    }

    #[test]
    fn delta_examples() {
        let anchor = Anchor { cx: 8.0, cy: 8.0, w: 16.0, h: 16.0, level: Level::P2 };
        let d = encode_deltas(&anchor.as_box(), &anchor, false);
        assert_eq!((d.tx, d.ty, d.tw, d.th), (0.0, 0.0, 0.0, 0.0));
        let gt = TextBox::new(12.0, 8.0, 32.0, 16.0);
        let d = encode_deltas(&gt, &anchor, false);
        assert_eq!(d.tx, 0.25);
        assert_eq!(d.ty, 0.0);
        assert!((d.tw - 2f64.ln()).abs() < 1e-15);
        assert_eq!(d.th, 0.0);
        let back = decode_deltas(&d, &anchor);
        assert!((back.w - 32.0).abs() < 1e-12 && back.theta == 0.0);
    }

    #[test]
    fn assignment_examples() {
        let anchors = generate_anchors(Level::P2, 4, (4, 4), 16.0);
        assert!(assign_rpn_targets(&anchors, &[], 0.7, 0.3).iter().all(|l| *l == AnchorLabel::Negative));
        let gt = anchors[5].as_box();
        let labels = assign_rpn_targets(&anchors, &[gt], 0.7, 0.3);
        assert_eq!(labels[5], AnchorLabel::Positive(0));
    }

    #[test]
    fn nms_examples() {
        let a = TextBox::new(10.0, 10.0, 10.0, 10.0).with_score(0.9);
        let b = a.clone().with_score(0.8);
        assert_eq!(nms(&[a.clone(), b], 0.5).len(), 1);
        let far = TextBox::new(50.0, 50.0, 10.0, 10.0).with_score(0.95);
        let out = nms(&[a.clone(), far.clone()], 0.5);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], far);
    }

    #[test]
    fn anchor_sampling_respects_budget() {
        let mut labels = vec![AnchorLabel::Negative; 500];
        for l in labels.iter_mut().take(200) {
            *l = AnchorLabel::Positive(0);
        }
        labels[300] = AnchorLabel::Ignore;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_anchors(&labels, 256, &mut rng);
        assert_eq!(s.len(), 256);
        let pos = s.iter().filter(|&&i| matches!(labels[i], AnchorLabel::Positive(_))).count();
        assert_eq!(pos, 128);
        assert!(!s.contains(&300));
    }
}
