//! The full two-stage text spotting network, its multi-task loss and inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeatureMap, Fpn};
use crate::config::{InferConfig, ModelConfig, TrainConfig};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::geometry::{Label, TextBox};
use crate::recognition::{attention_loss, build_char_center_mask, ctc_greedy_decode, ctc_loss, RecognitionHead};
use crate::roi::roi_recognition_align;
use crate::rpn::{
    assign_rpn_targets, decode_box, encode_box, encode_deltas, proposals, sample_anchors, sample_rois, AnchorLabel,
    BoxDelta, BoxHead, RpnHead,
};
use crate::tensor::{Gradients, Graph, ParamStore, Tensor, Var};

/// Transition point of the smooth-L1 box loss.
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

/// Loss components of one image or the mean over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskLoss {
    pub rpn_objectness: f64,
    pub rpn_box: f64,
    pub cls: f64,
    pub box_refine: f64,
    pub ctc: f64,
    pub attention: f64,
    pub total: f64,
}

impl MultiTaskLoss {
    pub fn components(&self) -> [f64; 6] {
        [self.rpn_objectness, self.rpn_box, self.cls, self.box_refine, self.ctc, self.attention]
    }

    pub fn add_scaled(&mut self, o: &MultiTaskLoss, s: f64) {
        self.rpn_objectness += s * o.rpn_objectness;
        self.rpn_box += s * o.rpn_box;
        self.cls += s * o.cls;
        self.box_refine += s * o.box_refine;
        self.ctc += s * o.ctc;
        self.attention += s * o.attention;
        self.total += s * o.total;
    }
}

/// Loss terms recorded on a graph.
pub struct LossVars {
    pub rpn_objectness: Var,
    pub rpn_box: Var,
    pub cls: Var,
    pub box_refine: Var,
    pub ctc: Var,
    pub attention: Var,
    pub total: Var,
    /// Lines whose transcript could not fit the recognition width.
    pub infeasible_lines: usize,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> MultiTaskLoss {
        let v = |x: Var| g.value(x).item();
        MultiTaskLoss {
            rpn_objectness: v(self.rpn_objectness),
            rpn_box: v(self.rpn_box),
            cls: v(self.cls),
            box_refine: v(self.box_refine),
            ctc: v(self.ctc),
            attention: v(self.attention),
            total: v(self.total),
        }
    }
}

/// A detected text line.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub text_box: TextBox,
    pub attention: Option<Vec<f64>>,
    pub valid_width: usize,
}

/// Recognition of one given box.
#[derive(Clone, Debug, PartialEq)]
pub struct Recognition {
    pub text: String,
    pub attention: Option<Vec<f64>>,
    pub valid_width: usize,
}

pub struct Features {
    pub c2: FeatureMap,
    pub c3: FeatureMap,
    pub p2: FeatureMap,
    pub p3: FeatureMap,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub fpn: Fpn,
    pub rpn_head: RpnHead,
    pub box_head: BoxHead,
    pub rec_head: RecognitionHead,
}

fn bce_with_logits(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < SMOOTH_L1_BETA {
        (0.5 * x * x / SMOOTH_L1_BETA, x / SMOOTH_L1_BETA)
    } else {
        (x.abs() - 0.5 * SMOOTH_L1_BETA, x.signum())
    }
}

/// Mean binary cross-entropy of selected logits against 0/1 labels.
pub fn objectness_loss(g: &mut Graph, logits: Var, picks: &[(usize, f64)]) -> Var {
    let x = g.value(logits);
    let mut grad = Tensor::zeros(x.shape());
    if picks.is_empty() {
        return g.fused_scalar(0.0, vec![(logits, grad)]);
    }
    let n = picks.len() as f64;
    let mut loss = 0.0;
    for &(i, y) in picks {
        let v = x.data()[i];
        loss += bce_with_logits(v, y);
        grad.data_mut()[i] += (crate::rpn::sigmoid(v) - y) / n;
    }
    g.fused_scalar(loss / n, vec![(logits, grad)])
}

/// Smooth-L1 between selected rows of `pred` (`N x D`) and targets, divided by `norm`.
pub fn box_loss(g: &mut Graph, pred: Var, rows: &[(usize, Vec<f64>)], norm: f64) -> Var {
    let p = g.value(pred);
    let d = p.last_dim();
    let mut grad = Tensor::zeros(p.shape());
    let mut loss = 0.0;
    for (r, target) in rows {
        for (k, t) in target.iter().enumerate() {
            let (l, dl) = smooth_l1(p.data()[r * d + k] - t);
            loss += l;
            grad.data_mut()[r * d + k] += dl / norm;
        }
    }
    g.fused_scalar(loss / norm, vec![(pred, grad)])
}

/// Mean softmax cross-entropy of `N x K` logits.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Var {
    let x = g.value(logits);
    let k = x.last_dim();
    let n = labels.len().max(1) as f64;
    let mut grad = x.data().to_vec();
    let mut loss = 0.0;
    for (row, &y) in grad.chunks_mut(k).zip(labels) {
        crate::tensor::log_softmax_in_place(row);
        loss -= row[y];
        for (c, v) in row.iter_mut().enumerate() {
            *v = (v.exp() - if c == y { 1.0 } else { 0.0 }) / n;
        }
    }
    let grad = Tensor::new(x.shape().to_vec(), grad).expect("same shape");
    g.fused_scalar(loss / n, vec![(logits, grad)])
}

/// Pads an image on the right and bottom with white up to a size the backbone accepts.
pub fn pad_for_backbone(image: &Tensor) -> Result<Tensor> {
    let &[h, w, 3] = image.shape() else {
        return Err(Error::Shape(format!("image must be HxWx3, got {:?}", image.shape())));
    };
    let ph = h.max(32).div_ceil(8) * 8;
    let pw = w.max(32).div_ceil(8) * 8;
    if (ph, pw) == (h, w) {
        return Ok(image.clone());
    }
    let mut out = Tensor::full(&[ph, pw, 3], 1.0);
    for y in 0..h {
        out.data_mut()[y * pw * 3..(y * pw + w) * 3].copy_from_slice(&image.data()[y * w * 3..(y + 1) * w * 3]);
    }
    Ok(out)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config.backbone, &mut rng)?;
        let fpn = Fpn::new(&mut store, &config.backbone, &mut rng)?;
        let f = config.backbone.fpn_channels;
        let rpn_head = RpnHead::new(&mut store, f, &config.rpn, &mut rng)?;
        let box_head = BoxHead::new(&mut store, f, &config.rpn, &mut rng)?;
        let rec_head = RecognitionHead::new(
            &mut store,
            config.backbone.block_channels(),
            config.alphabet.num_classes(),
            &config.recognition,
            &mut rng,
        )?;
        Ok(Model {
            config,
            store,
            backbone,
            fpn,
            rpn_head,
            box_head,
            rec_head,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_values()
    }

    pub fn features(&self, g: &mut Graph, image: Var) -> Result<Features> {
        let (c2, c3) = self.backbone.forward(g, image)?;
        let (p2, p3) = self.fpn.forward(g, &c2, &c3)?;
        Ok(Features { c2, c3, p2, p3 })
    }

    /// Records the six loss components of one sample on `g`.
    pub fn compute_total_loss(&self, g: &mut Graph, sample: &Sample, train: &TrainConfig, rng: &mut impl Rng) -> Result<LossVars> {
        let cfg = &self.config.rpn;
        let image = g.constant(sample.image.clone());
        let f = self.features(g, image)?;
        let (ih, iw) = (sample.image.shape()[0], sample.image.shape()[1]);
        let det_gts: Vec<TextBox> = sample
            .boxes
            .iter()
            .map(|b| if cfg.rotation { b.clone() } else { b.axis_aligned() })
            .collect();

        // Region proposal losses.
        let rpn = self.rpn_head.forward(g, &f.p2, &f.p3, cfg)?;
        let labels = assign_rpn_targets(&rpn.anchors, &det_gts, cfg.pos_iou, cfg.neg_iou);
        let picked = sample_anchors(&labels, cfg.anchor_batch, rng);
        let picks: Vec<(usize, f64)> = picked
            .iter()
            .map(|&i| (i, if matches!(labels[i], AnchorLabel::Positive(_)) { 1.0 } else { 0.0 }))
            .collect();
        let rpn_objectness = objectness_loss(g, rpn.objectness, &picks);
        let dim = cfg.delta_dim();
        let rows: Vec<(usize, Vec<f64>)> = picked
            .iter()
            .filter_map(|&i| match labels[i] {
                AnchorLabel::Positive(j) => Some((i, encode_deltas(&det_gts[j], &rpn.anchors[i], cfg.rotation).to_vec(dim))),
                _ => None,
            })
            .collect();
        let rpn_box = box_loss(g, rpn.deltas, &rows, rows.len().max(1) as f64);

        // Second stage on sampled proposals.
        let props = proposals(g, &rpn, cfg, (ih, iw));
        let rois = sample_rois(&props, &det_gts, cfg, rng);
        let boxes: Vec<TextBox> = rois.iter().map(|r| r.proposal.clone()).collect();
        let (cls, box_refine) = match self.box_head.classify_and_refine(g, &f.p2, &boxes)? {
            Some(out) => {
                let labels: Vec<usize> = rois.iter().map(|r| usize::from(r.gt.is_some())).collect();
                let cls = cross_entropy(g, out.class_logits, &labels);
                let rows: Vec<(usize, Vec<f64>)> = rois
                    .iter()
                    .enumerate()
                    .filter_map(|(k, r)| {
                        r.gt.map(|j| (k, encode_box(&det_gts[j], &r.proposal, cfg.rotation).to_vec(dim)))
                    })
                    .collect();
                let refine = box_loss(g, out.deltas, &rows, rows.len().max(1) as f64);
                (cls, refine)
            }
            None => (g.fused_scalar(0.0, vec![]), g.fused_scalar(0.0, vec![])),
        };

        // Recognition on jittered ground-truth boxes.
        let mut ctc_terms = Vec::new();
        let mut att_terms = Vec::new();
        let mut infeasible_lines = 0;
        let supervised = self.config.recognition.attention.is_supervised();
        for (b, centers) in sample.boxes.iter().zip(&sample.char_centers) {
            let Some(text) = b.transcript.as_deref().filter(|t| !t.is_empty()) else {
                continue;
            };
            let target = self.config.alphabet.encode(text)?;
            let jb = jitter_box(b, train, rng);
            let roi = roi_recognition_align(g, &f.c2, &jb, &self.config.recognition.pool)?;
            let out = self.rec_head.forward(g, &roi)?;
            let cols: Vec<usize> = (0..roi.valid_width).collect();
            let logits = g.gather_rows(out.logits, &cols)?;
            let ctc = ctc_loss(g, logits, &target)?;
            if !ctc.feasible {
                infeasible_lines += 1;
                continue;
            }
            ctc_terms.push(g.scale(ctc.loss, 1.0 / target.len() as f64));
            if let (true, Some(a)) = (supervised, out.attention) {
                let mask = build_char_center_mask(&jb, centers, roi.valid_width, roi.valid_width);
                let w = g.shape(a)[0];
                let col = g.reshape(a, &[w, 1])?;
                let valid = g.gather_rows(col, &cols)?;
                let valid = g.reshape(valid, &[roi.valid_width])?;
                att_terms.push(attention_loss(g, valid, &mask)?);
            }
        }
        let ctc = mean_of(g, &ctc_terms)?;
        let attention = mean_of(g, &att_terms)?;
        let attention = g.scale(attention, train.attention_weight);

        let mut total = rpn_objectness;
        for v in [rpn_box, cls, box_refine, ctc, attention] {
            total = g.add(total, v)?;
        }
        Ok(LossVars {
            rpn_objectness,
            rpn_box,
            cls,
            box_refine,
            ctc,
            attention,
            total,
            infeasible_lines,
        })
    }

    /// Loss values and parameter gradients of one sample.
    pub fn sample_gradients(&self, sample: &Sample, train: &TrainConfig, seed: u64) -> Result<(MultiTaskLoss, Gradients)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::with_params(&self.store);
        let vars = self.compute_total_loss(&mut g, sample, train, &mut rng)?;
        g.backward(vars.total)?;
        Ok((vars.values(&g), g.param_grads()))
    }

    fn recognize_on(&self, g: &mut Graph, c2: &FeatureMap, b: &TextBox) -> Result<Recognition> {
        let roi = roi_recognition_align(g, c2, b, &self.config.recognition.pool)?;
        let out = self.rec_head.forward(g, &roi)?;
        let all = g.value(out.logits);
        let k = all.last_dim();
        let valid = Tensor::new(vec![roi.valid_width, k], all.data()[..roi.valid_width * k].to_vec())?;
        let classes = ctc_greedy_decode(&valid);
        Ok(Recognition {
            text: self.config.alphabet.decode(&classes),
            attention: out.attention.map(|a| g.value(a).data().to_vec()),
            valid_width: roi.valid_width,
        })
    }

    /// Reads the given boxes of an image.
    pub fn recognize_boxes(&self, image: &Tensor, boxes: &[TextBox]) -> Result<Vec<Recognition>> {
        let padded = pad_for_backbone(image)?;
        let mut g = Graph::with_params(&self.store);
        let x = g.constant(padded);
        let (c2, _) = self.backbone.forward(&mut g, x)?;
        boxes.iter().map(|b| self.recognize_on(&mut g, &c2, b)).collect()
    }

    /// Full inference: proposals, box head, threshold, NMS, recognition.
    pub fn detect(&self, image: &Tensor, infer: &InferConfig) -> Result<Vec<Detection>> {
        let cfg = &self.config.rpn;
        let (ih, iw) = (image.shape()[0], image.shape()[1]);
        let padded = pad_for_backbone(image)?;
        let mut g = Graph::with_params(&self.store);
        let x = g.constant(padded);
        let f = self.features(&mut g, x)?;
        let rpn = self.rpn_head.forward(&mut g, &f.p2, &f.p3, cfg)?;
        let props = proposals(&g, &rpn, cfg, (ih, iw));
        let Some(out) = self.box_head.classify_and_refine(&mut g, &f.p2, &props)? else {
            return Ok(Vec::new());
        };
        let logits = g.value(out.class_logits).clone();
        let deltas = g.value(out.deltas).clone();
        let d = deltas.last_dim();
        let mut candidates = Vec::new();
        for (k, p) in props.iter().enumerate() {
            let mut row = logits.data()[k * 2..k * 2 + 2].to_vec();
            crate::tensor::log_softmax_in_place(&mut row);
            let score = row[1].exp();
            if score < infer.score_threshold {
                continue;
            }
            let delta = BoxDelta::from_slice(&deltas.data()[k * d..(k + 1) * d]);
            let mut b = decode_box(&delta, p);
            b.theta = b.theta.clamp(-std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_4);
            let mut b = b.clipped(iw as f64, ih as f64).with_score(score);
            b.label = Label::Text;
            candidates.push(b);
        }
        let mut kept = crate::rpn::nms(&candidates, cfg.inference_nms);
        kept.truncate(infer.max_detections);
        kept.into_iter()
            .map(|b| {
                let r = self.recognize_on(&mut g, &f.c2, &b)?;
                Ok(Detection {
                    text_box: b.with_transcript(r.text),
                    attention: r.attention,
                    valid_width: r.valid_width,
                })
            })
            .collect()
    }
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(g.fused_scalar(0.0, vec![]));
    };
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

/// Random scale and shift of a ground-truth box for recognition training.
pub fn jitter_box(b: &TextBox, train: &TrainConfig, rng: &mut impl Rng) -> TextBox {
    let (s, t) = (train.jitter_scale, train.jitter_shift);
    let sw = 1.0 + rng.gen_range(-s..=s);
    let sh = 1.0 + rng.gen_range(-s..=s);
    let du = rng.gen_range(-t..=t) * b.w;
    let dv = rng.gen_range(-t..=t) * b.h;
    let (cx, cy) = b.local_to_image(du, dv);
    TextBox {
        cx,
        cy,
        w: b.w * sw,
        h: b.h * sh,
        ..b.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_document, GenConfig};

    fn tiny_config() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.backbone.fpn_channels = 16;
        c.rpn.head_hidden = 16;
        c
    }

    fn sample(seed: u64) -> Sample {
        let cfg = GenConfig { height: 64, width: 64, font_size: (10.0, 12.0), lines: (1, 2), ..GenConfig::default() };
        let doc = generate_document(&cfg, &crate::recognition::Alphabet::default(), seed).unwrap();
        Sample::from_document("x", doc)
    }

    #[test]
    fn total_is_sum_of_components() {
        let model = Model::new(tiny_config(), 1).unwrap();
        let s = sample(3);
        let mut g = Graph::with_params(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = model.compute_total_loss(&mut g, &s, &TrainConfig::default(), &mut rng).unwrap().values(&g);
        let sum: f64 = l.components().iter().sum();
        assert!((sum - l.total).abs() < 1e-12);
        assert!(l.ctc > 0.0 && l.attention > 0.0);
    }

    #[test]
    fn no_text_image() {
        let model = Model::new(tiny_config(), 1).unwrap();
        let mut s = sample(3);
        s.boxes.clear();
        s.char_centers.clear();
        let mut g = Graph::with_params(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = model.compute_total_loss(&mut g, &s, &TrainConfig::default(), &mut rng).unwrap().values(&g);
        assert_eq!((l.ctc, l.attention), (0.0, 0.0));
        assert!(l.rpn_objectness > 0.0 && l.cls > 0.0);
        assert!((l.total - (l.rpn_objectness + l.rpn_box + l.cls + l.box_refine)).abs() < 1e-12);
    }

    #[test]
    fn ctc_reaches_stem() {
        let model = Model::new(tiny_config(), 2).unwrap();
        let s = sample(5);
        let mut g = Graph::with_params(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = model.compute_total_loss(&mut g, &s, &TrainConfig::default(), &mut rng).unwrap();
        g.backward(l.ctc).unwrap();
        let grads = g.param_grads();
        let stem = grads.get(model.backbone.stem_kernel()).unwrap();
        assert!(stem.max_abs() > 0.0);
    }

    #[test]
    fn detect_runs_on_odd_sizes() {
        let model = Model::new(tiny_config(), 1).unwrap();
        let img = Tensor::full(&[50, 70, 3], 1.0);
        let infer = InferConfig { score_threshold: 0.0, ..InferConfig::default() };
        let dets = model.detect(&img, &infer).unwrap();
        for d in &dets {
            assert_eq!(d.text_box.label, Label::Text);
            let (x0, y0, x1, y1) = d.text_box.bounds();
            assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 70.0 && y1 <= 50.0);
        }
        assert!(dets.len() <= infer.max_detections);
    }

    #[test]
    fn loss_helpers() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![0.0, 2.0]));
        let l = objectness_loss(&mut g, x, &[(0, 1.0)]);
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
        let z = g.leaf(Tensor::zeros(&[3, 4]));
        let ce = cross_entropy(&mut g, z, &[0, 1, 3]);
        assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-15);
        let p = g.leaf(Tensor::zeros(&[2, 4]));
        let b = box_loss(&mut g, p, &[(1, vec![1.0, 0.0, 0.0, 0.0])], 1.0);
        assert!((g.value(b).item() - (1.0 - 0.5 / 9.0)).abs() < 1e-15);
    }
}
