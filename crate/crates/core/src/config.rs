//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Ranges are written
//! `lo,hi`; the momentum schedule is `epoch:momentum` pairs separated by commas.
//! Unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::recognition::{Alphabet, AttentionMode, RecognitionConfig, RecognizerKind};
use crate::roi::RecognitionPoolConfig;
use crate::rpn::RpnConfig;
use crate::synth::GenConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub rpn: RpnConfig,
    pub recognition: RecognitionConfig,
    pub alphabet: Alphabet,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            rpn: RpnConfig::default(),
            recognition: RecognitionConfig::default(),
            alphabet: Alphabet::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.rpn.validate()?;
        self.recognition.pool.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `(first epoch, momentum)` pairs with strictly increasing epochs, starting at 0.
    pub momentum_schedule: Vec<(usize, f64)>,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Relative size jitter of recognition boxes during training.
    pub jitter_scale: f64,
    /// Relative center jitter of recognition boxes during training.
    pub jitter_shift: f64,
    pub attention_weight: f64,
    /// Global gradient-norm ceiling per step (0: no clipping).
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 2,
            lr: 0.01,
            momentum_schedule: vec![(0, 0.9), (140, 0.5)],
            seed: 0,
            checkpoint_every: 50,
            jitter_scale: 0.05,
            jitter_shift: 0.03,
            attention_weight: 1.0,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("lr must be positive".into()));
        }
        match self.momentum_schedule.first() {
            Some((0, _)) => {}
            _ => return Err(Error::Config("momentum_schedule must start at epoch 0".into())),
        }
        if self.momentum_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("momentum_schedule epochs must be strictly increasing".into()));
        }
        if self.momentum_schedule.iter().any(|&(_, m)| !(0.0..1.0).contains(&m)) {
            return Err(Error::Config("momentum values must lie in [0, 1)".into()));
        }
        if !(0.0..0.5).contains(&self.jitter_scale) || !(0.0..0.5).contains(&self.jitter_shift) {
            return Err(Error::Config("jitter_scale and jitter_shift must lie in [0, 0.5)".into()));
        }
        if !(self.grad_clip >= 0.0) || !self.grad_clip.is_finite() {
            return Err(Error::Config("grad_clip must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Momentum in effect during `epoch` (0-based).
    pub fn momentum_at(&self, epoch: usize) -> f64 {
        self.momentum_schedule
            .iter()
            .take_while(|(e, _)| *e <= epoch)
            .last()
            .map_or(0.0, |&(_, m)| m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub score_threshold: f64,
    pub max_detections: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            score_threshold: 0.5,
            max_detections: 20,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_pair<T: std::str::FromStr>(key: &str, v: &str) -> Result<(T, T)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("`{key}` expects `lo,hi`, got `{v}`")))?;
    Ok((parse_num(key, a)?, parse_num(key, b)?))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` must be on or off, got `{v}`"))),
    }
}

/// Parses `HxW`.
pub fn parse_size(v: &str) -> Result<(usize, usize)> {
    let (h, w) = v
        .trim()
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("size must be HxW, got `{v}`")))?;
    Ok((parse_num("size", h)?, parse_num("size", w)?))
}

fn parse_schedule(v: &str) -> Result<Vec<(usize, f64)>> {
    v.split(',')
        .map(|part| {
            let (e, m) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("momentum_schedule entry `{part}` must be epoch:momentum")))?;
            Ok((parse_num("momentum_schedule", e)?, parse_num("momentum_schedule", m)?))
        })
        .collect()
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip_prefix(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.infer.score_threshold) {
            return Err(Error::Config("score_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (g, m, t) = (&mut self.gen, &mut self.model, &mut self.train);
        match key {
            "image_size" => (g.height, g.width) = parse_size(v)?,
            "lines" => g.lines = parse_pair(key, v)?,
            "text_len" => g.text_len = parse_pair(key, v)?,
            "font_size" => g.font_size = parse_pair(key, v)?,
            "rotation_deg" => g.rotation_deg = parse_pair(key, v)?,
            "noise_stddev" => g.noise_stddev = parse_num(key, v)?,
            "blur_radius" => g.blur_radius = parse_pair(key, v)?,
            "distractors" => g.distractors = parse_pair(key, v)?,
            "min_gap" => g.min_gap = parse_num(key, v)?,
            "background" => g.background = parse_pair(key, v)?,
            "ink" => g.ink = parse_pair(key, v)?,

            "stem_channels" => m.backbone.stem_channels = parse_num(key, v)?,
            "growth_rate" => m.backbone.growth_rate = parse_num(key, v)?,
            "layers_per_block" => m.backbone.layers_per_block = parse_num(key, v)?,
            "fpn_channels" => m.backbone.fpn_channels = parse_num(key, v)?,
            "rotation" => m.rpn.rotation = parse_bool(key, v)?,
            "pos_iou" => m.rpn.pos_iou = parse_num(key, v)?,
            "neg_iou" => m.rpn.neg_iou = parse_num(key, v)?,
            "proposal_nms" => m.rpn.proposal_nms = parse_num(key, v)?,
            "inference_nms" => m.rpn.inference_nms = parse_num(key, v)?,
            "anchor_batch" => m.rpn.anchor_batch = parse_num(key, v)?,
            "pre_nms_top" => m.rpn.pre_nms_top = parse_num(key, v)?,
            "post_nms_top" => m.rpn.post_nms_top = parse_num(key, v)?,
            "roi_batch" => m.rpn.roi_batch = parse_num(key, v)?,
            "roi_fg_iou" => m.rpn.roi_fg_iou = parse_num(key, v)?,
            "head_hidden" => m.rpn.head_hidden = parse_num(key, v)?,
            "recognition_pool" => m.recognition.pool = RecognitionPoolConfig::parse(v)?,
            "attention" => m.recognition.attention = AttentionMode::parse(v)?,
            "recognizer" => m.recognition.recognizer = RecognizerKind::parse(v)?,
            "alphabet" => m.alphabet = Alphabet::load(Path::new(v))?,
            "alphabet_tokens" => m.alphabet = Alphabet::new(v.chars().collect())?,

            "epochs" => t.epochs = parse_num(key, v)?,
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "lr" => t.lr = parse_num(key, v)?,
            "momentum_schedule" => t.momentum_schedule = parse_schedule(v)?,
            "seed" => t.seed = parse_num(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse_num(key, v)?,
            "jitter_scale" => t.jitter_scale = parse_num(key, v)?,
            "jitter_shift" => t.jitter_shift = parse_num(key, v)?,
            "attention_weight" => t.attention_weight = parse_num(key, v)?,
            "grad_clip" => t.grad_clip = parse_num(key, v)?,

            "score_threshold" => self.infer.score_threshold = parse_num(key, v)?,
            "max_detections" => self.infer.max_detections = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Canonical text form; `Config::parse(cfg.to_text())` reproduces `cfg`.
    pub fn to_text(&self) -> String {
        let (g, m, t) = (&self.gen, &self.model, &self.train);
        let pair = |a: &dyn std::fmt::Display, b: &dyn std::fmt::Display| format!("{a},{b}");
        let onoff = |b: bool| if b { "on" } else { "off" };
        let schedule = t
            .momentum_schedule
            .iter()
            .map(|(e, m)| format!("{e}:{m:?}"))
            .collect::<Vec<_>>()
            .join(",");
        let entries: Vec<(&str, String)> = vec![
            ("image_size", format!("{}x{}", g.height, g.width)),
            ("lines", pair(&g.lines.0, &g.lines.1)),
            ("text_len", pair(&g.text_len.0, &g.text_len.1)),
            ("font_size", format!("{:?},{:?}", g.font_size.0, g.font_size.1)),
            ("rotation_deg", format!("{:?},{:?}", g.rotation_deg.0, g.rotation_deg.1)),
            ("noise_stddev", format!("{:?}", g.noise_stddev)),
            ("blur_radius", pair(&g.blur_radius.0, &g.blur_radius.1)),
            ("distractors", pair(&g.distractors.0, &g.distractors.1)),
            ("min_gap", format!("{:?}", g.min_gap)),
            ("background", format!("{:?},{:?}", g.background.0, g.background.1)),
            ("ink", format!("{:?},{:?}", g.ink.0, g.ink.1)),
            ("stem_channels", m.backbone.stem_channels.to_string()),
            ("growth_rate", m.backbone.growth_rate.to_string()),
            ("layers_per_block", m.backbone.layers_per_block.to_string()),
            ("fpn_channels", m.backbone.fpn_channels.to_string()),
            ("rotation", onoff(m.rpn.rotation).to_string()),
            ("pos_iou", format!("{:?}", m.rpn.pos_iou)),
            ("neg_iou", format!("{:?}", m.rpn.neg_iou)),
            ("proposal_nms", format!("{:?}", m.rpn.proposal_nms)),
            ("inference_nms", format!("{:?}", m.rpn.inference_nms)),
            ("anchor_batch", m.rpn.anchor_batch.to_string()),
            ("pre_nms_top", m.rpn.pre_nms_top.to_string()),
            ("post_nms_top", m.rpn.post_nms_top.to_string()),
            ("roi_batch", m.rpn.roi_batch.to_string()),
            ("roi_fg_iou", format!("{:?}", m.rpn.roi_fg_iou)),
            ("head_hidden", m.rpn.head_hidden.to_string()),
            ("recognition_pool", m.recognition.pool.to_string()),
            ("attention", m.recognition.attention.as_str().to_string()),
            ("recognizer", m.recognition.recognizer.as_str().to_string()),
            ("alphabet_tokens", m.alphabet.tokens().iter().collect()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", format!("{:?}", t.lr)),
            ("momentum_schedule", schedule),
            ("seed", t.seed.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("jitter_scale", format!("{:?}", t.jitter_scale)),
            ("jitter_shift", format!("{:?}", t.jitter_shift)),
            ("attention_weight", format!("{:?}", t.attention_weight)),
            ("grad_clip", format!("{:?}", t.grad_clip)),
            ("score_threshold", format!("{:?}", self.infer.score_threshold)),
            ("max_detections", self.infer.max_detections.to_string()),
        ];
        entries.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut cfg = Config::default();
        cfg.train.lr = 0.0125;
        cfg.model.recognition.attention = AttentionMode::Off;
        cfg.gen.rotation_deg = (-10.0, 10.0);
        let back = Config::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn parse_examples() {
        let cfg = Config::parse("# desk run\nepochs = 3\n\nrecognition_pool = 6x224\nrotation = on\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.recognition.pool, RecognitionPoolConfig::MEDIUM);
        assert!(cfg.model.rpn.rotation);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "bogus = 1",
            "epochs",
            "epochs = many",
            "batch_size = 0",
            "recognition_pool = 5x100",
            "attention = sometimes",
            "momentum_schedule = 0:0.9,0:0.5",
            "momentum_schedule = 5:0.9",
            "rotation_deg = -60,0",
        ] {
            let e = Config::parse(bad).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{bad}: {e}");
        }
    }

    #[test]
    fn momentum_lookup() {
        let t = TrainConfig::default();
        assert_eq!(t.momentum_at(0), 0.9);
        assert_eq!(t.momentum_at(139), 0.9);
        assert_eq!(t.momentum_at(140), 0.5);
        assert_eq!(t.momentum_at(10_000), 0.5);
    }
}
