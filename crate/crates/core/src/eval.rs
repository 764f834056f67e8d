//! Dataset-level evaluation of a trained model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::InferConfig;
use crate::dataset::Sample;
use crate::error::Result;
use crate::geometry::TextBox;
use crate::metrics::{evaluate, EvalReport};
use crate::model::Model;
use crate::recognition::{attention_peaks, build_char_center_mask};
use crate::roi::recognition_width;

/// Runs detection on every sample and scores it at `iou_threshold`.
pub fn evaluate_model(model: &Model, samples: &[Sample], infer: &InferConfig, iou_threshold: f64) -> Result<EvalReport> {
    let dets: Vec<Vec<TextBox>> = samples
        .par_iter()
        .map(|s| Ok(model.detect(&s.image, infer)?.into_iter().map(|d| d.text_box).collect()))
        .collect::<Result<_>>()?;
    Ok(evaluate(
        samples.iter().zip(&dets).map(|(s, d)| (s.name.clone(), d.as_slice(), s.boxes.as_slice())),
        iou_threshold,
    ))
}

/// Recognition quality on ground-truth boxes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecognitionStats {
    pub lines: usize,
    pub exact: usize,
    /// Attention local maxima (values >= 0.5) inside the valid width.
    pub peaks: usize,
    /// Peaks within one column of a character-center mask one.
    pub peaks_near_center: usize,
}

impl RecognitionStats {
    pub fn exact_rate(&self) -> f64 {
        if self.lines == 0 {
            0.0
        } else {
            self.exact as f64 / self.lines as f64
        }
    }

    /// Fraction of peaks near a character center; `None` without peaks.
    pub fn peak_precision(&self) -> Option<f64> {
        (self.peaks > 0).then(|| self.peaks_near_center as f64 / self.peaks as f64)
    }

    fn merge(mut self, o: RecognitionStats) -> Self {
        self.lines += o.lines;
        self.exact += o.exact;
        self.peaks += o.peaks;
        self.peaks_near_center += o.peaks_near_center;
        self
    }
}

/// Reads every ground-truth line from its own box and checks transcripts and attention peaks.
pub fn recognition_stats(model: &Model, samples: &[Sample]) -> Result<RecognitionStats> {
    let pool = model.config.recognition.pool;
    let per: Vec<RecognitionStats> = samples
        .par_iter()
        .map(|s| {
            let reads = model.recognize_boxes(&s.image, &s.boxes)?;
            let mut st = RecognitionStats::default();
            for ((b, centers), r) in s.boxes.iter().zip(&s.char_centers).zip(&reads) {
                st.lines += 1;
                if b.transcript.as_deref() == Some(r.text.as_str()) {
                    st.exact += 1;
                }
                if let Some(a) = &r.attention {
                    let stride = crate::backbone::C2_STRIDE as f64;
                    let (valid, _) = recognition_width((b.w / stride).max(1.0), (b.h / stride).max(1.0), &pool);
                    let mask = build_char_center_mask(b, centers, valid, pool.width);
                    for p in attention_peaks(a, valid) {
                        st.peaks += 1;
                        let lo = p.saturating_sub(1);
                        let hi = (p + 1).min(mask.len() - 1);
                        if mask[lo..=hi].iter().any(|&m| m == 1.0) {
                            st.peaks_near_center += 1;
                        }
                    }
                }
            }
            Ok(st)
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().fold(RecognitionStats::default(), RecognitionStats::merge))
}
