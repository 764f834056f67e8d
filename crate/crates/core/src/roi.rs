//! RoI feature pooling.
//!
//! [`roi_align`] resamples a box onto a fixed grid for the detection heads.
//! [`roi_recognition_align`] keeps the box's aspect ratio instead: it fixes the
//! output height, derives the valid width from the box's proportions and pads
//! the remaining columns with zeros, so every text line reaches the recognizer
//! at the same apparent glyph size.

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::geometry::TextBox;
use crate::tensor::{Graph, Var};

/// Output grid of the recognition pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecognitionPoolConfig {
    pub height: usize,
    pub width: usize,
}

impl RecognitionPoolConfig {
    pub const SMALL: RecognitionPoolConfig = RecognitionPoolConfig { height: 5, width: 180 };
    pub const MEDIUM: RecognitionPoolConfig = RecognitionPoolConfig { height: 6, width: 224 };
    pub const LARGE: RecognitionPoolConfig = RecognitionPoolConfig { height: 7, width: 300 };

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width < self.height {
            return Err(Error::Config(format!(
                "recognition pool needs height >= 1 and width >= height, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Parses `5x180`, `6x224` or `7x300`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "5x180" => Ok(Self::SMALL),
            "6x224" => Ok(Self::MEDIUM),
            "7x300" => Ok(Self::LARGE),
            other => Err(Error::Config(format!(
                "recognition_pool must be one of 5x180, 6x224, 7x300; got `{other}`"
            ))),
        }
    }
}

impl Default for RecognitionPoolConfig {
    fn default() -> Self {
        Self::SMALL
    }
}

impl std::fmt::Display for RecognitionPoolConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// Pooled recognition features of one region.
#[derive(Clone, Debug)]
pub struct RoIFeature {
    /// `height x width x C` on the graph.
    pub tensor: Var,
    /// Columns holding resampled features.
    pub valid_width: usize,
    /// Zero columns appended on the right.
    pub pad_width: usize,
    /// The box was wider than the canvas and got compressed to fit.
    pub overflow: bool,
    pub source_box: TextBox,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Resized valid width for a box of `w x h` (any common unit) and whether it overflowed.
pub fn recognition_width(w: f64, h: f64, cfg: &RecognitionPoolConfig) -> (usize, bool) {
    let wr = round_half_up(w * cfg.height as f64 / h).max(1);
    if wr > cfg.width {
        (cfg.width, true)
    } else {
        (wr, false)
    }
}

/// Box extents in feature cells, with degenerate extents expanded to one cell.
fn extents_in_cells(b: &TextBox, stride: usize) -> (f64, f64) {
    let s = stride as f64;
    ((b.w / s).max(1.0), (b.h / s).max(1.0))
}

/// Sampling positions (grid coordinates `(y, x)`) for an `out_h x out_w` grid over
/// `b`, one sample at each output cell center, rotated with the box.
pub fn grid_points(b: &TextBox, stride: usize, out_h: usize, out_w: usize) -> Vec<(f64, f64)> {
    let (wc, hc) = extents_in_cells(b, stride);
    let s = stride as f64;
    let (sin, cos) = b.theta.sin_cos();
    let (cx, cy) = (b.cx / s, b.cy / s);
    let mut pts = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let v = ((i as f64 + 0.5) / out_h as f64 - 0.5) * hc;
        for j in 0..out_w {
            let u = ((j as f64 + 0.5) / out_w as f64 - 0.5) * wc;
            let x = cx + u * cos - v * sin;
            let y = cy + u * sin + v * cos;
            // Cell (r, c) covers pixels [c*s, (c+1)*s), so its value sits at c + 0.5.
            pts.push((y - 0.5, x - 0.5));
        }
    }
    pts
}

/// Bilinear RoIAlign of one box onto an `out_h x out_w x C` grid.
pub fn roi_align(g: &mut Graph, map: &FeatureMap, b: &TextBox, out_h: usize, out_w: usize) -> Result<Var> {
    roi_align_batch(g, map, std::slice::from_ref(b), out_h, out_w)
        .and_then(|v| {
            let c = g.shape(v)[1];
            g.reshape(v, &[out_h, out_w, c])
        })
}

/// RoIAlign of several boxes in one sampling op; returns `(N * out_h * out_w) x C`
/// rows in box-major order.
pub fn roi_align_batch(g: &mut Graph, map: &FeatureMap, boxes: &[TextBox], out_h: usize, out_w: usize) -> Result<Var> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Invalid("roi_align output grid must be non-empty".into()));
    }
    let mut pts = Vec::with_capacity(boxes.len() * out_h * out_w);
    for b in boxes {
        if !(b.w > 0.0 && b.h > 0.0) {
            return Err(Error::Invalid(format!("roi box needs positive extents: {b:?}")));
        }
        pts.extend(grid_points(b, map.stride, out_h, out_w));
    }
    g.bilinear_sample(map.tensor, &pts)
}

/// Aspect-preserving recognition pooling from a C2 map.
pub fn roi_recognition_align(g: &mut Graph, c2: &FeatureMap, b: &TextBox, cfg: &RecognitionPoolConfig) -> Result<RoIFeature> {
    cfg.validate()?;
    if !(b.w > 0.0 && b.h > 0.0) {
        return Err(Error::Invalid(format!("roi box needs positive extents: {b:?}")));
    }
    let (wc, hc) = extents_in_cells(b, c2.stride);
    let (valid, overflow) = recognition_width(wc, hc, cfg);
    let pts = grid_points(b, c2.stride, cfg.height, valid);
    let rows = g.bilinear_sample(c2.tensor, &pts)?;
    let c = g.shape(rows)[1];
    let grid = g.reshape(rows, &[cfg.height, valid, c])?;
    let tensor = g.pad_width(grid, cfg.width)?;
    Ok(RoIFeature {
        tensor,
        valid_width: valid,
        pad_width: cfg.width - valid,
        overflow,
        source_box: b.clone(),
    })
}

/// Pooled column of a point inside the box, given the valid width of its RoI.
/// The point is projected onto the box's long axis first.
pub fn pool_column(b: &TextBox, (x, y): (f64, f64), valid_width: usize) -> Result<usize> {
    let (u, _) = b.image_to_local(x, y);
    let t = (u + b.w / 2.0) / b.w;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!(
            "point ({x}, {y}) lies outside the box horizontally"
        )));
    }
    let col = (t * valid_width as f64).floor() as usize;
    Ok(col.min(valid_width.saturating_sub(1)))
}

/// Column of a pixel `x` on the horizontal midline of an axis-aligned box.
pub fn map_pixel_to_pool_column(b: &TextBox, x_pixel: f64, valid_width: usize) -> Result<usize> {
    pool_column(b, (x_pixel, b.cy), valid_width)
}
