//! Oriented text boxes.
//!
//! Angles are in radians and rotate the box's local axes about its center:
//! a local offset `(u, v)` maps to image coordinates
//! `(cx + u cos θ - v sin θ, cy + u sin θ + v cos θ)`. Image `y` grows downward,
//! so a positive angle turns the box clockwise on screen.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Label {
    #[default]
    Text,
    Background,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
    pub label: Label,
    pub score: f64,
    pub transcript: Option<String>,
}

impl TextBox {
    /// Axis-aligned text box with score 1.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        TextBox {
            cx,
            cy,
            w,
            h,
            theta: 0.0,
            label: Label::Text,
            score: 1.0,
            transcript: None,
        }
    }

    /// Box from its left/top/right/bottom edges.
    pub fn from_edges(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        TextBox::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn with_transcript(mut self, t: impl Into<String>) -> Self {
        self.transcript = Some(t.into());
        self
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite() && self.theta.is_finite()
    }

    /// Image position of a box-local offset.
    pub fn local_to_image(&self, u: f64, v: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (self.cx + u * c - v * s, self.cy + u * s + v * c)
    }

    /// Box-local offset of an image position.
    pub fn image_to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        (dx * c + dy * s, -dx * s + dy * c)
    }

    /// Corners in order top-left, top-right, bottom-right, bottom-left (local frame).
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        [
            self.local_to_image(-hw, -hh),
            self.local_to_image(hw, -hh),
            self.local_to_image(hw, hh),
            self.local_to_image(-hw, hh),
        ]
    }

    /// Enclosing axis-aligned rectangle as `(x0, y0, x1, y1)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        if self.theta == 0.0 {
            return (
                self.cx - self.w / 2.0,
                self.cy - self.h / 2.0,
                self.cx + self.w / 2.0,
                self.cy + self.h / 2.0,
            );
        }
        self.corners().iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(x0, y0, x1, y1), &(x, y)| (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        )
    }

    /// The enclosing axis-aligned rectangle as a box with the same metadata.
    pub fn axis_aligned(&self) -> TextBox {
        let (x0, y0, x1, y1) = self.bounds();
        TextBox {
            theta: 0.0,
            ..TextBox::from_edges(x0, y0, x1, y1)
        }
        .with_meta_of(self)
    }

    fn with_meta_of(mut self, other: &TextBox) -> Self {
        self.label = other.label;
        self.score = other.score;
        self.transcript = other.transcript.clone();
        self
    }

    /// Half-open containment test in the box's own frame.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.image_to_local(x, y);
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        (-hw..hw).contains(&u) && (-hh..hh).contains(&v)
    }

    /// Clips an axis-aligned box to `[0, width] x [0, height]`; keeps at least 1 px.
    pub fn clipped(&self, width: f64, height: f64) -> TextBox {
        let (x0, y0, x1, y1) = self.bounds();
        let x0 = x0.clamp(0.0, width - 1.0);
        let y0 = y0.clamp(0.0, height - 1.0);
        let x1 = x1.clamp(x0 + 1.0, width);
        let y1 = y1.clamp(y0 + 1.0, height);
        if self.theta == 0.0 {
            TextBox::from_edges(x0, y0, x1, y1).with_meta_of(self)
        } else {
            // Rotated boxes only get their center pulled inside the image.
            let mut b = self.clone();
            b.cx = self.cx.clamp(0.0, width);
            b.cy = self.cy.clamp(0.0, height);
            b
        }
    }
}
