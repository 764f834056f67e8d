//! Annotated copies of images: box outlines with their transcripts above them.

use crate::geometry::TextBox;
use crate::synth::{glyph, ADVANCE, GLYPH_H, GLYPH_W};
use crate::tensor::Tensor;

const RED: [f64; 3] = [1.0, 0.0, 0.0];

fn put(image: &mut Tensor, x: i64, y: i64, color: [f64; 3]) {
    let (h, w) = (image.shape()[0] as i64, image.shape()[1] as i64);
    if (0..w).contains(&x) && (0..h).contains(&y) {
        let o = ((y * w + x) * 3) as usize;
        image.data_mut()[o..o + 3].copy_from_slice(&color);
    }
}

fn line(image: &mut Tensor, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: [f64; 3]) {
    let n = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        put(image, (x0 + t * (x1 - x0)).floor() as i64, (y0 + t * (y1 - y0)).floor() as i64, color);
    }
}

/// Draws `text` with 1-pixel glyph cells, top-left corner at `(x, y)`.
pub fn draw_text(image: &mut Tensor, text: &str, x: i64, y: i64, color: [f64; 3]) {
    for (i, c) in text.chars().enumerate() {
        let Some(g) = glyph(c) else { continue };
        for r in 0..GLYPH_H {
            for col in 0..GLYPH_W {
                if g.ink(r, col) {
                    put(image, x + (i * ADVANCE + col) as i64, y + r as i64, color);
                }
            }
        }
    }
}

/// Copy of `image` with every box outlined and labelled in red.
pub fn draw_overlay(image: &Tensor, boxes: &[TextBox]) -> Tensor {
    let mut out = image.clone();
    for b in boxes {
        let c = b.corners();
        for k in 0..4 {
            line(&mut out, c[k], c[(k + 1) % 4], RED);
        }
        if let Some(t) = &b.transcript {
            let (x0, y0, _, _) = b.bounds();
            let ty = (y0.floor() as i64 - GLYPH_H as i64 - 1).max(0);
            draw_text(&mut out, t, x0.floor() as i64, ty, RED);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outline_and_label() {
        let img = Tensor::full(&[40, 60, 3], 1.0);
        let b = TextBox::from_edges(10.0, 20.0, 50.0, 30.0).with_transcript("ab");
        let out = draw_overlay(&img, &[b]);
        assert_eq!(&out.data()[(20 * 60 + 10) * 3..(20 * 60 + 10) * 3 + 3], &RED);
        let red_above = (0..20).any(|y| (0..60).any(|x| out.at(&[y, x, 1]) == 0.0));
        assert!(red_above);
        assert_eq!(out.at(&[25, 30, 1]), 1.0);
    }
}
