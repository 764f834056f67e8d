//! Synthetic document generator: text lines, distractor shapes, noise and blur.

mod glyphs;

pub use glyphs::{charset, glyph, Glyph, ADVANCE, GLYPH_H, GLYPH_W};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::TextBox;
use crate::recognition::Alphabet;
use crate::tensor::Tensor;

/// Attempts at placing one line or one distractor before giving up on it.
pub const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of text lines per document.
    pub lines: (usize, usize),
    /// Inclusive range of characters per line.
    pub text_len: (usize, usize),
    /// Line height in pixels; one glyph cell is a seventh of it.
    pub font_size: (f64, f64),
    pub rotation_deg: (f64, f64),
    pub noise_stddev: f64,
    pub blur_radius: (usize, usize),
    pub distractors: (usize, usize),
    /// Minimum clearance between lines and around distractors, in pixels.
    pub min_gap: f64,
    /// Per-channel intensity range of the page.
    pub background: (f64, f64),
    /// Per-channel intensity range of text ink.
    pub ink: (f64, f64),
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            height: 128,
            width: 128,
            lines: (1, 3),
            text_len: (2, 6),
            font_size: (14.0, 18.0),
            rotation_deg: (0.0, 0.0),
            noise_stddev: 0.02,
            blur_radius: (0, 1),
            distractors: (0, 3),
            min_gap: 2.0,
            background: (0.75, 1.0),
            ink: (0.0, 0.35),
        }
    }
}

fn check_range<T: PartialOrd + std::fmt::Debug>(name: &str, (lo, hi): (T, T)) -> Result<()> {
    if lo > hi {
        return Err(Error::Config(format!("{name} range {lo:?}..{hi:?} is empty")));
    }
    Ok(())
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("image size must be at least 8x8".into()));
        }
        check_range("lines", self.lines)?;
        check_range("text_len", self.text_len)?;
        check_range("font_size", self.font_size)?;
        check_range("rotation_deg", self.rotation_deg)?;
        check_range("blur_radius", self.blur_radius)?;
        check_range("distractors", self.distractors)?;
        check_range("background", self.background)?;
        check_range("ink", self.ink)?;
        if self.text_len.0 == 0 {
            return Err(Error::Config("text_len must be at least 1".into()));
        }
        if self.font_size.0 < GLYPH_H as f64 {
            return Err(Error::Config(format!("font_size must be at least {GLYPH_H} px")));
        }
        if self.rotation_deg.0 < -45.0 || self.rotation_deg.1 > 45.0 {
            return Err(Error::Config("rotation_deg must lie within [-45, 45]".into()));
        }
        if !(self.noise_stddev >= 0.0) || !(self.min_gap >= 0.0) {
            return Err(Error::Config("noise_stddev and min_gap must be non-negative".into()));
        }
        for (name, (lo, hi)) in [("background", self.background), ("ink", self.ink)] {
            if lo < 0.0 || hi > 1.0 {
                return Err(Error::Config(format!("{name} intensities must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Per-sample seed derived from a master seed.
pub fn sample_seed(master: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(master ^ mix(index))
}

/// A rendered text line: its box, glyph geometry and character centers.
#[derive(Clone, Debug)]
pub struct RenderedLine {
    pub text: String,
    pub text_box: TextBox,
    /// Image coordinates of each character's center ink cell.
    pub char_centers: Vec<(f64, f64)>,
    glyphs: Vec<Glyph>,
    /// Pixels per glyph cell.
    pub cell: f64,
}

/// Renders `text` with cell height `font_size / 7`, rotated by `angle_deg`, centered
/// at the origin.
pub fn render_text_line(text: &str, font_size: f64, angle_deg: f64) -> Result<RenderedLine> {
    if text.is_empty() {
        return Err(Error::Invalid("cannot render an empty line".into()));
    }
    if !(font_size > 0.0) {
        return Err(Error::Invalid(format!("font size must be positive, got {font_size}")));
    }
    let glyphs = text
        .chars()
        .map(|c| glyph(c).ok_or_else(|| Error::Invalid(format!("no glyph for `{c}`"))))
        .collect::<Result<Vec<_>>>()?;
    let cell = font_size / GLYPH_H as f64;
    let n = glyphs.len();
    let w = (ADVANCE * n - 1) as f64 * cell;
    let h = font_size;
    let text_box = TextBox::new(0.0, 0.0, w, h)
        .with_theta(angle_deg.to_radians())
        .with_transcript(text);
    let char_centers = glyphs
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let (r, c) = g.center_cell();
            let u = ((ADVANCE * i + c) as f64 + 0.5) * cell - w / 2.0;
            let v = (r as f64 + 0.5) * cell - h / 2.0;
            text_box.local_to_image(u, v)
        })
        .collect();
    Ok(RenderedLine {
        text: text.to_string(),
        text_box,
        char_centers,
        glyphs,
        cell,
    })
}

impl RenderedLine {
    pub fn translated(mut self, dx: f64, dy: f64) -> Self {
        self.text_box.cx += dx;
        self.text_box.cy += dy;
        for p in &mut self.char_centers {
            p.0 += dx;
            p.1 += dy;
        }
        self
    }

    /// Whether image point `(x, y)` falls on ink.
    pub fn covers(&self, x: f64, y: f64) -> bool {
        let b = &self.text_box;
        let (u, v) = b.image_to_local(x, y);
        let gx = (u + b.w / 2.0) / self.cell;
        let gy = (v + b.h / 2.0) / self.cell;
        if gx < 0.0 || gy < 0.0 {
            return false;
        }
        let (gx, gy) = (gx.floor() as usize, gy.floor() as usize);
        let (i, col) = (gx / ADVANCE, gx % ADVANCE);
        i < self.glyphs.len() && self.glyphs[i].ink(gy, col)
    }

    /// Paints ink pixels (pixel centers on ink) with `color`.
    pub fn draw(&self, image: &mut Tensor, color: [f64; 3]) {
        let (x0, y0, x1, y1) = self.text_box.bounds();
        for_pixels(image, (x0, y0, x1, y1), |x, y| self.covers(x, y), color);
    }
}

/// Visits the pixels whose centers lie in `bounds` and paints those accepted by `hit`.
fn for_pixels(image: &mut Tensor, (x0, y0, x1, y1): (f64, f64, f64, f64), hit: impl Fn(f64, f64) -> bool, color: [f64; 3]) {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let px0 = (x0 - 0.5).ceil().max(0.0) as usize;
    let py0 = (y0 - 0.5).ceil().max(0.0) as usize;
    let px1 = ((x1 - 0.5).floor() + 1.0).clamp(0.0, w as f64) as usize;
    let py1 = ((y1 - 0.5).floor() + 1.0).clamp(0.0, h as f64) as usize;
    let data = image.data_mut();
    for py in py0..py1 {
        for px in px0..px1 {
            if hit(px as f64 + 0.5, py as f64 + 0.5) {
                let o = (py * w + px) * 3;
                data[o..o + 3].copy_from_slice(&color);
            }
        }
    }
}

/// A non-text shape drawn to make localization harder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64, filled: bool, color: [f64; 3] },
    Line { x0: f64, y0: f64, x1: f64, y1: f64, thickness: f64, color: [f64; 3] },
    Circle { cx: f64, cy: f64, r: f64, thickness: f64, color: [f64; 3] },
    /// Axes along the left and bottom edges of the frame plus a polyline.
    Graph { x0: f64, y0: f64, x1: f64, y1: f64, points: Vec<(f64, f64)>, color: [f64; 3] },
}

fn segment_distance((px, py): (f64, f64), (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0) };
    ((px - ax - t * dx).powi(2) + (py - ay - t * dy).powi(2)).sqrt()
}

impl Primitive {
    /// Axis-aligned bounds of everything the primitive can paint.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Primitive::Rect { x0, y0, x1, y1, .. } => (x0, y0, x1, y1),
            Primitive::Line { x0, y0, x1, y1, thickness, .. } => {
                let t = thickness / 2.0;
                (x0.min(x1) - t, y0.min(y1) - t, x0.max(x1) + t, y0.max(y1) + t)
            }
            Primitive::Circle { cx, cy, r, thickness, .. } => {
                let e = r + thickness / 2.0;
                (cx - e, cy - e, cx + e, cy + e)
            }
            Primitive::Graph { x0, y0, x1, y1, .. } => (x0, y0, x1, y1),
        }
    }

    pub fn color(&self) -> [f64; 3] {
        match self {
            Primitive::Rect { color, .. }
            | Primitive::Line { color, .. }
            | Primitive::Circle { color, .. }
            | Primitive::Graph { color, .. } => *color,
        }
    }

    pub fn covers(&self, x: f64, y: f64) -> bool {
        match self {
            Primitive::Rect { x0, y0, x1, y1, filled, .. } => {
                let inside = (*x0..*x1).contains(&x) && (*y0..*y1).contains(&y);
                inside && (*filled || x < x0 + 1.0 || x >= x1 - 1.0 || y < y0 + 1.0 || y >= y1 - 1.0)
            }
            Primitive::Line { x0, y0, x1, y1, thickness, .. } => {
                segment_distance((x, y), (*x0, *y0), (*x1, *y1)) <= thickness / 2.0
            }
            Primitive::Circle { cx, cy, r, thickness, .. } => {
                (((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r).abs() <= thickness / 2.0
            }
            Primitive::Graph { x0, y0, x1, y1, points, .. } => {
                let (lx, by) = (x0 + 0.5, y1 - 0.5);
                let axis = segment_distance((x, y), (lx, *y0), (lx, by)) <= 0.5
                    || segment_distance((x, y), (lx, by), (*x1, by)) <= 0.5;
                axis || points.windows(2).any(|p| segment_distance((x, y), p[0], p[1]) <= 0.5)
            }
        }
    }

    pub fn draw(&self, image: &mut Tensor) {
        for_pixels(image, self.bounds(), |x, y| self.covers(x, y), self.color());
    }
}

fn overlaps(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> bool {
    a.0 < b.2 && b.0 < a.2 && a.1 < b.3 && b.1 < a.3
}

fn expand((x0, y0, x1, y1): (f64, f64, f64, f64), e: f64) -> (f64, f64, f64, f64) {
    (x0 - e, y0 - e, x1 + e, y1 + e)
}

fn random_color(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> [f64; 3] {
    let mut c = [0.0; 3];
    for v in &mut c {
        *v = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    }
    c
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn random_primitive(rng: &mut impl Rng, (h, w): (f64, f64)) -> Primitive {
    let size = rng.gen_range(8.0..=40.0f64).min(w - 2.0).min(h - 2.0);
    let x0 = rng.gen_range(0.0..=(w - size));
    let y0 = rng.gen_range(0.0..=(h - size));
    let color = random_color(rng, (0.0, 0.6));
    match rng.gen_range(0..4) {
        0 => {
            let sh = rng.gen_range(0.3..=1.0) * size;
            Primitive::Rect { x0, y0, x1: x0 + size, y1: y0 + sh, filled: rng.gen_bool(0.5), color }
        }
        1 => {
            let t = rng.gen_range(1.0..=2.0);
            let e = t / 2.0;
            let (ax, ay) = (x0 + e, y0 + e + rng.gen_range(0.0..=(size - t)));
            let (bx, by) = (x0 + size - e, y0 + e + rng.gen_range(0.0..=(size - t)));
            Primitive::Line { x0: ax, y0: ay, x1: bx, y1: by, thickness: t, color }
        }
        2 => {
            let t = rng.gen_range(1.0..=2.0);
            let r = size / 2.0 - t / 2.0;
            Primitive::Circle { cx: x0 + size / 2.0, cy: y0 + size / 2.0, r, thickness: t, color }
        }
        _ => {
            let n = rng.gen_range(4..=6);
            let points = (0..n)
                .map(|i| {
                    let x = x0 + 1.0 + (size - 2.0) * i as f64 / (n - 1) as f64;
                    (x, y0 + 1.0 + rng.gen_range(0.0..=(size - 3.0)))
                })
                .collect();
            Primitive::Graph { x0, y0, x1: x0 + size, y1: y0 + size, points, color }
        }
    }
}

/// Draws `count` primitives, each kept clear of every box in `keep_out`.
pub fn add_distractors(
    image: &mut Tensor,
    count: usize,
    keep_out: &[(f64, f64, f64, f64)],
    gap: f64,
    rng: &mut impl Rng,
) -> Vec<Primitive> {
    let (h, w) = (image.shape()[0] as f64, image.shape()[1] as f64);
    let mut drawn = Vec::new();
    for _ in 0..count {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let p = random_primitive(rng, (h, w));
            let b = expand(p.bounds(), gap);
            if keep_out.iter().all(|&k| !overlaps(b, k)) {
                p.draw(image);
                drawn.push(p);
                break;
            }
        }
    }
    drawn
}

/// Additive Gaussian noise clipped to `[0, 1]`, then a `(2r+1)²` box blur with
/// edge replication.
pub fn add_noise_blur(image: &mut Tensor, noise_stddev: f64, blur_radius: usize, rng: &mut impl Rng) {
    if noise_stddev > 0.0 {
        let dist = Normal::new(0.0, noise_stddev).expect("finite stddev");
        for v in image.data_mut() {
            *v = (*v + dist.sample(rng)).clamp(0.0, 1.0);
        }
    }
    if blur_radius > 0 {
        box_blur(image, blur_radius);
    }
}

fn box_blur(image: &mut Tensor, r: usize) {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let n = (2 * r + 1) as f64;
    let src = image.data().to_vec();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let mut acc = 0.0;
                for d in 0..=2 * r {
                    let xx = (x + d).saturating_sub(r).min(w - 1);
                    acc += src[(y * w + xx) * c + k];
                }
                tmp[(y * w + x) * c + k] = acc / n;
            }
        }
    }
    let out = image.data_mut();
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let mut acc = 0.0;
                for d in 0..=2 * r {
                    let yy = (y + d).saturating_sub(r).min(h - 1);
                    acc += tmp[(yy * w + x) * c + k];
                }
                out[(y * w + x) * c + k] = acc / n;
            }
        }
    }
}

/// A generated page with exact ground truth.
#[derive(Clone, Debug)]
pub struct DocumentSample {
    /// `H x W x 3` in `[0, 1]`.
    pub image: Tensor,
    pub boxes: Vec<TextBox>,
    pub char_centers: Vec<Vec<(f64, f64)>>,
    pub seed: u64,
    /// Lines drawn from the configured range; more than `boxes.len()` if placement failed.
    pub lines_requested: usize,
    pub distractors: Vec<Primitive>,
}

/// Random transcript over the alphabet.
pub fn random_text(alphabet: &Alphabet, (lo, hi): (usize, usize), rng: &mut impl Rng) -> String {
    let n = rng.gen_range(lo..=hi);
    (0..n).map(|_| *alphabet.tokens().choose(rng).expect("non-empty alphabet")).collect()
}

/// Generates one page from `seed`; identical inputs give identical samples.
pub fn generate_document(cfg: &GenConfig, alphabet: &Alphabet, seed: u64) -> Result<DocumentSample> {
    cfg.validate()?;
    if let Some(c) = alphabet.tokens().iter().find(|&&c| glyph(c).is_none()) {
        return Err(Error::Config(format!("alphabet token `{c}` has no glyph")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let bg = random_color(&mut rng, cfg.background);
    let mut image = Tensor::from_fn(&[cfg.height, cfg.width, 3], |i| bg[i % 3]);

    let lines_requested = rng.gen_range(cfg.lines.0..=cfg.lines.1);
    let mut placed: Vec<RenderedLine> = Vec::new();
    let mut keep_out = Vec::new();
    for _ in 0..lines_requested {
        let text = random_text(alphabet, cfg.text_len, &mut rng);
        let size = uniform(&mut rng, cfg.font_size);
        let angle = uniform(&mut rng, cfg.rotation_deg);
        let line = render_text_line(&text, size, angle)?;
        let (bx0, by0, bx1, by1) = line.text_box.bounds();
        let (ex, ey) = ((bx1 - bx0) / 2.0, (by1 - by0) / 2.0);
        if 2.0 * ex + 2.0 > w || 2.0 * ey + 2.0 > h {
            continue;
        }
        for _ in 0..PLACEMENT_ATTEMPTS {
            let cx = rng.gen_range(ex + 1.0..=w - ex - 1.0);
            let cy = rng.gen_range(ey + 1.0..=h - ey - 1.0);
            let bounds = expand((cx - ex, cy - ey, cx + ex, cy + ey), cfg.min_gap);
            if keep_out.iter().all(|&k| !overlaps(bounds, k)) {
                keep_out.push(bounds);
                placed.push(line.translated(cx, cy));
                break;
            }
        }
    }
    for line in &placed {
        let color = random_color(&mut rng, cfg.ink);
        line.draw(&mut image, color);
    }
    let n_distractors = rng.gen_range(cfg.distractors.0..=cfg.distractors.1);
    let distractors = add_distractors(&mut image, n_distractors, &keep_out, cfg.min_gap, &mut rng);
    let blur = rng.gen_range(cfg.blur_radius.0..=cfg.blur_radius.1);
    add_noise_blur(&mut image, cfg.noise_stddev, blur, &mut rng);

    Ok(DocumentSample {
        image,
        boxes: placed.iter().map(|l| l.text_box.clone()).collect(),
        char_centers: placed.into_iter().map(|l| l.char_centers).collect(),
        seed,
        lines_requested,
        distractors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean_cfg() -> GenConfig {
        GenConfig { noise_stddev: 0.0, blur_radius: (0, 0), distractors: (0, 0), ..GenConfig::default() }
    }

    #[test]
    fn render_examples() {
        let l = render_text_line("ab", 14.0, 0.0).unwrap();
        assert_eq!(l.char_centers.len(), 2);
        assert!(l.char_centers[0].0 < l.char_centers[1].0);
        assert_eq!(l.text_box.theta, 0.0);
        assert!((l.text_box.w - 11.0 * 2.0).abs() < 1e-12);
        assert!(render_text_line("aB", 14.0, 0.0).is_err());
        assert!(render_text_line("", 14.0, 0.0).is_err());
    }

    #[test]
    fn rotated_centers() {
        let flat = render_text_line("xyz1", 16.0, 0.0).unwrap();
        let rot = render_text_line("xyz1", 16.0, 10.0).unwrap();
        let (s, c) = 10f64.to_radians().sin_cos();
        for (&(x, y), &(rx, ry)) in flat.char_centers.iter().zip(&rot.char_centers) {
            assert!((x * c - y * s - rx).abs() < 0.5);
            assert!((x * s + y * c - ry).abs() < 0.5);
        }
    }

    #[test]
    fn deterministic_and_in_bounds() {
        let cfg = GenConfig { rotation_deg: (-10.0, 10.0), ..GenConfig::default() };
        let a = generate_document(&cfg, &Alphabet::default(), 42).unwrap();
        let b = generate_document(&cfg, &Alphabet::default(), 42).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.boxes, b.boxes);
        for bx in &a.boxes {
            let (x0, y0, x1, y1) = bx.bounds();
            assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 128.0 && y1 <= 128.0);
        }
    }

    #[test]
    fn exact_line_count_and_ink_centers() {
        let cfg = GenConfig { height: 256, width: 256, lines: (3, 3), ..clean_cfg() };
        let s = generate_document(&cfg, &Alphabet::default(), 7).unwrap();
        assert_eq!(s.boxes.len(), 3);
        let bg = s.image.data()[..3].to_vec();
        for (b, centers) in s.boxes.iter().zip(&s.char_centers) {
            assert_eq!(centers.len(), b.transcript.as_ref().unwrap().chars().count());
            for &(x, y) in centers {
                let o = ((y.floor() as usize) * 256 + x.floor() as usize) * 3;
                assert_ne!(&s.image.data()[o..o + 3], &bg[..]);
            }
        }
    }

    #[test]
    fn clean_render_matches_composite() {
        let cfg = clean_cfg();
        let alphabet = Alphabet::default();
        let s = generate_document(&cfg, &alphabet, 11).unwrap();
        let bg = s.image.data()[..3].to_vec();
        for b in &s.boxes {
            let text = b.transcript.clone().unwrap();
            let line = render_text_line(&text, b.h, b.theta.to_degrees()).unwrap().translated(b.cx, b.cy);
            for py in 0..128 {
                for px in 0..128 {
                    let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                    let o = (py * 128 + px) * 3;
                    let is_bg = s.image.data()[o..o + 3] == bg[..];
                    if line.covers(x, y) {
                        assert!(!is_bg);
                    } else if b.contains(x, y) {
                        assert!(is_bg);
                    }
                }
            }
        }
    }

    #[test]
    fn distractors_avoid_text() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut img = Tensor::full(&[128, 128, 3], 1.0);
        let before = img.clone();
        assert!(add_distractors(&mut img, 0, &[], 2.0, &mut rng).is_empty());
        assert_eq!(img, before);
        let keep = [(30.0, 30.0, 90.0, 60.0)];
        let prims = add_distractors(&mut img, 20, &keep, 2.0, &mut rng);
        assert!(!prims.is_empty());
        for p in &prims {
            assert!(!overlaps(p.bounds(), keep[0]));
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let mut img2 = Tensor::full(&[128, 128, 3], 1.0);
        add_distractors(&mut img2, 0, &[], 2.0, &mut rng2);
        assert_eq!(add_distractors(&mut img2, 20, &keep, 2.0, &mut rng2), prims);
    }

    #[test]
    fn noise_blur_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let orig = Tensor::from_fn(&[6, 7, 3], |i| (i % 11) as f64 / 10.0);
        let mut img = orig.clone();
        add_noise_blur(&mut img, 0.0, 0, &mut rng);
        assert_eq!(img, orig);
        let mut c = Tensor::full(&[6, 7, 3], 0.3);
        add_noise_blur(&mut c, 0.0, 2, &mut rng);
        assert!(c.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let mut imp = Tensor::zeros(&[7, 7, 3]);
        for k in 0..3 {
            imp.set(&[3, 3, k], 1.0);
        }
        add_noise_blur(&mut imp, 0.0, 1, &mut rng);
        for y in 0..7 {
            for x in 0..7 {
                let want = if (2..=4).contains(&y) && (2..=4).contains(&x) { 1.0 / 9.0 } else { 0.0 };
                assert!((imp.at(&[y, x, 0]) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn seeds_differ() {
        assert_ne!(sample_seed(1, 0), sample_seed(1, 1));
        assert_ne!(sample_seed(1, 0), sample_seed(2, 0));
        assert_eq!(sample_seed(9, 4), sample_seed(9, 4));
    }
}
