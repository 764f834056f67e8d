//! Oracles and checkers shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use textspot_core::backbone::{FeatureMap, Level};
use textspot_core::geometry::TextBox;
use textspot_core::model::{box_loss, cross_entropy, objectness_loss};
use textspot_core::recognition::{apply_attention, attention_loss, ctc_loss, elman_rnn, ApplyMode};
use textspot_core::roi::{recognition_width, roi_align, roi_recognition_align, RecognitionPoolConfig};
use textspot_core::tensor::Conv2dSpec;
use textspot_core::{Graph, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

// ---------------------------------------------------------------------------
// Finite differences

type Op<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

fn projected(f: &Op, inputs: &[Tensor], proj_seed: u64, want_grad: bool) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    let loss = if g.value(out).is_scalar() {
        out
    } else {
        let mut r = rng(proj_seed);
        let w = g.constant(rand_tensor(&mut r, g.shape(out)));
        let p = g.mul(out, w).unwrap();
        g.sum(p)
    };
    let value = g.value(loss).item();
    if !want_grad {
        return (value, Vec::new());
    }
    g.backward(loss).unwrap();
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    (value, grads)
}

/// Worst relative error `|a - n| / max(|a|, |n|, 1e-3)` between analytic and
/// central-difference gradients. Inputs with more than `max_entries` values are
/// probed at a random subset of entries.
pub fn max_grad_error(f: &Op, inputs: &[Tensor], max_entries: usize, seed: u64) -> f64 {
    let (_, analytic) = projected(f, inputs, seed, true);
    let mut pick = rng(seed ^ 0x5eed);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let entries: Vec<usize> = if input.len() <= max_entries {
            (0..input.len()).collect()
        } else {
            (0..max_entries).map(|_| pick.gen_range(0..input.len())).collect()
        };
        for i in entries {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let n = (projected(f, &plus, seed, false).0 - projected(f, &minus, seed, false).0) / (2.0 * h);
            let a = analytic[k].data()[i];
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-3));
        }
    }
    worst
}

pub struct GradCase {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
    pub tol: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.instances >= 20 && self.worst < self.tol
    }
}

fn run_case(name: &'static str, tol: f64, n: usize, mut make: impl FnMut(&mut ChaCha8Rng, u64) -> f64) -> GradCase {
    let mut r = rng(name.bytes().fold(7u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)));
    let worst = (0..n).map(|i| make(&mut r, i as u64)).fold(0.0, f64::max);
    GradCase { name, instances: n, worst, tol }
}

fn rand_box(r: &mut impl Rng, extent: f64, rotated: bool) -> TextBox {
    let w = r.gen_range(2.0..extent * 0.8);
    let h = r.gen_range(2.0..extent * 0.5);
    let b = TextBox::new(r.gen_range(w / 2.0..extent - w / 2.0), r.gen_range(h / 2.0..extent - h / 2.0), w, h);
    if rotated {
        b.with_theta(r.gen_range(-0.5..0.5))
    } else {
        b
    }
}

fn away_from_zero(t: Tensor) -> Tensor {
    t.map(|v| if v.abs() < 0.05 { 0.3 } else { v })
}

/// Randomized gradient checks over every differentiable operation.
pub fn gradient_suite(instances: usize) -> Vec<GradCase> {
    const TOL: f64 = 1e-5;
    const CTC_TOL: f64 = 1e-4;
    let n = instances;
    vec![
        run_case("elementwise", TOL, n, |r, s| {
            let a = away_from_zero(rand_tensor(r, &[3, 4]));
            let b = rand_tensor(r, &[4]);
            let f = |g: &mut Graph, v: &[Var]| {
                let m = g.mul(v[0], v[1]).unwrap();
                let t = g.tanh(m);
                let q = g.sigmoid(v[0]);
                let e = g.exp(q);
                let x = g.relu(v[0]);
                let y = g.add(t, e).unwrap();
                let y = g.sub(y, x).unwrap();
                g.add_scalar(y, 0.5)
            };
            max_grad_error(&f, &[a, b], 64, s)
        }),
        run_case("softmax", TOL, n, |r, s| {
            let a = rand_tensor(r, &[3, 5]);
            let f = |g: &mut Graph, v: &[Var]| {
                let p = g.softmax(v[0]);
                let l = g.log_softmax(v[0]);
                let y = g.mul(p, l).unwrap();
                g.scale(y, 2.0)
            };
            max_grad_error(&f, &[a], 64, s)
        }),
        run_case("matmul", TOL, n, |r, s| {
            let a = rand_tensor(r, &[3, 4]);
            let b = rand_tensor(r, &[4, 2]);
            max_grad_error(&|g, v| g.matmul(v[0], v[1]).unwrap(), &[a, b], 64, s)
        }),
        run_case("conv2d", TOL, n, |r, s| {
            let (h, w) = (r.gen_range(3..7), r.gen_range(3..7));
            let (cin, cout) = (r.gen_range(1..4), r.gen_range(1..4));
            let k = r.gen_range(1..4);
            let spec = Conv2dSpec::new(r.gen_range(1..3), r.gen_range(0..2));
            let x = rand_tensor(r, &[h, w, cin]);
            let kernel = rand_tensor(r, &[k, k, cin, cout]);
            max_grad_error(&|g, v| g.conv2d(v[0], v[1], spec).unwrap(), &[x, kernel], 48, s)
        }),
        run_case("upsample2x", TOL, n, |r, s| {
            let x = rand_tensor(r, &[3, 2, 2]);
            max_grad_error(&|g, v| g.upsample2x(v[0]).unwrap(), &[x], 64, s)
        }),
        run_case("bilinear_sample", TOL, n, |r, s| {
            let x = rand_tensor(r, &[5, 6, 2]);
            // Sample positions away from integer grid lines where the kernel has kinks.
            let pts: Vec<(f64, f64)> = (0..6)
                .map(|_| (r.gen_range(0..4) as f64 + r.gen_range(0.1..0.9), r.gen_range(0..5) as f64 + r.gen_range(0.1..0.9)))
                .collect();
            max_grad_error(&|g, v| g.bilinear_sample(v[0], &pts).unwrap(), &[x], 64, s)
        }),
        run_case("roi_align", TOL, n, |r, s| {
            let x = rand_tensor(r, &[6, 6, 2]);
            let rot = r.gen_bool(0.5);
            let b = rand_box(r, 24.0, rot);
            let f = |g: &mut Graph, v: &[Var]| {
                let map = FeatureMap { level: Level::P2, stride: 4, tensor: v[0] };
                roi_align(g, &map, &b, 3, 3).unwrap()
            };
            max_grad_error(&f, &[x], 72, s)
        }),
        run_case("roi_recognition_align", TOL, n, |r, s| {
            let x = rand_tensor(r, &[6, 8, 2]);
            let rot = r.gen_bool(0.3);
            let b = rand_box(r, 28.0, rot);
            let cfg = RecognitionPoolConfig { height: 2, width: 12 };
            let f = |g: &mut Graph, v: &[Var]| {
                let map = FeatureMap { level: Level::C2, stride: 4, tensor: v[0] };
                roi_recognition_align(g, &map, &b, &cfg).unwrap().tensor
            };
            max_grad_error(&f, &[x], 96, s)
        }),
        run_case("attention", TOL, n, |r, s| {
            let (w, c) = (r.gen_range(3..7), r.gen_range(2..4));
            let seq = rand_tensor(r, &[w, c]);
            let kernel = rand_tensor(r, &[1, 3, c, c]);
            let fc = rand_tensor(r, &[c, 1]);
            let concat = r.gen_bool(0.5);
            let f = |g: &mut Graph, v: &[Var]| {
                let x = g.reshape(v[0], &[1, w, c]).unwrap();
                let h = g.conv2d(x, v[1], Conv2dSpec { stride: 1, pad_h: 0, pad_w: 1 }).unwrap();
                let h = g.relu(h);
                let h = g.reshape(h, &[w, c]).unwrap();
                let logit = g.matmul(h, v[2]).unwrap();
                let a = g.sigmoid(logit);
                let a = g.reshape(a, &[w]).unwrap();
                let mode = if concat { ApplyMode::Concat } else { ApplyMode::Multiply };
                apply_attention(g, v[0], a, mode).unwrap()
            };
            max_grad_error(&f, &[seq, kernel, fc], 64, s)
        }),
        run_case("elman_rnn", TOL, n, |r, s| {
            let (w, d) = (r.gen_range(2..6), r.gen_range(1..4));
            let x = rand_tensor(r, &[w, d]);
            let wh = rand_tensor(r, &[d, d]).map(|v| v * 0.5);
            max_grad_error(&|g, v| elman_rnn(g, v[0], v[1]).unwrap(), &[x, wh], 64, s)
        }),
        run_case("ctc", CTC_TOL, n, |r, s| {
            let k = r.gen_range(2..6);
            let w = r.gen_range(3..9);
            let len = r.gen_range(1..4usize).min(w / 2).max(1);
            let target: Vec<usize> = (0..len).map(|_| r.gen_range(1..k)).collect();
            let logits = rand_tensor(r, &[w, k]).map(|v| 2.0 * v);
            max_grad_error(&|g, v| ctc_loss(g, v[0], &target).unwrap().loss, &[logits], 64, s)
        }),
        run_case("attention_loss", TOL, n, |r, s| {
            let w = r.gen_range(2..10);
            let a = Tensor::from_fn(&[w], |_| r.gen_range(0.05..0.95));
            let mask: Vec<f64> = (0..w).map(|_| if r.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
            max_grad_error(&|g, v| attention_loss(g, v[0], &mask).unwrap(), &[a], 64, s)
        }),
        run_case("objectness_loss", TOL, n, |r, s| {
            let logits = rand_tensor(r, &[10]).map(|v| 3.0 * v);
            let picks: Vec<(usize, f64)> = (0..6).map(|_| (r.gen_range(0..10), if r.gen_bool(0.5) { 1.0 } else { 0.0 })).collect();
            max_grad_error(&|g, v| objectness_loss(g, v[0], &picks), &[logits], 64, s)
        }),
        run_case("smooth_l1_box_loss", TOL, n, |r, s| {
            let pred = rand_tensor(r, &[5, 4]).map(|v| 0.5 * v);
            let rows: Vec<(usize, Vec<f64>)> = (0..3)
                .map(|_| (r.gen_range(0..5), (0..4).map(|_| r.gen_range(-0.5..0.5)).collect()))
                .collect();
            max_grad_error(&|g, v| box_loss(g, v[0], &rows, 3.0), &[pred], 64, s)
        }),
        run_case("cross_entropy", TOL, n, |r, s| {
            let logits = rand_tensor(r, &[4, 3]).map(|v| 2.0 * v);
            let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..3)).collect();
            max_grad_error(&|g, v| cross_entropy(g, v[0], &labels), &[logits], 64, s)
        }),
        run_case("shape_ops", TOL, n, |r, s| {
            let a = rand_tensor(r, &[2, 3, 2]);
            let b = rand_tensor(r, &[3, 2]);
            let f = |g: &mut Graph, v: &[Var]| {
                let p = g.pad_width(v[0], 5).unwrap();
                let p = g.reshape(p, &[10, 2]).unwrap();
                let rows = g.gather_rows(p, &[0, 3, 3, 7]).unwrap();
                let cat = g.concat_rows(&[rows, v[1]]).unwrap();
                let wide = g.concat_last(&[cat, cat]).unwrap();
                let m = g.mean(wide);
                let mx = g.max(wide).unwrap();
                let s = g.sum(wide);
                let t = g.add(m, mx).unwrap();
                let t = g.add(t, s).unwrap();
                let t = g.reshape(t, &[1]).unwrap();
                let t = g.concat_rows(&[t, t]).unwrap();
                g.mul(t, t).unwrap()
            };
            max_grad_error(&f, &[a, b], 64, s)
        }),
    ]
}

// ---------------------------------------------------------------------------
// CTC path enumeration

/// Negative log-probability of `target` summed over every blank-augmented path.
pub fn ctc_brute_force(logits: &Tensor, target: &[usize]) -> f64 {
    let (w, k) = (logits.shape()[0], logits.shape()[1]);
    let probs: Vec<Vec<f64>> = logits
        .data()
        .chunks(k)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            row.iter().map(|v| (v - m).exp() / z).collect()
        })
        .collect();
    let mut total = 0.0;
    let mut path = vec![0usize; w];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &c in &path {
            if c != 0 && prev != Some(c) {
                collapsed.push(c);
            }
            prev = Some(c);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(t, &c)| probs[t][c]).product::<f64>();
        }
        // Next path in lexicographic order.
        let mut i = 0;
        loop {
            if i == w {
                return -total.ln();
            }
            path[i] += 1;
            if path[i] < k {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

// ---------------------------------------------------------------------------
// Raster IoU and greedy NMS

/// Pixel-count IoU of two axis-aligned boxes on a grid of `1/sub`-pixel cells: a
/// cell belongs to a box when its center lies inside.
pub fn raster_iou(a: &TextBox, b: &TextBox, sub: usize) -> f64 {
    let s = sub as f64;
    let inside = |bx: &TextBox, x: f64, y: f64| (x - bx.cx).abs() <= bx.w / 2.0 && (y - bx.cy).abs() <= bx.h / 2.0;
    let lo = |c: f64, e: f64, c2: f64, e2: f64| ((c - e / 2.0).min(c2 - e2 / 2.0) * s).floor() as i64 - 1;
    let hi = |c: f64, e: f64, c2: f64, e2: f64| ((c + e / 2.0).max(c2 + e2 / 2.0) * s).ceil() as i64 + 1;
    let (x0, x1) = (lo(a.cx, a.w, b.cx, b.w), hi(a.cx, a.w, b.cx, b.w));
    let (y0, y1) = (lo(a.cy, a.h, b.cy, b.h), hi(a.cy, a.h, b.cy, b.h));
    let (mut inter, mut union) = (0u64, 0u64);
    for py in y0..y1 {
        let y = (py as f64 + 0.5) / s;
        for px in x0..x1 {
            let x = (px as f64 + 0.5) / s;
            match (inside(a, x, y), inside(b, x, y)) {
                (true, true) => {
                    inter += 1;
                    union += 1;
                }
                (false, false) => {}
                _ => union += 1,
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Worst-case `|closed form - raster_iou(a, b, sub)|` for real-valued boxes. Along
/// each axis a box covers its extent in cells give or take one, so a box of
/// `w x h` is miscounted by at most `(w + h) / sub + 1 / sub^2` in area; the
/// intersection is a box too and the union count follows by inclusion-exclusion.
pub fn raster_bound(a: &TextBox, b: &TextBox, sub: usize) -> f64 {
    let s = sub as f64;
    let e = |w: f64, h: f64| (w + h) / s + 1.0 / (s * s);
    let (ax0, ay0, ax1, ay1) = a.bounds();
    let (bx0, by0, bx1, by1) = b.bounds();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let ei = if iw > 0.0 && ih > 0.0 { e(iw, ih) } else { 0.0 };
    let eu = e(a.w, a.h) + e(b.w, b.h) + ei;
    let union = a.area() + b.area() - iw * ih;
    ((ei + eu) / (union - eu).max(1e-9)).min(1.0)
}

/// Greedy NMS by direct simulation: repeatedly keep the highest-scoring remaining
/// box and drop everything overlapping it by more than `thresh`.
pub fn brute_force_nms(boxes: &[TextBox], thresh: f64) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !remaining.is_empty() {
        let (pos, &best) = remaining
            .iter()
            .enumerate()
            .max_by(|(_, &i), (_, &j)| boxes[i].score.total_cmp(&boxes[j].score).then(j.cmp(&i)))
            .unwrap();
        remaining.remove(pos);
        keep.push(best);
        remaining.retain(|&j| raster_iou(&boxes[best], &boxes[j], 1) <= thresh);
    }
    keep
}

// ---------------------------------------------------------------------------
// Recognition pooling invariants

pub struct PoolCheck {
    pub boxes: usize,
    pub failures: Vec<String>,
}

/// Shape, padding and aspect-ratio checks of the recognition pooling on random boxes.
pub fn recognition_pool_checks(n: usize, seed: u64) -> PoolCheck {
    let mut r = rng(seed);
    let mut failures = Vec::new();
    let configs = [RecognitionPoolConfig::SMALL, RecognitionPoolConfig::MEDIUM, RecognitionPoolConfig::LARGE];
    for i in 0..n {
        let cfg = configs[i % 3];
        let c = r.gen_range(1..5);
        let (mh, mw) = (r.gen_range(8..24), r.gen_range(8..48));
        let stride = 4;
        let b = {
            let w = r.gen_range(4.0..(mw * stride) as f64 * 2.0);
            let h = r.gen_range(4.0..(mh * stride) as f64);
            let t = TextBox::new(r.gen_range(0.0..(mw * stride) as f64), r.gen_range(0.0..(mh * stride) as f64), w, h);
            if r.gen_bool(0.25) {
                t.with_theta(r.gen_range(-0.6..0.6))
            } else {
                t
            }
        };
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut r, &[mh, mw, c]).map(|v| v + 2.0));
        let map = FeatureMap { level: Level::C2, stride, tensor: x };
        let roi = roi_recognition_align(&mut g, &map, &b, &cfg).unwrap();
        let out = g.value(roi.tensor);
        if out.shape() != [cfg.height, cfg.width, c] {
            failures.push(format!("box {i}: shape {:?}", out.shape()));
            continue;
        }
        if roi.valid_width + roi.pad_width != cfg.width {
            failures.push(format!("box {i}: {} + {} != {}", roi.valid_width, roi.pad_width, cfg.width));
        }
        let padded_zero = (0..cfg.height).all(|y| {
            (roi.valid_width..cfg.width).all(|x| (0..c).all(|ch| out.at(&[y, x, ch]) == 0.0))
        });
        if !padded_zero {
            failures.push(format!("box {i}: padded columns are not zero"));
        }
        let (wc, hc) = ((b.w / stride as f64).max(1.0), (b.h / stride as f64).max(1.0));
        let ideal = wc * cfg.height as f64 / hc;
        let ok = if roi.overflow {
            roi.valid_width == cfg.width && ideal > cfg.width as f64
        } else {
            (roi.valid_width as f64 - ideal).abs() <= 0.5 + 1e-9
        };
        if !ok {
            failures.push(format!("box {i}: valid width {} for ideal {ideal:.3}", roi.valid_width));
        }
    }
    let (wr, overflow) = recognition_width(60.0, 10.0, &RecognitionPoolConfig::SMALL);
    if (wr, overflow) != (30, false) || RecognitionPoolConfig::SMALL.width - wr != 150 {
        failures.push(format!("worked example gave W_r = {wr}"));
    }
    PoolCheck { boxes: n, failures }
}
