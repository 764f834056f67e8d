//! Fixtures shared by the benchmarks.

use textspot_core::geometry::TextBox;
use textspot_core::Tensor;

/// Deterministic pseudo-random tensor in [-1, 1).
pub fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    Tensor::from_fn(shape, |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    })
}

/// A grid of overlapping scored boxes.
pub fn box_grid(n: usize) -> Vec<TextBox> {
    (0..n)
        .map(|i| {
            let (x, y) = ((i % 16) as f64 * 6.0, (i / 16) as f64 * 5.0);
            TextBox::new(20.0 + x, 10.0 + y, 24.0 + (i % 5) as f64, 10.0 + (i % 3) as f64)
                .with_score(((i * 7919) % 1000) as f64 / 1000.0)
        })
        .collect()
}
