//! Seeded piecewise-smooth test images: a smooth background with a few
//! shaded rectangles and disks on top.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

struct Shape {
    kind: u8,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    base: f64,
    gy: f64,
    gx: f64,
}

/// One `[1, h, w]` image with values in `[0, 1]`.
pub fn piecewise_smooth<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Tensor {
    let (hf, wf) = (h as f64, w as f64);
    let bg = rng.random_range(0.2..0.8);
    let bgy = rng.random_range(-0.3..0.3) / hf;
    let bgx = rng.random_range(-0.3..0.3) / wf;
    let n = rng.random_range(2..=5);
    let shapes: Vec<Shape> = (0..n)
        .map(|_| Shape {
            kind: rng.random_range(0..2),
            cy: rng.random_range(0.0..hf),
            cx: rng.random_range(0.0..wf),
            ry: rng.random_range(0.15..0.45) * hf,
            rx: rng.random_range(0.15..0.45) * wf,
            base: rng.random_range(0.0..1.0),
            gy: rng.random_range(-0.4..0.4) / hf,
            gx: rng.random_range(-0.4..0.4) / wf,
        })
        .collect();
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64, j as f64);
            let mut v = bg + bgy * (y - hf / 2.0) + bgx * (x - wf / 2.0);
            for s in &shapes {
                let (dy, dx) = ((y - s.cy) / s.ry, (x - s.cx) / s.rx);
                let inside = match s.kind {
                    0 => dy.abs() <= 1.0 && dx.abs() <= 1.0,
                    _ => dy * dy + dx * dx <= 1.0,
                };
                if inside {
                    v = s.base + s.gy * (y - s.cy) + s.gx * (x - s.cx);
                }
            }
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![1, h, w], data).expect("extents are positive")
}

/// `count` images drawn from a generator seeded with `seed`.
pub fn synthetic_images(count: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| piecewise_smooth(h, w, &mut rng)).collect()
}
