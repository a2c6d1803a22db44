#![allow(dead_code)]

use qpan_core::network::{ModelConfig, NetworkModel, Variant};
use qpan_core::sensing::{SensingMeta, SensingOperator};
use qpan_core::synth::synthetic_images;
use qpan_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `Phi = I`, so `Phi^T y` is the ground truth.
pub fn identity_op(n: usize) -> SensingOperator {
    let mut eye = Tensor::zeros(&[n, n]);
    for i in 0..n {
        eye.data_mut()[i * n + i] = 1.0;
    }
    SensingOperator::from_matrix(
        eye,
        SensingMeta {
            n,
            m: n,
            cs_ratio: 1.0,
            seed: 0,
        },
    )
    .unwrap()
}

pub fn toy_model(variant: Variant, regs: usize, layers: usize, filters: usize, patch: usize, seed: u64) -> NetworkModel {
    let cfg = ModelConfig {
        variant,
        regs,
        layers,
        filters,
        patch: (patch, patch),
        bits: None,
    };
    NetworkModel::new(&cfg, &mut rng(seed)).unwrap()
}

pub fn patches(count: usize, size: usize, seed: u64) -> Vec<Tensor> {
    synthetic_images(count, size, size, seed)
}

/// Central difference of `f` along `dir` at `theta`. The step shrinks until
/// the activation/branch pattern at both probes matches the base point, so
/// the difference never straddles a kink.
pub fn directional_fd(f: &dyn Fn(&[f64]) -> (f64, Vec<u8>), theta: &[f64], dir: &[f64]) -> f64 {
    let base = f(theta).1;
    let mut h = 1e-5;
    loop {
        let shifted = |s: f64| theta.iter().zip(dir).map(|(t, d)| t + s * d).collect::<Vec<_>>();
        let (fp, pp) = f(&shifted(h));
        let (fm, pm) = f(&shifted(-h));
        if (pp == base && pm == base) || h < 1e-9 {
            return (fp - fm) / (2.0 * h);
        }
        h /= 4.0;
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub struct GroupCheck {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Below this both derivatives count as zero; relative error is meaningless
/// there. The first layer's step size is such a case: `x0 = Phi^T y` is a
/// fixed point of the gradient step, so its derivative vanishes identically.
pub const ZERO_FLOOR: f64 = 1e-10;

impl GroupCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err < tol || (self.analytic.abs() < ZERO_FLOOR && self.numeric.abs() < ZERO_FLOOR)
    }
}

/// Compares every parameter group's gradient, projected on a random
/// direction inside the group, with a kink-aware central difference.
pub fn check_gradients(
    model: &NetworkModel,
    op: &SensingOperator,
    ys: &[Tensor],
    xs: &[Tensor],
    gamma_loss: f64,
    seed: u64,
) -> Vec<GroupCheck> {
    use rand_distr::{Distribution, StandardNormal};
    let (_, grads) = model.loss_and_grad(op, ys, xs, gamma_loss).unwrap();
    let theta = model.flat_params();
    let f = |p: &[f64]| {
        let mut m = model.clone();
        m.set_flat_params(p).unwrap();
        let loss = m.evaluate_loss(op, ys, xs, gamma_loss).unwrap().total;
        (loss, m.kink_signature(op, ys, xs).unwrap())
    };
    let mut r = rng(seed);
    model
        .param_groups()
        .into_iter()
        .map(|g| {
            let mut dir = vec![0.0; theta.len()];
            for d in &mut dir[g.range.clone()] {
                *d = if g.range.len() == 1 { 1.0 } else { StandardNormal.sample(&mut r) };
            }
            let analytic: f64 = grads.flat.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let numeric = directional_fd(&f, &theta, &dir);
            GroupCheck {
                rel_err: rel_err(analytic, numeric),
                name: g.name,
                analytic,
                numeric,
            }
        })
        .collect()
}

/// Windowed SSIM written out directly: a 2-D Gaussian built without
/// separability, centred moments per window, no shared filtering.
#[allow(dead_code)]
pub fn naive_ssim(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let (win, sigma) = (11usize, 1.5f64);
    let half = (win / 2) as f64;
    let mut kernel = vec![0.0; win * win];
    for a in 0..win {
        for b in 0..win {
            let (da, db) = (a as f64 - half, b as f64 - half);
            kernel[a * win + b] = (-(da * da + db * db) / (2.0 * sigma * sigma)).exp();
        }
    }
    let z: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= z);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..=h - win {
        for j in 0..=w - win {
            let at = |img: &[f64], a: usize, b: usize| img[(i + a) * w + j + b];
            let (mut mx, mut my) = (0.0, 0.0);
            for a in 0..win {
                for b in 0..win {
                    mx += kernel[a * win + b] * at(x, a, b);
                    my += kernel[a * win + b] * at(y, a, b);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for a in 0..win {
                for b in 0..win {
                    let k = kernel[a * win + b];
                    let (dx, dy) = (at(x, a, b) - mx, at(y, a, b) - my);
                    vx += k * dx * dx;
                    vy += k * dy * dy;
                    cxy += k * dx * dy;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}
