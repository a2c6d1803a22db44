//! Fixed-parameter iterative solvers: PAISA and its residual form PAISA+.
//!
//! Both start from `x0 = Phi^T y` and run a fixed number of iterations of
//! gradient step followed by the proximal-averaged transform-domain update.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::penalties::{MixtureWeights, PenaltySpec};
use crate::sensing::SensingOperator;
use crate::tensor::{conv2d, Tensor};
use crate::transforms::{
    conv_relu_conv, pan_layer_forward, plus_layer_forward, PanTransform, PlusTransform, ProxMix,
};

/// Iteration count, step size, penalties, mixture weights and transform.
#[derive(Clone, Debug)]
pub struct SolverConfig<T> {
    pub iterations: usize,
    pub rho: f64,
    pub penalties: Vec<PenaltySpec>,
    pub alphas: MixtureWeights,
    pub transform: T,
    /// Spatial size of the signal, `height * width == op.n()`.
    pub patch: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// `0.5 ||Phi x - y||^2 + sum_i alpha_i g_i(F(x))`
    pub objective: f64,
    /// `||Phi x - y||_2`
    pub residual_norm: f64,
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub x: Tensor,
    pub trace: Vec<TraceEntry>,
}

impl<T> SolverConfig<T> {
    fn validate(&self, op: &SensingOperator, y: &Tensor) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("iteration count must be at least 1".into()));
        }
        if !(self.rho > 0.0) {
            return Err(Error::InvalidParameter(format!("step size must be > 0, got {}", self.rho)));
        }
        if self.penalties.is_empty() || self.penalties.len() != self.alphas.len() {
            return Err(Error::shape(
                "solver",
                format!("{} penalties", self.alphas.len()),
                self.penalties.len(),
            ));
        }
        for p in &self.penalties {
            p.validate()?;
        }
        if self.patch.0 * self.patch.1 != op.n() {
            return Err(Error::shape(
                "solver",
                format!("patch with {} pixels", op.n()),
                format!("{}x{}", self.patch.0, self.patch.1),
            ));
        }
        if y.len() != op.m() {
            return Err(Error::shape("solver", format!("{} measurements", op.m()), y.len()));
        }
        Ok(())
    }

    fn shrinkage(&self) -> ProxMix {
        ProxMix {
            specs: self.penalties.clone(),
            alphas: self.alphas.clone(),
        }
    }

    fn initial(&self, op: &SensingOperator, y: &Tensor) -> Result<Tensor> {
        op.adjoint(y, &[1, self.patch.0, self.patch.1])
    }
}

fn regularizer(penalties: &[PenaltySpec], alphas: &MixtureWeights, coeffs: &Tensor) -> f64 {
    penalties
        .iter()
        .zip(alphas.as_slice())
        .map(|(p, a)| a * p.total_value(coeffs))
        .sum()
}

fn trace_entry(
    iteration: usize,
    op: &SensingOperator,
    x: &Tensor,
    y: &Tensor,
    reg: f64,
) -> Result<TraceEntry> {
    let residual_norm = op.residual_norm(x, y)?;
    Ok(TraceEntry {
        iteration,
        objective: 0.5 * residual_norm * residual_norm + reg,
        residual_norm,
    })
}

/// PAISA: `r = x - rho Phi^T (Phi x - y)`, then `x = Ft(sum_i alpha_i P_i(F(r)))`.
pub fn run_paisa(cfg: &SolverConfig<PanTransform>, op: &SensingOperator, y: &Tensor) -> Result<Solution> {
    cfg.validate(op, y)?;
    let shrink = cfg.shrinkage();
    let w = cfg.transform.weights();
    let mut x = cfg.initial(op, y)?;
    let mut trace = Vec::with_capacity(cfg.iterations);
    for k in 0..cfg.iterations {
        let r = op.gradient_step(&x, y, cfg.rho)?;
        x = pan_layer_forward(w, &shrink, &r)?.0;
        let coeffs = conv_relu_conv(w.a, w.b, &x)?.0;
        let reg = regularizer(&cfg.penalties, &cfg.alphas, &coeffs);
        trace.push(trace_entry(k + 1, op, &x, y, reg)?);
    }
    Ok(Solution { x, trace })
}

/// PAISA+: `x = r + G(Ht(sum_i alpha_i P_i(H(D r))))`.
pub fn run_paisa_plus(cfg: &SolverConfig<PlusTransform>, op: &SensingOperator, y: &Tensor) -> Result<Solution> {
    cfg.validate(op, y)?;
    let shrink = cfg.shrinkage();
    let w = cfg.transform.weights();
    let mut x = cfg.initial(op, y)?;
    let mut trace = Vec::with_capacity(cfg.iterations);
    for k in 0..cfg.iterations {
        let r = op.gradient_step(&x, y, cfg.rho)?;
        x = plus_layer_forward(w, &shrink, &r)?.0;
        let features = conv2d(&x, w.d)?;
        let coeffs = conv_relu_conv(w.h1, w.h2, &features)?.0;
        let reg = regularizer(&cfg.penalties, &cfg.alphas, &coeffs);
        trace.push(trace_entry(k + 1, op, &x, y, reg)?);
    }
    Ok(Solution { x, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;
    use crate::penalties::prox_elementwise;
    use crate::sensing::make_sensing;
    use crate::tensor::{relu, BankRole, FilterBank};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        Tensor::random_normal(&[1, h, w], 0.3, &mut rng(seed)).map(|v| (v + 0.5).clamp(0.0, 1.0))
    }

    fn three_penalties(lambda: f64) -> Vec<PenaltySpec> {
        vec![
            PenaltySpec::l1(lambda).unwrap(),
            PenaltySpec::mcp(lambda, 2.0).unwrap(),
            PenaltySpec::scad(lambda, 3.7).unwrap(),
        ]
    }

    fn pan_cfg(iterations: usize, penalties: Vec<PenaltySpec>, t: PanTransform, patch: (usize, usize)) -> SolverConfig<PanTransform> {
        let p = penalties.len();
        SolverConfig {
            iterations,
            rho: 1.0,
            penalties,
            alphas: MixtureWeights::uniform(p),
            transform: t,
            patch,
        }
    }

    #[test]
    fn exact_recovery_with_square_sensing() {
        let op = make_sensing(64, 1.0, 1).unwrap();
        let x = image(8, 8, 2);
        let y = op.measure(&x).unwrap();
        let cfg = pan_cfg(1, three_penalties(1e-6), PanTransform::identity(4), (8, 8));
        let sol = run_paisa(&cfg, &op, &y).unwrap();
        assert!(psnr(&sol.x, &x, 1.0).unwrap() >= 60.0);
    }

    #[test]
    fn zero_iterations_rejected() {
        let op = make_sensing(16, 0.5, 1).unwrap();
        let cfg = pan_cfg(0, three_penalties(0.1), PanTransform::identity(2), (4, 4));
        assert!(run_paisa(&cfg, &op, &Tensor::zeros(&[8])).is_err());
        let cfg = pan_cfg(1, three_penalties(0.1), PanTransform::identity(2), (4, 5));
        assert!(run_paisa(&cfg, &op, &Tensor::zeros(&[8])).is_err());
    }

    #[test]
    fn single_iteration_is_one_hand_composed_update() {
        let op = make_sensing(36, 0.5, 3).unwrap();
        let x_true = image(6, 6, 4);
        let y = op.measure(&x_true).unwrap();
        let t = PanTransform::random(3, &mut rng(5));
        let cfg = SolverConfig {
            rho: 0.8,
            ..pan_cfg(1, three_penalties(0.05), t.clone(), (6, 6))
        };
        let sol = run_paisa(&cfg, &op, &y).unwrap();

        let x0 = op.adjoint(&y, &[1, 6, 6]).unwrap();
        let r = op.gradient_step(&x0, &y, 0.8).unwrap();
        let u = t.analysis.b.conv2d(&relu(&t.analysis.a.conv2d(&r).unwrap())).unwrap();
        let mut s = Tensor::zeros(u.shape());
        for p in &cfg.penalties {
            s.axpy(1.0 / 3.0, &prox_elementwise(p, &u));
        }
        let x1 = t.synthesis.at.conv2d(&relu(&t.synthesis.bt.conv2d(&s).unwrap())).unwrap();
        for (a, b) in sol.x.data().iter().zip(x1.data()) {
            assert!((a - b).abs() <= 1e-13);
        }
        assert_eq!(sol.trace.len(), 1);
    }

    #[test]
    fn single_l1_penalty_is_analysis_ista() {
        // Independent path: soft thresholding written out by hand.
        let op = make_sensing(25, 0.6, 6).unwrap();
        let x_true = image(5, 5, 7);
        let y = op.measure(&x_true).unwrap();
        let t = PanTransform::random(2, &mut rng(8));
        let lambda = 0.03;
        let cfg = pan_cfg(4, vec![PenaltySpec::l1(lambda).unwrap()], t.clone(), (5, 5));
        let sol = run_paisa(&cfg, &op, &y).unwrap();

        let mut x = op.adjoint(&y, &[1, 5, 5]).unwrap();
        for _ in 0..4 {
            let px = op.measure(&x).unwrap().sub(&y);
            let mut r = x.clone();
            r.axpy(-1.0, &op.adjoint(&px, &[1, 5, 5]).unwrap());
            let u = t.analysis.b.conv2d(&relu(&t.analysis.a.conv2d(&r).unwrap())).unwrap();
            let s = u.map(|v| v.signum() * (v.abs() - lambda).max(0.0));
            x = t.synthesis.at.conv2d(&relu(&t.synthesis.bt.conv2d(&s).unwrap())).unwrap();
        }
        for (a, b) in sol.x.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn trace_is_finite_with_one_entry_per_iteration() {
        let op = make_sensing(49, 0.3, 9).unwrap();
        let y = op.measure(&image(7, 7, 10)).unwrap();
        let cfg = pan_cfg(7, three_penalties(0.02), PanTransform::random(4, &mut rng(11)), (7, 7));
        let sol = run_paisa(&cfg, &op, &y).unwrap();
        assert_eq!(sol.trace.len(), 7);
        assert!(sol.trace.iter().all(|e| e.objective.is_finite() && e.residual_norm.is_finite()));
        assert!(sol.x.is_finite());
    }

    #[test]
    fn plus_with_zero_g_is_plain_gradient_descent() {
        let op = make_sensing(49, 0.3, 12).unwrap();
        let y = op.measure(&image(7, 7, 13)).unwrap();
        let mut t = PlusTransform::random(4, &mut rng(14));
        t.g = FilterBank::zeros(1, 4, BankRole::G);
        let cfg = SolverConfig {
            iterations: 6,
            rho: 0.7,
            penalties: three_penalties(0.05),
            alphas: MixtureWeights::uniform(3),
            transform: t,
            patch: (7, 7),
        };
        let sol = run_paisa_plus(&cfg, &op, &y).unwrap();
        let mut x = op.adjoint(&y, &[1, 7, 7]).unwrap();
        for _ in 0..6 {
            x = op.gradient_step(&x, &y, 0.7).unwrap();
        }
        assert_eq!(sol.x, x);
        for w in sol.trace.windows(2) {
            assert!(w[1].residual_norm <= w[0].residual_norm + 1e-12);
        }
    }

    #[test]
    fn plus_single_iteration_is_forward_plus_of_gradient_step() {
        let op = make_sensing(36, 0.4, 15).unwrap();
        let y = op.measure(&image(6, 6, 16)).unwrap();
        let t = PlusTransform::random(3, &mut rng(17));
        let cfg = SolverConfig {
            iterations: 1,
            rho: 0.9,
            penalties: three_penalties(0.04),
            alphas: MixtureWeights::uniform(3),
            transform: t.clone(),
            patch: (6, 6),
        };
        let sol = run_paisa_plus(&cfg, &op, &y).unwrap();
        let x0 = op.adjoint(&y, &[1, 6, 6]).unwrap();
        let r = op.gradient_step(&x0, &y, 0.9).unwrap();
        let mix = ProxMix {
            specs: cfg.penalties.clone(),
            alphas: cfg.alphas.clone(),
        };
        let (expected, _) = crate::transforms::forward_plus(&t, &r, &mix).unwrap();
        assert_eq!(sol.x, expected);
    }

    #[test]
    fn shrinking_lambda_approaches_least_squares_point() {
        let op = make_sensing(64, 1.0, 18).unwrap();
        let x_true = image(8, 8, 19);
        let y = op.measure(&x_true).unwrap();
        let target = op.adjoint(&y, &[1, 8, 8]).unwrap();
        let dists: Vec<f64> = [1e-2, 1e-4, 1e-6]
            .iter()
            .map(|&l| {
                let cfg = pan_cfg(3, three_penalties(l), PanTransform::identity(4), (8, 8));
                run_paisa(&cfg, &op, &y).unwrap().x.sub(&target).norm()
            })
            .collect();
        assert!(dists[0] > dists[1] && dists[1] > dists[2], "{dists:?}");
    }
}
