use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use qpan_core::blocks::{paisa_image, split_blocks, stitch_blocks};
use qpan_core::metrics::psnr;
use qpan_core::penalties::{MixtureWeights, PenaltySpec};
use qpan_core::quantize::{fit_and_quantize, quantization_mse};
use qpan_core::solver::SolverConfig;
use qpan_core::transforms::PanTransform;
use qpan_core::{make_sensing, Tensor};

/// Largest image side the PAISA demo accepts.
pub const MAX_SIZE: usize = 96;
const BLOCK: usize = 16;
const MAX_POINTS: usize = 4096;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

#[derive(Serialize)]
pub struct ProxCurves {
    pub x: Vec<f64>,
    pub l1: Vec<f64>,
    pub mcp: Vec<f64>,
    pub scad: Vec<f64>,
    pub average: Vec<f64>,
}

pub fn prox_curves(lambda: f64, gamma: f64, a: f64, alphas: &[f64], x_max: f64, points: usize) -> Result<String, String> {
    if !(x_max > 0.0) || !(2..=MAX_POINTS).contains(&points) {
        return Err(format!("need x_max > 0 and 2..={MAX_POINTS} points"));
    }
    let specs = [
        PenaltySpec::l1(lambda).map_err(err)?,
        PenaltySpec::mcp(lambda, gamma).map_err(err)?,
        PenaltySpec::scad(lambda, a).map_err(err)?,
    ];
    let w = MixtureWeights::new(alphas.to_vec()).map_err(err)?;
    if w.len() != 3 {
        return Err(format!("expected 3 weights, got {}", w.len()));
    }
    let x: Vec<f64> = (0..points)
        .map(|i| -x_max + 2.0 * x_max * i as f64 / (points - 1) as f64)
        .collect();
    let curve = |s: &PenaltySpec| x.iter().map(|&v| s.prox(v)).collect::<Vec<_>>();
    let (l1, mcp, scad) = (curve(&specs[0]), curve(&specs[1]), curve(&specs[2]));
    let ws = w.as_slice();
    let average = (0..points).map(|i| ws[0] * l1[i] + ws[1] * mcp[i] + ws[2] * scad[i]).collect();
    serde_json::to_string(&ProxCurves { x, l1, mcp, scad, average }).map_err(err)
}

#[derive(Serialize)]
pub struct QuantizeResult {
    pub weights: Vec<f64>,
    pub quantized: Vec<f64>,
    pub codes: Vec<i8>,
    pub scale: f64,
    pub mse: f64,
}

pub fn quantize_demo(count: usize, bits: u8, seed: u64) -> Result<String, String> {
    if !(1..=MAX_POINTS).contains(&count) {
        return Err(format!("weight count must be in 1..={MAX_POINTS}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..count).map(|_| StandardNormal.sample(&mut rng)).collect();
    let q = fit_and_quantize(&Tensor::from_vec(weights.clone()), bits).map_err(err)?;
    let mse = quantization_mse(&weights, q.scale, &q.codes);
    serde_json::to_string(&QuantizeResult {
        weights,
        quantized: q.weights.into_data(),
        codes: q.codes,
        scale: q.scale,
        mse,
    })
    .map_err(err)
}

#[derive(Serialize)]
pub struct PaisaResult {
    pub size: usize,
    pub truth: Vec<f64>,
    pub initial: Vec<f64>,
    pub reconstruction: Vec<f64>,
    pub initial_psnr_db: f64,
    pub psnr_db: f64,
    pub objective: Vec<f64>,
}

/// A dark image with a fraction `density` of bright pixels. The identity
/// transform shrinks in the pixel domain, where such images are sparse.
pub fn point_sources<R: Rng + ?Sized>(size: usize, density: f64, rng: &mut R) -> Tensor {
    let data = (0..size * size)
        .map(|_| if rng.random::<f64>() < density { rng.random_range(0.3..1.0) } else { 0.0 })
        .collect();
    Tensor::new(vec![1, size, size], data).expect("length matches shape")
}

pub fn paisa_demo(
    size: usize,
    density: f64,
    cs_ratio: f64,
    iterations: usize,
    lambda: f64,
    seed: u64,
) -> Result<String, String> {
    if !(BLOCK..=MAX_SIZE).contains(&size) {
        return Err(format!("image size must be in {BLOCK}..={MAX_SIZE}"));
    }
    if !(1..=500).contains(&iterations) {
        return Err("iterations must be in 1..=500".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if !(0.0..=1.0).contains(&density) {
        return Err("density must be in [0, 1]".into());
    }
    let truth = point_sources(size, density, &mut rng);
    let op = make_sensing(BLOCK * BLOCK, cs_ratio, seed).map_err(err)?;
    let penalties = vec![
        PenaltySpec::l1(lambda).map_err(err)?,
        PenaltySpec::mcp(lambda, 2.0).map_err(err)?,
        PenaltySpec::scad(lambda, 3.7).map_err(err)?,
    ];
    let cfg = SolverConfig {
        iterations,
        rho: 1.0,
        penalties,
        alphas: MixtureWeights::uniform(3),
        transform: PanTransform::identity(2),
        patch: (BLOCK, BLOCK),
    };
    let (blocks, grid) = split_blocks(&truth, (BLOCK, BLOCK)).map_err(err)?;
    let back = blocks
        .iter()
        .map(|b| op.adjoint(&op.measure(b)?, b.shape()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let initial = stitch_blocks(&back, &grid).map_err(err)?;
    let (rec, trace) = paisa_image(&cfg, &op, &truth).map_err(err)?;
    let result = PaisaResult {
        size,
        initial_psnr_db: psnr(&initial, &truth, 1.0).map_err(err)?,
        psnr_db: psnr(&rec, &truth, 1.0).map_err(err)?,
        truth: truth.into_data(),
        initial: initial.into_data(),
        reconstruction: rec.into_data(),
        objective: trace.iter().map(|t| t.objective).collect(),
    };
    serde_json::to_string(&result).map_err(err)
}
