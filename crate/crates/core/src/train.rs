//! ADAM with quantization-aware training.
//!
//! Each batch runs, in this order: refresh the quantized views from the
//! shadow weights, forward every patch through all layers, evaluate the loss,
//! back-propagate at the quantized weights, take an ADAM step on the shadow
//! weights and scalars, and project the scalars back onto their constraints.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim};
use crate::network::{LossBreakdown, ModelConfig, NetworkModel, Variant, DEFAULT_GAMMA_LOSS};
use crate::quantize::{check_bits, refresh_quantized_views};
use crate::sensing::{make_sensing, SensingOperator};
use crate::tensor::Tensor;

/// Training settings. Serialized field names double as the JSON config
/// format; missing fields take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Weight bit width; `None` trains at full precision.
    pub bits: Option<u8>,
    pub gamma_loss: f64,
    pub patch_size: usize,
    pub stride: usize,
    pub val_fraction: f64,
    pub variant: Variant,
    pub regs: usize,
    pub layers: usize,
    pub filters: usize,
    pub cs_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            bits: None,
            gamma_loss: DEFAULT_GAMMA_LOSS,
            patch_size: 33,
            stride: 14,
            val_fraction: 0.1,
            variant: Variant::PanPlus,
            regs: 3,
            layers: 9,
            filters: 32,
            cs_ratio: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.epochs == 0 || self.batch_size == 0 || self.patch_size == 0 || self.stride == 0 {
            return bad("epochs, batch_size, patch_size and stride must be positive".into());
        }
        if self.layers == 0 || self.filters == 0 {
            return bad("layers and filters must be positive".into());
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be >= 0, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        if !(self.gamma_loss >= 0.0) {
            return bad(format!("gamma_loss must be >= 0, got {}", self.gamma_loss));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        if let Some(b) = self.bits {
            check_bits(b)?;
        }
        if !(1..=3).contains(&self.regs) {
            return bad(format!("regs must be 1, 2 or 3, got {}", self.regs));
        }
        if !(self.cs_ratio > 0.0 && self.cs_ratio <= 1.0) {
            return bad(format!("cs_ratio must lie in (0, 1], got {}", self.cs_ratio));
        }
        Ok(())
    }
}

/// First and second moment estimates of ADAM.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected ADAM update of `params` in place.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("adam_step", state.m.len(), format!("{} / {}", params.len(), grads.len())));
    }
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Number of `size x size` windows at the given stride.
pub fn patch_count(h: usize, w: usize, size: usize, stride: usize) -> usize {
    if h < size || w < size || stride == 0 {
        return 0;
    }
    ((h - size) / stride + 1) * ((w - size) / stride + 1)
}

/// Cuts every image into `size x size` patches at `stride` and shuffles
/// them with a generator seeded by `seed`. Images smaller than a patch are
/// skipped with a warning.
pub fn extract_patches(images: &[Tensor], size: usize, stride: usize, seed: u64) -> Result<Vec<Tensor>> {
    if size == 0 || stride == 0 {
        return Err(Error::InvalidParameter("patch size and stride must be positive".into()));
    }
    let mut out = Vec::new();
    for (idx, img) in images.iter().enumerate() {
        let (h, w) = crate::metrics::image_dims(img)?;
        if h < size || w < size {
            log::warn!("skipping image {idx}: {h}x{w} is smaller than a {size}x{size} patch");
            continue;
        }
        let d = img.data();
        for i in (0..=h - size).step_by(stride) {
            for j in (0..=w - size).step_by(stride) {
                let mut p = Vec::with_capacity(size * size);
                for r in i..i + size {
                    p.extend(d[r * w + j..r * w + j + size].iter().map(|v| v.clamp(0.0, 1.0)));
                }
                out.push(Tensor::new(vec![1, size, size], p)?);
            }
        }
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

/// Stage of a training batch, reported to the observer in this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    BatchStart,
    Quantized,
    Forward,
    Loss,
    Updated,
}

#[derive(Clone, Copy, Debug)]
pub struct PhaseEvent<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub phase: Phase,
    pub model: &'a NetworkModel,
    /// Set for [`Phase::Loss`].
    pub loss: Option<LossBreakdown>,
    /// Patch indices of the batch.
    pub indices: &'a [usize],
}

/// Per-epoch record; also the JSON object written to the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: usize,
    pub train_loss: f64,
    pub train_mse: f64,
    pub train_inverse: f64,
    pub val_psnr_db: Option<f64>,
    pub val_ssim: Option<f64>,
    pub baseline_psnr_db: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub wall_clock_s: f64,
    pub train_patches: usize,
    pub val_patches: usize,
}

/// Reconstruction quality over a set of patches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PatchEval {
    pub psnr_db: f64,
    /// Absent when patches are smaller than the SSIM window.
    pub ssim: Option<f64>,
    /// PSNR of the `Phi^T y` starting point.
    pub baseline_psnr_db: f64,
}

/// Mean PSNR/SSIM of the model's reconstructions and of `Phi^T y`.
pub fn evaluate_patches(model: &NetworkModel, op: &SensingOperator, xs: &[Tensor]) -> Result<PatchEval> {
    if xs.is_empty() {
        return Err(Error::InvalidParameter("no patches to evaluate".into()));
    }
    let ys = measure_all(op, xs)?;
    let outs = model.reconstruct(op, &ys)?;
    let n = xs.len() as f64;
    let (mut p, mut s, mut b) = (0.0, Some(0.0), 0.0);
    for ((x, out), y) in xs.iter().zip(&outs).zip(&ys) {
        let x = x.clone().reshape(out.shape())?;
        p += psnr(out, &x, 1.0)?;
        b += psnr(&op.adjoint(y, out.shape())?, &x, 1.0)?;
        s = match (s, ssim(out, &x)) {
            (Some(acc), Ok(v)) => Some(acc + v),
            _ => None,
        };
    }
    Ok(PatchEval {
        psnr_db: p / n,
        ssim: s.map(|v| v / n),
        baseline_psnr_db: b / n,
    })
}

pub fn measure_all(op: &SensingOperator, xs: &[Tensor]) -> Result<Vec<Tensor>> {
    xs.iter().map(|x| op.measure(x)).collect()
}

/// Splits patch indices into training and validation sets.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5a17));
    let n_val = if n >= 2 { ((n as f64 * val_fraction).round() as usize).min(n - 1) } else { 0 };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Optional hooks for [`train`].
/// Seeds the model initialization apart from the sensing matrix, which uses
/// `cfg.seed` directly.
const MODEL_SEED_SALT: u64 = 0x6d6f_6465_6c00;

/// The sensing operator and freshly initialized model described by `cfg`.
pub fn init_from_config(cfg: &TrainConfig) -> Result<(NetworkModel, SensingOperator)> {
    cfg.validate()?;
    let op = make_sensing(cfg.patch_size * cfg.patch_size, cfg.cs_ratio, cfg.seed)?;
    let model_cfg = ModelConfig {
        variant: cfg.variant,
        regs: cfg.regs,
        layers: cfg.layers,
        filters: cfg.filters,
        patch: (cfg.patch_size, cfg.patch_size),
        bits: cfg.bits,
    };
    let model = NetworkModel::new(&model_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ MODEL_SEED_SALT))?;
    Ok((model, op))
}

#[derive(Default)]
pub struct TrainHooks<'a> {
    pub observer: Option<&'a mut dyn FnMut(&PhaseEvent<'_>)>,
    /// Receives one JSON object per epoch, one per line.
    pub log: Option<&'a mut dyn Write>,
}

/// Trains `model` on `patches` (each `[1, h, w]` matching the model's patch
/// size). The model's bit width decides whether training is quantization
/// aware. Deterministic for a fixed `cfg.seed`.
pub fn train(
    model: &mut NetworkModel,
    op: &SensingOperator,
    patches: &[Tensor],
    cfg: &TrainConfig,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::InvalidParameter("training set is empty".into()));
    }
    let (ph, pw) = model.patch();
    for p in patches {
        if p.len() != ph * pw {
            return Err(Error::shape("train", format!("{ph}x{pw} patches"), format!("{:?}", p.shape())));
        }
    }
    if op.n() != ph * pw {
        return Err(Error::shape("train", format!("operator over {} pixels", ph * pw), op.n()));
    }
    let started = Instant::now();
    let ys = measure_all(op, patches)?;
    let (train_idx, val_idx) = split_indices(patches.len(), cfg.val_fraction, cfg.seed);
    let val_xs: Vec<Tensor> = val_idx.iter().map(|&i| patches[i].clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.param_count());
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut order = train_idx.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut mse, mut inverse) = (0.0, 0.0, 0.0);
        let mut batches = 0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let notify = |hooks: &mut TrainHooks<'_>, model: &NetworkModel, phase, loss| {
                if let Some(obs) = hooks.observer.as_mut() {
                    obs(&PhaseEvent {
                        epoch,
                        batch: b,
                        phase,
                        model,
                        loss,
                        indices: batch,
                    });
                }
            };
            notify(&mut hooks, model, Phase::BatchStart, None);
            refresh_quantized_views(model)?;
            notify(&mut hooks, model, Phase::Quantized, None);
            let by: Vec<Tensor> = batch.iter().map(|&i| ys[i].clone()).collect();
            let bx: Vec<Tensor> = batch.iter().map(|&i| patches[i].clone()).collect();
            let pass = model.forward(op, &by)?;
            notify(&mut hooks, model, Phase::Forward, None);
            let eval = model.loss(&pass, &bx, cfg.gamma_loss)?;
            let loss = eval.breakdown;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    value: loss.total,
                    epoch,
                    batch: b,
                });
            }
            notify(&mut hooks, model, Phase::Loss, Some(loss));
            let grads = model.backward(op, &pass, &eval)?;
            drop(pass);
            let mut params = model.flat_params();
            adam_step(&mut adam, &mut params, &grads.flat, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)?;
            model.set_flat_params(&params)?;
            model.project_constraints();
            notify(&mut hooks, model, Phase::Updated, None);
            total += loss.total;
            mse += loss.mse;
            inverse += loss.inverse;
            batches += 1;
        }
        refresh_quantized_views(model)?;
        let val = if val_xs.is_empty() {
            None
        } else {
            Some(evaluate_patches(model, op, &val_xs)?)
        };
        let nb = batches.max(1) as f64;
        let record = EpochLog {
            epoch,
            batches,
            train_loss: total / nb,
            train_mse: mse / nb,
            train_inverse: inverse / nb,
            val_psnr_db: val.map(|v| v.psnr_db),
            val_ssim: val.and_then(|v| v.ssim),
            baseline_psnr_db: val.map(|v| v.baseline_psnr_db),
        };
        log::info!(
            "epoch {epoch}: loss {:.6e} val PSNR {}",
            record.train_loss,
            record.val_psnr_db.map_or("n/a".into(), |p| format!("{p:.2} dB"))
        );
        if let Some(w) = hooks.log.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        epochs.push(record);
    }
    Ok(TrainReport {
        epochs,
        wall_clock_s: started.elapsed().as_secs_f64(),
        train_patches: train_idx.len(),
        val_patches: val_idx.len(),
    })
}
