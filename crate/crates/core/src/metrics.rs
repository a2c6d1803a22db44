//! PSNR and SSIM for grayscale images in `[0, peak]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Returned by [`psnr`] when both inputs are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Height and width of a `[H, W]` or `[1, H, W]` tensor.
pub fn image_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[h, w] | &[1, h, w] => Ok((h, w)),
        other => Err(Error::shape("image", "[H, W] or [1, H, W]", format!("{other:?}"))),
    }
}

pub fn mse(x: &Tensor, reference: &Tensor) -> Result<f64> {
    if x.shape() != reference.shape() {
        return Err(Error::shape(
            "mse",
            format!("{:?}", reference.shape()),
            format!("{:?}", x.shape()),
        ));
    }
    Ok(x.sub(reference).norm_sq() / x.len() as f64)
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(format!("PSNR peak must be > 0, got {peak}")));
    }
    let err = mse(x, reference)?;
    if err == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / err).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable Gaussian filtering over the valid region only.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..SSIM_WINDOW).map(|k| g[k] * img[i * w + j + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(i + k) * ow + j]).sum();
        }
    }
    out
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03 and dynamic range 1.
pub fn ssim(x: &Tensor, reference: &Tensor) -> Result<f64> {
    if x.shape() != reference.shape() {
        return Err(Error::shape(
            "ssim",
            format!("{:?}", reference.shape()),
            format!("{:?}", x.shape()),
        ));
    }
    let (h, w) = image_dims(x)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidParameter(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let a = x.data();
    let b = reference.data();
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    let prod: Vec<f64> = a.iter().zip(b).map(|(p, q)| p * q).collect();
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let e_aa = filter_valid(&sq(a), h, w, &g);
    let e_bb = filter_valid(&sq(b), h, w, &g);
    let e_ab = filter_valid(&prod, h, w, &g);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}
