//! K-bit weight quantizer `Q(w) = v * b` with a symmetric integer codebook and
//! one learned scale per filter bank.
//!
//! For K = 1 the codebook is `{-1, +1}` and the scale has the closed form
//! `mean(|w|)`. For K > 1 the codebook is `{-M, ..., M}` with
//! `M = 2^(K-1) - 1`; the scale is the exact minimizer of `||w - v b||^2`
//! over all `v`, found by sweeping the points where a code changes, and then
//! polished by the usual alternation between rounding and least squares.

use crate::error::{Error, Result};
use crate::network::NetworkModel;
use crate::tensor::Tensor;

pub const MAX_BITS: u8 = 8;

const ALTERNATIONS: usize = 10;
const ALTERNATION_TOL: f64 = 1e-10;

/// Quantized weights together with their scale and integer codes.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub weights: Tensor,
    pub scale: f64,
    pub codes: Vec<i8>,
}

pub fn check_bits(bits: u8) -> Result<()> {
    if (1..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("bit width must be in 1..={MAX_BITS}, got {bits}")))
    }
}

/// Largest code magnitude `M`.
pub fn max_level(bits: u8) -> i32 {
    if bits == 1 {
        1
    } else {
        (1 << (bits - 1)) - 1
    }
}

/// All codes in increasing order.
pub fn codebook(bits: u8) -> Result<Vec<i8>> {
    check_bits(bits)?;
    let m = max_level(bits);
    if bits == 1 {
        return Ok(vec![-1, 1]);
    }
    Ok((-m..=m).map(|c| c as i8).collect())
}

fn sign_code(w: f64) -> i8 {
    if w < 0.0 {
        -1
    } else {
        1
    }
}

/// Nearest code to `w / v`, clipped to the codebook. Ties round away from 0.
pub fn round_to_code(w: f64, v: f64, bits: u8) -> i8 {
    if bits == 1 {
        return sign_code(w);
    }
    let m = max_level(bits) as f64;
    (w / v).round().clamp(-m, m) as i8
}

fn codes_for(w: &[f64], v: f64, bits: u8) -> Vec<i8> {
    w.iter().map(|&x| round_to_code(x, v, bits)).collect()
}

/// Least-squares scale for fixed codes, `<w, b> / <b, b>`.
fn ls_scale(w: &[f64], codes: &[i8]) -> f64 {
    let (mut wb, mut bb) = (0.0, 0.0);
    for (&x, &c) in w.iter().zip(codes) {
        wb += x * c as f64;
        bb += (c as f64) * (c as f64);
    }
    if bb == 0.0 {
        0.0
    } else {
        wb / bb
    }
}

/// Mean squared error of `v * codes` against `w`.
pub fn quantization_mse(w: &[f64], v: f64, codes: &[i8]) -> f64 {
    let s: f64 = w.iter().zip(codes).map(|(&x, &c)| (x - v * c as f64).powi(2)).sum();
    s / w.len() as f64
}

/// Global minimizer over `v >= 0` of `||w - v round_clip(w / v)||^2`.
///
/// The cost is continuous and piecewise quadratic in `v`, with pieces
/// delimited by `|w_i| / (j + 1/2)`. Walking those points from large to small
/// `v` keeps `<|w|, c>` and `<c, c>` up to date in O(1) per event.
fn sweep_scale(w: &[f64], bits: u8) -> f64 {
    let m = max_level(bits) as usize;
    // (breakpoint, |w_i|, increase of <c, c>)
    let mut events: Vec<(f64, f64, f64)> = Vec::with_capacity(w.len() * m);
    for &x in w {
        let ax = x.abs();
        if ax == 0.0 {
            continue;
        }
        for j in 0..m {
            events.push((ax / (j as f64 + 0.5), ax, (2 * j + 1) as f64));
        }
    }
    if events.is_empty() {
        return 0.0;
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best_v = 0.0;
    let mut best_cost = 0.0; // relative to ||w||^2, which is the cost at v -> inf
    let (mut s_wb, mut s_bb) = (0.0, 0.0);
    let mut k = 0;
    while k < events.len() {
        let hi = events[k].0;
        while k < events.len() && events[k].0 == hi {
            let (_, ax, inc) = events[k];
            s_wb += ax;
            s_bb += inc;
            k += 1;
        }
        let lo = if k < events.len() { events[k].0 } else { 0.0 };
        let v = (s_wb / s_bb).clamp(lo, hi);
        let cost = -2.0 * v * s_wb + v * v * s_bb;
        if cost < best_cost {
            best_cost = cost;
            best_v = v;
        }
    }
    best_v
}

/// Alternating refinement `b = round_clip(w / v)`, `v = <w, b> / <b, b>`,
/// starting from `v0`. Returns the final scale, codes and the MSE after each
/// scale update.
pub fn refine_alternating(w: &[f64], bits: u8, v0: f64, max_iter: usize, tol: f64) -> (f64, Vec<i8>, Vec<f64>) {
    let mut v = v0;
    let mut codes = codes_for(w, v, bits);
    let mut trace = vec![quantization_mse(w, v, &codes)];
    for _ in 0..max_iter {
        let v_new = ls_scale(w, &codes);
        let moved = (v_new - v).abs();
        v = v_new;
        trace.push(quantization_mse(w, v, &codes));
        if v == 0.0 || moved < tol {
            break;
        }
        let next = codes_for(w, v, bits);
        if next == codes {
            break;
        }
        codes = next;
    }
    (v, codes, trace)
}

/// A scale that reproduces `w` bit for bit with these codes, if one exists.
/// Rounding in the fitted scale would otherwise perturb inputs that already
/// lie on a quantization grid.
fn exact_scale(w: &[f64], codes: &[i8]) -> Option<f64> {
    let mut tried = [false; 128];
    for (&x, &c) in w.iter().zip(codes) {
        let mag = c.unsigned_abs() as usize;
        if c == 0 || tried[mag] {
            continue;
        }
        tried[mag] = true;
        let v = x / c as f64;
        if v > 0.0 && w.iter().zip(codes).all(|(&x, &c)| x == v * c as f64) {
            return Some(v);
        }
    }
    None
}

/// Fits the scale and codes of one weight tensor. Never modifies `w`.
pub fn fit_and_quantize(w: &Tensor, bits: u8) -> Result<Quantized> {
    check_bits(bits)?;
    if !w.is_finite() {
        return Err(Error::InvalidParameter("cannot quantize non-finite weights".into()));
    }
    let data = w.data();
    let (scale, codes) = if data.iter().all(|&x| x == 0.0) {
        (0.0, vec![1i8; data.len()])
    } else if bits == 1 {
        let v = data.iter().map(|x| x.abs()).sum::<f64>() / data.len() as f64;
        (v, data.iter().map(|&x| sign_code(x)).collect())
    } else {
        let v0 = sweep_scale(data, bits);
        let (v, codes, _) = refine_alternating(data, bits, v0, ALTERNATIONS, ALTERNATION_TOL);
        (v, codes)
    };
    let scale = exact_scale(data, &codes).unwrap_or(scale);
    let q: Vec<f64> = codes.iter().map(|&c| scale * c as f64).collect();
    Ok(Quantized {
        weights: Tensor::new(w.shape().to_vec(), q)?,
        scale,
        codes,
    })
}

/// Recomputes every bank's quantized view from its shadow weights. With
/// quantization disabled the views alias the shadows.
pub fn refresh_quantized_views(model: &mut NetworkModel) -> Result<()> {
    model.refresh_views()
}
