//! Dense row-major tensors and the 3x3 same-size convolution primitives.
//!
//! Every convolution here is a stride-1 cross-correlation with zero padding
//! of one pixel on each side, so spatial extents are preserved. Inputs are
//! laid out `[channels, height, width]`, filter banks `[n_out, n_in, 3, 3]`.
//! The three kernels (`conv2d`, `conv2d_transpose`, `conv2d_weight_grad`)
//! walk the same index ranges, which makes the transpose an exact adjoint.

use std::fmt;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial size of every kernel.
pub const KERNEL: usize = 3;

const PAVT_MAGIC: &[u8; 5] = b"PAVT1";

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidParameter(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("{expected} elements for shape {shape:?}"),
                data.len(),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// One-dimensional tensor over `data`.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same data viewed under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", self.data.len(), n));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "dot: length mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &Tensor) {
        assert_eq!(self.data.len(), x.data.len(), "axpy: length mismatch");
        for (s, v) in self.data.iter_mut().zip(&x.data) {
            *s += alpha * v;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.data.len(), other.data.len(), "mul: length mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        }
    }

    pub fn random_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(|_| dist.sample(rng)).collect(),
        }
    }

    /// Writes the PAVT1 encoding: magic, u32 rank, u32 extents, f64 payload,
    /// all little-endian.
    pub fn write_pavt<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(PAVT_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::format("PAVT1", format!("extent {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_pavt<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != PAVT_MAGIC {
            return Err(Error::format("PAVT1", format!("bad magic {magic:?}")));
        }
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format("PAVT1", format!("unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("PAVT1", "element count overflows"))?;
        let mut bytes = vec![0u8; len * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::format("PAVT1", e.to_string()))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Writes several tensors back to back.
pub fn write_pavt_all<W: Write>(w: &mut W, tensors: &[&Tensor]) -> Result<()> {
    for t in tensors {
        t.write_pavt(w)?;
    }
    Ok(())
}

/// Reads tensors until the stream is exhausted.
pub fn read_pavt_all(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut cursor = bytes;
    let mut out = Vec::new();
    while !cursor.is_empty() {
        out.push(Tensor::read_pavt(&mut cursor)?);
    }
    Ok(out)
}

/// Which operator a filter bank implements inside a transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankRole {
    /// First operator of the analysis transform.
    A,
    /// Second operator of the analysis transform.
    B,
    /// First operator of the synthesis transform (mirror of B).
    Bt,
    /// Second operator of the synthesis transform (mirror of A).
    At,
    D,
    H1,
    H2,
    Ht1,
    Ht2,
    G,
}

impl BankRole {
    pub fn name(self) -> &'static str {
        match self {
            BankRole::A => "a",
            BankRole::B => "b",
            BankRole::Bt => "bt",
            BankRole::At => "at",
            BankRole::D => "d",
            BankRole::H1 => "h1",
            BankRole::H2 => "h2",
            BankRole::Ht1 => "ht1",
            BankRole::Ht2 => "ht2",
            BankRole::G => "g",
        }
    }
}

/// A `[n_out, n_in, 3, 3]` weight tensor tagged with its role.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    weights: Tensor,
    role: BankRole,
}

impl FilterBank {
    pub fn new(weights: Tensor, role: BankRole) -> Result<Self> {
        check_bank_shape("FilterBank::new", &weights)?;
        Ok(FilterBank { weights, role })
    }

    pub fn zeros(n_out: usize, n_in: usize, role: BankRole) -> Self {
        FilterBank {
            weights: Tensor::zeros(&[n_out, n_in, KERNEL, KERNEL]),
            role,
        }
    }

    /// Center-tap bank that passes signals straight through.
    ///
    /// With `n_in == 1` the input is replicated on every output channel, with
    /// `n_out == 1` the input channels are averaged, and for square banks the
    /// channels are mapped one to one.
    pub fn identity(n_out: usize, n_in: usize, role: BankRole) -> Self {
        let mut bank = FilterBank::zeros(n_out, n_in, role);
        let center = KERNEL * KERNEL / 2;
        let w = bank.weights.data_mut();
        for o in 0..n_out {
            for c in 0..n_in {
                let tap = if n_out == 1 {
                    1.0 / n_in as f64
                } else if n_in == 1 || o % n_in == c {
                    1.0
                } else {
                    0.0
                };
                w[(o * n_in + c) * KERNEL * KERNEL + center] = tap;
            }
        }
        bank
    }

    /// Zero-mean Gaussian init with std `sqrt(2 / (9 n_in))`.
    pub fn random<R: Rng + ?Sized>(n_out: usize, n_in: usize, role: BankRole, rng: &mut R) -> Self {
        let std = (2.0 / (KERNEL * KERNEL * n_in) as f64).sqrt();
        FilterBank {
            weights: Tensor::random_normal(&[n_out, n_in, KERNEL, KERNEL], std, rng),
            role,
        }
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn role(&self) -> BankRole {
        self.role
    }

    pub fn n_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn n_in(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn conv2d(&self, input: &Tensor) -> Result<Tensor> {
        conv2d(input, &self.weights)
    }

    pub fn conv2d_transpose(&self, grad_out: &Tensor) -> Result<Tensor> {
        conv2d_transpose(grad_out, &self.weights)
    }
}

fn check_bank_shape(op: &'static str, weights: &Tensor) -> Result<(usize, usize)> {
    match weights.shape() {
        &[n_out, n_in, KERNEL, KERNEL] => Ok((n_out, n_in)),
        other => Err(Error::shape(op, "[n_out, n_in, 3, 3]", format!("{other:?}"))),
    }
}

fn check_image(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] => Ok((c, h, w)),
        other => Err(Error::shape(op, "[channels, height, width]", format!("{other:?}"))),
    }
}

/// Valid index range `lo..hi` of output positions `i` such that `i + off`
/// stays inside `0..extent`.
#[inline]
fn valid_range(extent: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (extent as isize - off.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

/// Same-size, zero-padded, stride-1 cross-correlation without bias.
pub fn conv2d(input: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (n_out, n_in) = check_bank_shape("conv2d", weights)?;
    let (c, h, w) = check_image("conv2d", input)?;
    if c != n_in {
        return Err(Error::shape(
            "conv2d",
            format!("{n_in} input channels"),
            format!("{c} channels"),
        ));
    }
    let hw = h * w;
    let mut out = vec![0.0; n_out * hw];
    let x = input.data();
    let k = weights.data();
    for o in 0..n_out {
        let dst = &mut out[o * hw..(o + 1) * hw];
        for ci in 0..n_in {
            let src = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..KERNEL {
                let dy = ky as isize - 1;
                let (i_lo, i_hi) = valid_range(h, dy);
                for kx in 0..KERNEL {
                    let dx = kx as isize - 1;
                    let (j_lo, j_hi) = valid_range(w, dx);
                    let tap = k[((o * n_in + ci) * KERNEL + ky) * KERNEL + kx];
                    for i in i_lo..i_hi {
                        let si = (i as isize + dy) as usize;
                        let d = &mut dst[i * w + j_lo..i * w + j_hi];
                        let s_lo = (j_lo as isize + dx) as usize;
                        let s = &src[si * w + s_lo..si * w + s_lo + (j_hi - j_lo)];
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv += tap * sv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n_out, h, w], out)
}

/// Linear adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_transpose(grad_out: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (n_out, n_in) = check_bank_shape("conv2d_transpose", weights)?;
    let (c, h, w) = check_image("conv2d_transpose", grad_out)?;
    if c != n_out {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("{n_out} gradient channels"),
            format!("{c} channels"),
        ));
    }
    let hw = h * w;
    let mut out = vec![0.0; n_in * hw];
    let g = grad_out.data();
    let k = weights.data();
    for o in 0..n_out {
        let src = &g[o * hw..(o + 1) * hw];
        for ci in 0..n_in {
            let dst = &mut out[ci * hw..(ci + 1) * hw];
            for ky in 0..KERNEL {
                let dy = ky as isize - 1;
                let (i_lo, i_hi) = valid_range(h, dy);
                for kx in 0..KERNEL {
                    let dx = kx as isize - 1;
                    let (j_lo, j_hi) = valid_range(w, dx);
                    let tap = k[((o * n_in + ci) * KERNEL + ky) * KERNEL + kx];
                    for i in i_lo..i_hi {
                        let di = (i as isize + dy) as usize;
                        let d_lo = (j_lo as isize + dx) as usize;
                        let d = &mut dst[di * w + d_lo..di * w + d_lo + (j_hi - j_lo)];
                        let s = &src[i * w + j_lo..i * w + j_hi];
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv += tap * sv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n_in, h, w], out)
}

/// Gradient of `sum(conv2d(input, W) * grad_out)` with respect to `W`.
pub fn conv2d_weight_grad(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (n_in, h, w) = check_image("conv2d_weight_grad", input)?;
    let (n_out, gh, gw) = check_image("conv2d_weight_grad", grad_out)?;
    if (gh, gw) != (h, w) {
        return Err(Error::shape(
            "conv2d_weight_grad",
            format!("gradient of spatial size {h}x{w}"),
            format!("{gh}x{gw}"),
        ));
    }
    let hw = h * w;
    let mut out = vec![0.0; n_out * n_in * KERNEL * KERNEL];
    let x = input.data();
    let g = grad_out.data();
    for o in 0..n_out {
        let go = &g[o * hw..(o + 1) * hw];
        for ci in 0..n_in {
            let src = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..KERNEL {
                let dy = ky as isize - 1;
                let (i_lo, i_hi) = valid_range(h, dy);
                for kx in 0..KERNEL {
                    let dx = kx as isize - 1;
                    let (j_lo, j_hi) = valid_range(w, dx);
                    let mut acc = 0.0;
                    for i in i_lo..i_hi {
                        let si = (i as isize + dy) as usize;
                        let s_lo = (j_lo as isize + dx) as usize;
                        let s = &src[si * w + s_lo..si * w + s_lo + (j_hi - j_lo)];
                        let d = &go[i * w + j_lo..i * w + j_hi];
                        acc += d.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    }
                    out[((o * n_in + ci) * KERNEL + ky) * KERNEL + kx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n_out, n_in, KERNEL, KERNEL], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// 1 where `x > 0`, else 0 (including at exactly zero).
pub fn relu_mask(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Multiplies `grad` by the ReLU mask of the pre-activation `pre`.
pub fn relu_backward(pre: &Tensor, grad: &Tensor) -> Tensor {
    assert_eq!(pre.len(), grad.len(), "relu_backward: length mismatch");
    Tensor {
        shape: grad.shape.clone(),
        data: pre
            .data
            .iter()
            .zip(&grad.data)
            .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
            .collect(),
    }
}
