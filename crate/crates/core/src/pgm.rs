//! Binary 8-bit PGM (P5) images.
//!
//! Loading scales samples by `1 / maxval`; saving always writes maxval 255
//! with the header `P5\n<w> <h>\n255\n` and rounds half up.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::image_dims;
use crate::tensor::Tensor;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format("PGM", format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("PGM", format!("{what} out of range")))
    }
}

/// Parses a P5 file into a `[1, H, W]` tensor with values in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format("PGM", "missing P5 magic"));
    }
    let mut c = Cursor { bytes, pos: 2 };
    let w = c.number("width")?;
    let h = c.number("height")?;
    let maxval = c.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(Error::format("PGM", "zero image extent"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(Error::format("PGM", format!("only 8-bit files are supported, maxval {maxval}")));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(Error::format("PGM", "expected whitespace after maxval")),
    }
    let pixels = &bytes[c.pos..];
    if pixels.len() < w * h {
        return Err(Error::format("PGM", format!("expected {} pixel bytes, found {}", w * h, pixels.len())));
    }
    let scale = maxval as f64;
    let data = pixels[..w * h].iter().map(|&p| (p as f64 / scale).min(1.0)).collect();
    Tensor::new(vec![1, h, w], data)
}

/// Encodes a `[H, W]` or `[1, H, W]` tensor; values are clamped to `[0, 1]`.
pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = image_dims(img)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| {
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        (v * 255.0 + 0.5).floor().min(255.0) as u8
    }));
    Ok(out)
}

pub fn load_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&fs::read(path)?)
}

pub fn save_pgm(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(img)?)?;
    Ok(())
}
