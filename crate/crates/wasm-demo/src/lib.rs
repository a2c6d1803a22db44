//! WebAssembly bindings for the demo page in `www/`.
//!
//! Every export returns a JSON string. The plain functions in [`demo`] do the
//! work and are what the native tests call.

use wasm_bindgen::prelude::*;

pub mod demo;

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// Prox maps of l1, MCP and SCAD and their weighted average on a grid.
#[wasm_bindgen]
pub fn prox_curves(lambda: f64, gamma: f64, a: f64, alphas: Vec<f64>, x_max: f64, points: usize) -> Result<String, JsError> {
    js(demo::prox_curves(lambda, gamma, a, &alphas, x_max, points))
}

/// Fits a K-bit quantizer to `count` Gaussian weights.
#[wasm_bindgen]
pub fn quantize_demo(count: usize, bits: u8, seed: u64) -> Result<String, JsError> {
    js(demo::quantize_demo(count, bits, seed))
}

/// Senses a sparse synthetic image block-wise and runs PAISA on it.
#[wasm_bindgen]
pub fn paisa_demo(size: usize, density: f64, cs_ratio: f64, iterations: usize, lambda: f64, seed: u64) -> Result<String, JsError> {
    js(demo::paisa_demo(size, density, cs_ratio, iterations, lambda, seed))
}
