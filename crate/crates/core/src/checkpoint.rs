//! Model checkpoints.
//!
//! A checkpoint is a directory with
//!
//! * `manifest.json`: architecture, penalty order, mixture weights, bit
//!   width, every scalar parameter and, per bank, its role, shape and scale;
//! * `weights.pavt`: the shadow weights of every bank (layer by layer, role
//!   order), followed by the quantized views when quantization is on;
//! * `codes.i8`: the integer codes of every quantized bank, one signed byte
//!   each, in the same order (absent at full precision);
//! * `sensing.pavt` / `sensing.json`: the measurement operator.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LayerParams, NetworkModel, QuantBank, QuantView, Variant};
use crate::penalties::{MixtureWeights, PenaltyKind};
use crate::sensing::SensingOperator;
use crate::tensor::{read_pavt_all, BankRole, Tensor};

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.pavt";
pub const CODES: &str = "codes.i8";
pub const SENSING_STEM: &str = "sensing";

const FORMAT: &str = "qpan-checkpoint";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub role: BankRole,
    pub shape: Vec<usize>,
    pub scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub rho: f64,
    pub lambdas: Vec<f64>,
    pub gamma_mcp: f64,
    pub a_scad: f64,
    pub banks: Vec<BankEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub format_version: u32,
    pub variant: Variant,
    pub penalties: Vec<PenaltyKind>,
    pub alphas: MixtureWeights,
    pub n_layers: usize,
    pub n_filters: usize,
    pub patch: (usize, usize),
    pub bits: Option<u8>,
    pub layers: Vec<LayerEntry>,
}

/// Writes `model` and `op` into `dir`, creating it if needed. Quantized
/// views are stored as they are; refresh them first if they are stale.
pub fn save_checkpoint(dir: &Path, model: &NetworkModel, op: &SensingOperator) -> Result<()> {
    fs::create_dir_all(dir)?;
    let quantized = model.bits().is_some();
    if quantized && !model.views_fresh() {
        return Err(Error::StaleQuantizedView);
    }
    let mut shadows = Vec::new();
    let mut views = Vec::new();
    let mut codes: Vec<u8> = Vec::new();
    let layers = model
        .layers()
        .iter()
        .map(|l| LayerEntry {
            rho: l.rho,
            lambdas: l.lambdas.clone(),
            gamma_mcp: l.gamma_mcp,
            a_scad: l.a_scad,
            banks: l
                .banks
                .iter()
                .map(|b| {
                    shadows.push(b.shadow());
                    if let Some(v) = b.view() {
                        views.push(&v.weights);
                        codes.extend(v.codes.iter().map(|&c| c as u8));
                    }
                    BankEntry {
                        role: b.role(),
                        shape: b.shadow().shape().to_vec(),
                        scale: b.view().map(|v| v.scale),
                    }
                })
                .collect(),
        })
        .collect();
    let manifest = Manifest {
        format: FORMAT.into(),
        format_version: FORMAT_VERSION,
        variant: model.variant(),
        penalties: model.kinds().to_vec(),
        alphas: model.alphas().clone(),
        n_layers: model.layers().len(),
        n_filters: model.n_filters(),
        patch: model.patch(),
        bits: model.bits(),
        layers,
    };
    let mut buf = Vec::new();
    for t in shadows.iter().chain(&views) {
        t.write_pavt(&mut buf)?;
    }
    fs::write(dir.join(WEIGHTS), buf)?;
    let codes_path = dir.join(CODES);
    if quantized {
        fs::write(&codes_path, codes)?;
    } else if codes_path.exists() {
        fs::remove_file(&codes_path)?;
    }
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    op.save(dir, SENSING_STEM)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.format != FORMAT || manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported format {} v{}", manifest.format, manifest.format_version),
        ));
    }
    Ok(manifest)
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(NetworkModel, SensingOperator)> {
    let manifest = read_manifest(dir)?;
    if manifest.layers.len() != manifest.n_layers {
        return Err(Error::format("checkpoint", "layer count disagrees with layer list"));
    }
    let tensors = read_pavt_all(&fs::read(dir.join(WEIGHTS))?)?;
    let n_banks: usize = manifest.layers.iter().map(|l| l.banks.len()).sum();
    let quantized = manifest.bits.is_some();
    let expected = if quantized { 2 * n_banks } else { n_banks };
    if tensors.len() != expected {
        return Err(Error::format(
            "checkpoint",
            format!("expected {expected} tensors in {WEIGHTS}, found {}", tensors.len()),
        ));
    }
    let codes = if quantized { fs::read(dir.join(CODES))? } else { Vec::new() };
    let mut shadow_it = tensors.iter().take(n_banks);
    let mut view_it = tensors.iter().skip(n_banks);
    let mut code_at = 0;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let mut banks = Vec::with_capacity(entry.banks.len());
        for b in &entry.banks {
            let shadow: &Tensor = shadow_it.next().expect("count checked above");
            if shadow.shape() != b.shape.as_slice() {
                return Err(Error::format("checkpoint", format!("bank {} has the wrong shape", b.role.name())));
            }
            let view = if quantized {
                let weights = view_it.next().expect("count checked above").clone();
                let n = weights.len();
                let c = codes
                    .get(code_at..code_at + n)
                    .ok_or_else(|| Error::format("checkpoint", format!("{CODES} is truncated")))?;
                code_at += n;
                let scale = b
                    .scale
                    .ok_or_else(|| Error::format("checkpoint", "quantized bank without a scale"))?;
                Some(QuantView {
                    weights,
                    scale,
                    codes: c.iter().map(|&c| c as i8).collect(),
                })
            } else {
                None
            };
            banks.push(QuantBank::with_view(b.role, shadow.clone(), view));
        }
        layers.push(LayerParams {
            rho: entry.rho,
            lambdas: entry.lambdas.clone(),
            gamma_mcp: entry.gamma_mcp,
            a_scad: entry.a_scad,
            banks,
        });
    }
    if code_at != codes.len() {
        return Err(Error::format("checkpoint", format!("{CODES} has trailing bytes")));
    }
    let model = NetworkModel::from_parts(
        manifest.variant,
        manifest.penalties,
        manifest.alphas,
        manifest.patch,
        manifest.bits,
        layers,
    )?;
    if model.n_filters() != manifest.n_filters {
        return Err(Error::format("checkpoint", "filter count disagrees with bank shapes"));
    }
    let op = SensingOperator::load(dir, SENSING_STEM)?;
    Ok((model, op))
}
