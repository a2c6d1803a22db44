//! Unfolded PAN and PAN+ networks: per-layer parameters, batched forward
//! pass, the training loss and its exact reverse-mode gradient.
//!
//! Each layer takes a gradient step `r = x - rho Phi^T (Phi x - y)` and then
//! applies its transform-domain update. The loss is
//!
//! ```text
//! L = 1/N sum_i ||x_i^(n_l) - x_i||^2 + gamma_loss/N sum_i sum_k ||R_k(x_i)||^2
//! ```
//!
//! with `N = n_b * n` and `R_k(x) = Ft(F(x)) - x` for PAN or
//! `Ht(H(D x)) - D x` for PAN+. When quantization is enabled every convolution
//! uses the quantized view of its bank, and bank gradients are taken at those
//! views and reported against the shadow weights (straight-through).

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::penalties::{MixtureWeights, PenaltyKind, PenaltySpec, PARAM_MARGIN};
use crate::quantize::{check_bits, fit_and_quantize};
use crate::sensing::SensingOperator;
use crate::solver::SolverConfig;
use crate::tensor::{BankRole, FilterBank, Tensor};
use crate::transforms::{
    pan_inverse_backward, pan_inverse_residual, pan_layer_backward, pan_layer_forward, plus_inverse_backward,
    plus_inverse_residual, plus_layer_backward, plus_layer_forward, InverseTape, LayerGrad, PanLayerTape,
    PanTransform, PanWeights, PlusLayerTape, PlusTransform, PlusWeights, ProxMix, PAN_ROLES, PLUS_ROLES,
};

pub const INIT_RHO: f64 = 1.0;
pub const INIT_LAMBDA: f64 = 0.1;
pub const INIT_GAMMA_MCP: f64 = 2.0;
pub const INIT_A_SCAD: f64 = 3.7;
pub const DEFAULT_GAMMA_LOSS: f64 = 0.01;
/// Extra factor on the random init of the PAN+ residual bank `G`, so an
/// untrained layer stays close to its gradient step.
pub const RESIDUAL_INIT_SCALE: f64 = 0.1;

/// Patches per work unit. Gradients are summed inside a unit and then across
/// units in index order, so results do not depend on the worker count.
const CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "pan")]
    Pan,
    #[serde(rename = "pan+")]
    PanPlus,
}

impl Variant {
    pub fn roles(self) -> &'static [BankRole] {
        match self {
            Variant::Pan => &PAN_ROLES,
            Variant::PanPlus => &PLUS_ROLES,
        }
    }

    /// `(n_out, n_in)` of each bank in role order.
    pub fn bank_dims(self, n_f: usize) -> Vec<(usize, usize)> {
        match self {
            Variant::Pan => vec![(n_f, 1), (n_f, n_f), (n_f, n_f), (1, n_f)],
            Variant::PanPlus => vec![(n_f, 1), (n_f, n_f), (n_f, n_f), (n_f, n_f), (n_f, n_f), (1, n_f)],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Pan => "pan",
            Variant::PanPlus => "pan+",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pan" => Ok(Variant::Pan),
            "pan+" | "panplus" | "pan-plus" => Ok(Variant::PanPlus),
            other => Err(Error::InvalidParameter(format!("unknown variant {other:?}, expected pan or pan+"))),
        }
    }
}

/// Quantized copy of a bank: `weights == scale * codes` elementwise.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantView {
    pub weights: Tensor,
    pub scale: f64,
    pub codes: Vec<i8>,
}

/// Full-precision shadow weights plus an optional quantized view.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantBank {
    role: BankRole,
    shadow: Tensor,
    view: Option<QuantView>,
}

impl QuantBank {
    pub fn new(bank: FilterBank) -> Self {
        let role = bank.role();
        QuantBank {
            role,
            shadow: bank.weights().clone(),
            view: None,
        }
    }

    pub(crate) fn with_view(role: BankRole, shadow: Tensor, view: Option<QuantView>) -> Self {
        QuantBank { role, shadow, view }
    }

    pub fn role(&self) -> BankRole {
        self.role
    }

    pub fn shadow(&self) -> &Tensor {
        &self.shadow
    }

    pub fn view(&self) -> Option<&QuantView> {
        self.view.as_ref()
    }

    /// Weights used by the forward pass: the quantized view if present,
    /// otherwise the shadow.
    pub fn effective(&self) -> &Tensor {
        self.view.as_ref().map_or(&self.shadow, |v| &v.weights)
    }
}

/// Learnable state of one unfolded layer.
///
/// `gamma_mcp` and `a_scad` exist in every layer; they only receive gradient
/// when the corresponding penalty is active.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub rho: f64,
    /// One threshold per active penalty, in the model's penalty order.
    pub lambdas: Vec<f64>,
    pub gamma_mcp: f64,
    pub a_scad: f64,
    pub banks: Vec<QuantBank>,
}

impl LayerParams {
    pub fn specs(&self, kinds: &[PenaltyKind]) -> Result<Vec<PenaltySpec>> {
        kinds
            .iter()
            .zip(&self.lambdas)
            .map(|(&k, &lambda)| {
                let shape = match k {
                    PenaltyKind::Mcp => self.gamma_mcp,
                    _ => self.a_scad,
                };
                PenaltySpec::of_kind(k, lambda, shape)
            })
            .collect()
    }

    fn scalar_count(&self) -> usize {
        3 + self.lambdas.len()
    }
}

/// Architecture settings for a freshly initialized model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Number of regularizers: 1 (l1), 2 (l1 + MCP) or 3 (l1 + MCP + SCAD).
    pub regs: usize,
    pub layers: usize,
    pub filters: usize,
    pub patch: (usize, usize),
    pub bits: Option<u8>,
}

/// One named block of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub layer: usize,
    pub range: Range<usize>,
}

/// Flat gradient, laid out like [`NetworkModel::flat_params`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub flat: Vec<f64>,
}

impl ModelGrads {
    pub fn group(&self, g: &ParamGroup) -> &[f64] {
        &self.flat[g.range.clone()]
    }

    pub fn norm(&self) -> f64 {
        self.flat.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Loss value and its two terms. `inverse` is unweighted:
/// `total = mse + gamma_loss * inverse`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub inverse: f64,
}

enum LayerTape {
    Pan(PanLayerTape),
    Plus(PlusLayerTape),
}

/// Everything one patch's backward pass needs from its forward pass.
pub struct PatchTape {
    inputs: Vec<Tensor>,
    steps: Vec<Tensor>,
    layers: Vec<LayerTape>,
}

/// Outputs and tapes of a batched forward pass.
pub struct BatchPass {
    pub outputs: Vec<Tensor>,
    tapes: Vec<PatchTape>,
    version: u64,
}

struct PatchLoss {
    out_residual: Tensor,
    inverse: Vec<(Tensor, InverseTape)>,
    mse_sum: f64,
    inverse_sum: f64,
}

/// Loss of a batch, with the residuals the backward pass needs.
pub struct LossEval {
    pub breakdown: LossBreakdown,
    patches: Vec<PatchLoss>,
    scale: f64,
    gamma_loss: f64,
    version: u64,
}

/// PAN or PAN+ model with `n_l` layers.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkModel {
    variant: Variant,
    kinds: Vec<PenaltyKind>,
    alphas: MixtureWeights,
    patch: (usize, usize),
    n_f: usize,
    bits: Option<u8>,
    layers: Vec<LayerParams>,
    version: u64,
    views_version: Option<u64>,
}

fn default_alphas(p: usize) -> MixtureWeights {
    MixtureWeights::uniform(p)
}

impl NetworkModel {
    /// Random banks, scalar parameters at their documented initial values.
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let kinds = PenaltyKind::for_count(cfg.regs)?;
        if cfg.layers == 0 || cfg.filters == 0 {
            return Err(Error::InvalidParameter("layer and filter counts must be positive".into()));
        }
        let dims = cfg.variant.bank_dims(cfg.filters);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                rho: INIT_RHO,
                lambdas: vec![INIT_LAMBDA; kinds.len()],
                gamma_mcp: INIT_GAMMA_MCP,
                a_scad: INIT_A_SCAD,
                banks: cfg
                    .variant
                    .roles()
                    .iter()
                    .zip(&dims)
                    .map(|(&role, &(o, i))| {
                        let mut bank = FilterBank::random(o, i, role, rng);
                        if role == BankRole::G {
                            bank.weights_mut().scale(RESIDUAL_INIT_SCALE);
                        }
                        QuantBank::new(bank)
                    })
                    .collect(),
            })
            .collect();
        let p = kinds.len();
        Self::from_parts(cfg.variant, kinds, default_alphas(p), cfg.patch, cfg.bits, layers)
    }

    /// Assembles and validates a model from explicit layers.
    pub fn from_parts(
        variant: Variant,
        kinds: Vec<PenaltyKind>,
        alphas: MixtureWeights,
        patch: (usize, usize),
        bits: Option<u8>,
        layers: Vec<LayerParams>,
    ) -> Result<Self> {
        if let Some(b) = bits {
            check_bits(b)?;
        }
        if kinds.is_empty() || kinds.len() != alphas.len() {
            return Err(Error::shape("model", format!("{} penalties", alphas.len()), kinds.len()));
        }
        for (i, k) in kinds.iter().enumerate() {
            if kinds[..i].contains(k) {
                return Err(Error::InvalidParameter(format!("penalty {k} listed twice")));
            }
        }
        if layers.is_empty() {
            return Err(Error::InvalidParameter("model needs at least one layer".into()));
        }
        if patch.0 == 0 || patch.1 == 0 {
            return Err(Error::InvalidParameter("patch size must be positive".into()));
        }
        let roles = variant.roles();
        let n_f = layers[0].banks.first().map_or(0, |b| b.shadow.shape()[0]);
        let dims = variant.bank_dims(n_f);
        for (k, layer) in layers.iter().enumerate() {
            if layer.lambdas.len() != kinds.len() {
                return Err(Error::shape("model layer", kinds.len(), layer.lambdas.len()));
            }
            layer.specs(&kinds)?;
            PenaltySpec::mcp(INIT_LAMBDA, layer.gamma_mcp)?;
            PenaltySpec::scad(INIT_LAMBDA, layer.a_scad)?;
            if !(layer.rho >= PARAM_MARGIN) || !layer.rho.is_finite() {
                return Err(Error::InvalidParameter(format!("layer {k}: step size must be positive")));
            }
            if layer.banks.len() != roles.len() {
                return Err(Error::shape("model layer", format!("{} banks", roles.len()), layer.banks.len()));
            }
            for ((bank, &role), &(o, i)) in layer.banks.iter().zip(roles).zip(&dims) {
                let want = [o, i, 3, 3];
                if bank.role != role || bank.shadow.shape() != want {
                    return Err(Error::shape(
                        "model bank",
                        format!("{} {:?}", role.name(), want),
                        format!("{} {:?}", bank.role.name(), bank.shadow.shape()),
                    ));
                }
            }
        }
        let mut model = NetworkModel {
            variant,
            kinds,
            alphas,
            patch,
            n_f,
            bits,
            layers,
            version: 0,
            views_version: None,
        };
        if model.layers.iter().all(|l| l.banks.iter().all(|b| b.view.is_some())) && bits.is_some() {
            model.views_version = Some(0);
        }
        Ok(model)
    }

    /// PAN whose `n_l` layers all carry the solver's fixed parameters.
    pub fn unfold_paisa(cfg: &SolverConfig<PanTransform>, n_l: usize) -> Result<Self> {
        let t = &cfg.transform;
        let banks = [&t.analysis.a, &t.analysis.b, &t.synthesis.bt, &t.synthesis.at];
        Self::unfold(Variant::Pan, cfg, &banks, n_l)
    }

    /// PAN+ counterpart of [`Self::unfold_paisa`].
    pub fn unfold_paisa_plus(cfg: &SolverConfig<PlusTransform>, n_l: usize) -> Result<Self> {
        let t = &cfg.transform;
        let banks = [&t.d, &t.h1, &t.h2, &t.ht1, &t.ht2, &t.g];
        Self::unfold(Variant::PanPlus, cfg, &banks, n_l)
    }

    fn unfold<T>(variant: Variant, cfg: &SolverConfig<T>, banks: &[&FilterBank], n_l: usize) -> Result<Self> {
        let kinds: Vec<PenaltyKind> = cfg.penalties.iter().map(|p| p.kind()).collect();
        let mut layer = LayerParams {
            rho: cfg.rho,
            lambdas: cfg.penalties.iter().map(|p| p.lambda()).collect(),
            gamma_mcp: INIT_GAMMA_MCP,
            a_scad: INIT_A_SCAD,
            banks: banks.iter().map(|&b| QuantBank::new(b.clone())).collect(),
        };
        for p in &cfg.penalties {
            match *p {
                PenaltySpec::Mcp { gamma, .. } => layer.gamma_mcp = gamma,
                PenaltySpec::Scad { a, .. } => layer.a_scad = a,
                PenaltySpec::L1 { .. } => {}
            }
        }
        Self::from_parts(variant, kinds, cfg.alphas.clone(), cfg.patch, None, vec![layer; n_l])
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn kinds(&self) -> &[PenaltyKind] {
        &self.kinds
    }

    pub fn alphas(&self) -> &MixtureWeights {
        &self.alphas
    }

    pub fn patch(&self) -> (usize, usize) {
        self.patch
    }

    pub fn n_filters(&self) -> usize {
        self.n_f
    }

    pub fn bits(&self) -> Option<u8> {
        self.bits
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    /// Mutable access to one layer. Invalidates tapes and quantized views.
    pub fn layer_mut(&mut self, k: usize) -> &mut LayerParams {
        self.bump();
        &mut self.layers[k]
    }

    /// Changes the bit width (`None` for full precision). Views must be
    /// refreshed before the next forward pass.
    pub fn set_bits(&mut self, bits: Option<u8>) -> Result<()> {
        if let Some(b) = bits {
            check_bits(b)?;
        }
        self.bits = bits;
        for layer in &mut self.layers {
            for bank in &mut layer.banks {
                bank.view = None;
            }
        }
        self.bump();
        Ok(())
    }

    /// Counter bumped by every parameter change.
    pub fn version(&self) -> u64 {
        self.version
    }

    fn bump(&mut self) {
        self.version += 1;
        self.views_version = None;
    }

    pub(crate) fn refresh_views(&mut self) -> Result<()> {
        let bits = self.bits;
        for layer in &mut self.layers {
            for bank in &mut layer.banks {
                bank.view = match bits {
                    Some(b) => {
                        let q = fit_and_quantize(&bank.shadow, b)?;
                        Some(QuantView {
                            weights: q.weights,
                            scale: q.scale,
                            codes: q.codes,
                        })
                    }
                    None => None,
                };
            }
        }
        self.views_version = Some(self.version);
        Ok(())
    }

    /// True when the forward pass may run: either quantization is off or the
    /// views were refreshed after the last parameter change.
    pub fn views_fresh(&self) -> bool {
        self.bits.is_none() || self.views_version == Some(self.version)
    }

    fn check_ready(&self) -> Result<()> {
        if self.views_fresh() {
            Ok(())
        } else {
            Err(Error::StaleQuantizedView)
        }
    }

    /// Parameter blocks in flat order: per layer `rho`, each `lambda`,
    /// `gamma_mcp`, `a_scad`, then the banks in role order.
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut out = Vec::new();
        let mut at = 0;
        let mut push = |name: String, layer: usize, len: usize, out: &mut Vec<ParamGroup>| {
            out.push(ParamGroup {
                name,
                layer,
                range: at..at + len,
            });
            at += len;
        };
        for (k, layer) in self.layers.iter().enumerate() {
            push(format!("layer{k}.rho"), k, 1, &mut out);
            for kind in &self.kinds {
                push(format!("layer{k}.lambda_{kind}"), k, 1, &mut out);
            }
            push(format!("layer{k}.gamma_mcp"), k, 1, &mut out);
            push(format!("layer{k}.a_scad"), k, 1, &mut out);
            for bank in &layer.banks {
                push(format!("layer{k}.{}", bank.role.name()), k, bank.shadow.len(), &mut out);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.scalar_count() + l.banks.iter().map(|b| b.shadow.len()).sum::<usize>())
            .sum()
    }

    /// All learnable values; banks contribute their shadow weights.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.push(layer.rho);
            out.extend(&layer.lambdas);
            out.push(layer.gamma_mcp);
            out.push(layer.a_scad);
            for bank in &layer.banks {
                out.extend(bank.shadow.data());
            }
        }
        out
    }

    /// Overwrites every learnable value. Does not project.
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape("set_flat_params", self.param_count(), flat.len()));
        }
        let mut it = flat.iter().copied();
        for layer in &mut self.layers {
            layer.rho = it.next().unwrap_or_default();
            for l in &mut layer.lambdas {
                *l = it.next().unwrap_or_default();
            }
            layer.gamma_mcp = it.next().unwrap_or_default();
            layer.a_scad = it.next().unwrap_or_default();
            for bank in &mut layer.banks {
                for w in bank.shadow.data_mut() {
                    *w = it.next().unwrap_or_default();
                }
            }
        }
        self.bump();
        Ok(())
    }

    /// Clamps scalars onto their feasible sets. Values already feasible are
    /// left untouched. Returns the number of clamped values.
    pub fn project_constraints(&mut self) -> usize {
        let mut clamped = 0;
        let mut clamp = |v: &mut f64, lo: f64| {
            if !(*v >= lo) {
                *v = lo;
                clamped += 1;
            }
        };
        for layer in &mut self.layers {
            clamp(&mut layer.rho, PARAM_MARGIN);
            for l in &mut layer.lambdas {
                clamp(l, PARAM_MARGIN);
            }
            clamp(&mut layer.gamma_mcp, 1.0 + PARAM_MARGIN);
            clamp(&mut layer.a_scad, 2.0 + PARAM_MARGIN);
        }
        if clamped > 0 {
            self.bump();
        }
        clamped
    }

    /// True when every scalar satisfies its constraint with margin.
    pub fn constraints_hold(&self) -> bool {
        self.layers.iter().all(|l| {
            l.rho >= PARAM_MARGIN
                && l.lambdas.iter().all(|&v| v >= PARAM_MARGIN)
                && l.gamma_mcp >= 1.0 + PARAM_MARGIN
                && l.a_scad >= 2.0 + PARAM_MARGIN
        })
    }

    fn image_shape(&self) -> [usize; 3] {
        [1, self.patch.0, self.patch.1]
    }

    fn shrinkages(&self) -> Result<Vec<ProxMix>> {
        self.layers
            .iter()
            .map(|l| {
                Ok(ProxMix {
                    specs: l.specs(&self.kinds)?,
                    alphas: self.alphas.clone(),
                })
            })
            .collect()
    }

    fn layer_weights(&self, k: usize) -> Vec<&Tensor> {
        self.layers[k].banks.iter().map(|b| b.effective()).collect()
    }

    fn check_op(&self, op: &SensingOperator) -> Result<()> {
        if op.n() != self.patch.0 * self.patch.1 {
            return Err(Error::shape(
                "network",
                format!("sensing operator over {} pixels", self.patch.0 * self.patch.1),
                op.n(),
            ));
        }
        Ok(())
    }

    fn forward_patch(&self, op: &SensingOperator, shrink: &[ProxMix], y: &Tensor) -> Result<(Tensor, PatchTape)> {
        if y.len() != op.m() {
            return Err(Error::shape("network forward", format!("{} measurements", op.m()), y.len()));
        }
        let mut x = op.adjoint(y, &self.image_shape())?;
        let n_l = self.layers.len();
        let mut tape = PatchTape {
            inputs: Vec::with_capacity(n_l),
            steps: Vec::with_capacity(n_l),
            layers: Vec::with_capacity(n_l),
        };
        for (k, layer) in self.layers.iter().enumerate() {
            let (r, step) = op.gradient_step_with_residual(&x, y, layer.rho)?;
            let w = self.layer_weights(k);
            let (next, lt) = match self.variant {
                Variant::Pan => {
                    let (o, t) = pan_layer_forward(PanWeights::from_slice(&w), &shrink[k], &r)?;
                    (o, LayerTape::Pan(t))
                }
                Variant::PanPlus => {
                    let (o, t) = plus_layer_forward(PlusWeights::from_slice(&w), &shrink[k], &r)?;
                    (o, LayerTape::Plus(t))
                }
            };
            x = next;
            tape.inputs.push(r);
            tape.steps.push(step);
            tape.layers.push(lt);
        }
        Ok((x, tape))
    }

    fn patch_loss(&self, out: &Tensor, x: &Tensor, with_inverse: bool) -> Result<PatchLoss> {
        if x.len() != out.len() {
            return Err(Error::shape("loss", format!("{} pixels", out.len()), x.len()));
        }
        let x = x.clone().reshape(&self.image_shape())?;
        let out_residual = out.sub(&x);
        let mut inverse = Vec::new();
        let mut inverse_sum = 0.0;
        if with_inverse {
            for k in 0..self.layers.len() {
                let w = self.layer_weights(k);
                let (res, tape) = match self.variant {
                    Variant::Pan => pan_inverse_residual(PanWeights::from_slice(&w), &x)?,
                    Variant::PanPlus => plus_inverse_residual(PlusWeights::from_slice(&w), &x)?,
                };
                inverse_sum += res.norm_sq();
                inverse.push((res, tape));
            }
        }
        Ok(PatchLoss {
            mse_sum: out_residual.norm_sq(),
            out_residual,
            inverse,
            inverse_sum,
        })
    }

    /// Adds `scale * dL_i/dtheta` for one patch into `acc`.
    #[allow(clippy::too_many_arguments)]
    fn patch_backward(
        &self,
        op: &SensingOperator,
        shrink: &[ProxMix],
        tape: &PatchTape,
        loss: &PatchLoss,
        scale: f64,
        gamma_loss: f64,
        offsets: &[usize],
        acc: &mut [f64],
    ) -> Result<()> {
        let p = self.kinds.len();
        let mut g = loss.out_residual.clone();
        g.scale(2.0 * scale);
        for k in (0..self.layers.len()).rev() {
            let w = self.layer_weights(k);
            let lg: LayerGrad = match &tape.layers[k] {
                LayerTape::Pan(t) => pan_layer_backward(PanWeights::from_slice(&w), &shrink[k], t, &g)?,
                LayerTape::Plus(t) => {
                    plus_layer_backward(PlusWeights::from_slice(&w), &shrink[k], &tape.inputs[k], t, &g)?
                }
            };
            let base = offsets[k];
            let g_r = lg.input;
            acc[base] -= g_r.dot(&tape.steps[k]);
            for (i, (kind, pg)) in self.kinds.iter().zip(&lg.prox).enumerate() {
                acc[base + 1 + i] += pg.d_lambda;
                match kind {
                    PenaltyKind::Mcp => acc[base + 1 + p] += pg.d_shape,
                    PenaltyKind::Scad => acc[base + 2 + p] += pg.d_shape,
                    PenaltyKind::L1 => {}
                }
            }
            let mut at = base + 3 + p;
            for gb in &lg.banks {
                for (a, v) in acc[at..at + gb.len()].iter_mut().zip(gb.data()) {
                    *a += v;
                }
                at += gb.len();
            }
            if k > 0 {
                // d r / d x = I - rho Phi^T Phi
                let back = op.adjoint_slice(&op.measure_slice(g_r.data()));
                g = g_r;
                for (v, b) in g.data_mut().iter_mut().zip(back) {
                    *v -= self.layers[k].rho * b;
                }
            }
        }
        if gamma_loss != 0.0 {
            for (k, (res, itape)) in loss.inverse.iter().enumerate() {
                let w = self.layer_weights(k);
                let mut gr = res.clone();
                gr.scale(2.0 * scale * gamma_loss);
                let banks = match self.variant {
                    Variant::Pan => pan_inverse_backward(PanWeights::from_slice(&w), itape, &gr)?,
                    Variant::PanPlus => plus_inverse_backward(PlusWeights::from_slice(&w), itape, &gr)?,
                };
                let mut at = offsets[k] + 3 + p;
                for gb in &banks {
                    for (a, v) in acc[at..at + gb.len()].iter_mut().zip(gb.data()) {
                        *a += v;
                    }
                    at += gb.len();
                }
            }
        }
        Ok(())
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for l in &self.layers {
            offsets.push(at);
            at += l.scalar_count() + l.banks.iter().map(|b| b.shadow.len()).sum::<usize>();
        }
        offsets
    }

    /// Reconstructs every patch from its measurements.
    pub fn forward(&self, op: &SensingOperator, ys: &[Tensor]) -> Result<BatchPass> {
        self.check_ready()?;
        self.check_op(op)?;
        let shrink = self.shrinkages()?;
        let parts = map_chunks(ys.len(), |range| {
            range
                .map(|i| self.forward_patch(op, &shrink, &ys[i]))
                .collect::<Result<Vec<_>>>()
        })?;
        let (outputs, tapes) = parts.into_iter().flatten().unzip();
        Ok(BatchPass {
            outputs,
            tapes,
            version: self.version,
        })
    }

    /// Reconstruction only, without keeping tapes.
    pub fn reconstruct(&self, op: &SensingOperator, ys: &[Tensor]) -> Result<Vec<Tensor>> {
        self.check_ready()?;
        self.check_op(op)?;
        let shrink = self.shrinkages()?;
        let parts = map_chunks(ys.len(), |range| {
            range
                .map(|i| self.forward_patch(op, &shrink, &ys[i]).map(|(x, _)| x))
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(parts.into_iter().flatten().collect())
    }

    fn check_version(&self, recorded: u64) -> Result<()> {
        if recorded != self.version {
            return Err(Error::StaleTape {
                recorded,
                current: self.version,
            });
        }
        Ok(())
    }

    /// Evaluates the loss of a forward pass against the ground truth `xs`.
    pub fn loss(&self, pass: &BatchPass, xs: &[Tensor], gamma_loss: f64) -> Result<LossEval> {
        self.check_version(pass.version)?;
        if xs.len() != pass.outputs.len() {
            return Err(Error::shape("loss", format!("{} patches", pass.outputs.len()), xs.len()));
        }
        if !(gamma_loss >= 0.0) {
            return Err(Error::InvalidParameter(format!("gamma_loss must be >= 0, got {gamma_loss}")));
        }
        let parts = map_chunks(xs.len(), |range| {
            range
                .map(|i| self.patch_loss(&pass.outputs[i], &xs[i], gamma_loss != 0.0))
                .collect::<Result<Vec<_>>>()
        })?;
        let patches: Vec<PatchLoss> = parts.into_iter().flatten().collect();
        let scale = 1.0 / (xs.len().max(1) * self.patch.0 * self.patch.1) as f64;
        let breakdown = summarize(&patches, scale, gamma_loss);
        Ok(LossEval {
            breakdown,
            patches,
            scale,
            gamma_loss,
            version: self.version,
        })
    }

    /// Gradient of the evaluated loss with respect to every parameter.
    pub fn backward(&self, op: &SensingOperator, pass: &BatchPass, loss: &LossEval) -> Result<ModelGrads> {
        self.check_version(pass.version)?;
        self.check_version(loss.version)?;
        if loss.patches.len() != pass.tapes.len() {
            return Err(Error::shape("backward", pass.tapes.len(), loss.patches.len()));
        }
        let shrink = self.shrinkages()?;
        let offsets = self.layer_offsets();
        let n = self.param_count();
        let parts = map_chunks(pass.tapes.len(), |range| {
            let mut acc = vec![0.0; n];
            for i in range {
                self.patch_backward(
                    op,
                    &shrink,
                    &pass.tapes[i],
                    &loss.patches[i],
                    loss.scale,
                    loss.gamma_loss,
                    &offsets,
                    &mut acc,
                )?;
            }
            Ok(acc)
        })?;
        Ok(ModelGrads { flat: sum_in_order(parts, n) })
    }

    /// Forward, loss and backward patch by patch, holding at most one chunk
    /// of tapes at a time. Same numbers as the three-call path.
    pub fn loss_and_grad(
        &self,
        op: &SensingOperator,
        ys: &[Tensor],
        xs: &[Tensor],
        gamma_loss: f64,
    ) -> Result<(LossBreakdown, ModelGrads)> {
        self.check_ready()?;
        self.check_op(op)?;
        if xs.len() != ys.len() {
            return Err(Error::shape("loss_and_grad", format!("{} patches", ys.len()), xs.len()));
        }
        if !(gamma_loss >= 0.0) {
            return Err(Error::InvalidParameter(format!("gamma_loss must be >= 0, got {gamma_loss}")));
        }
        let shrink = self.shrinkages()?;
        let offsets = self.layer_offsets();
        let n = self.param_count();
        let scale = 1.0 / (xs.len().max(1) * self.patch.0 * self.patch.1) as f64;
        let parts = map_chunks(ys.len(), |range| {
            let mut acc = vec![0.0; n];
            let mut sums = Vec::with_capacity(CHUNK);
            for i in range {
                let (out, tape) = self.forward_patch(op, &shrink, &ys[i])?;
                let pl = self.patch_loss(&out, &xs[i], gamma_loss != 0.0)?;
                self.patch_backward(op, &shrink, &tape, &pl, scale, gamma_loss, &offsets, &mut acc)?;
                sums.push((pl.mse_sum, pl.inverse_sum));
            }
            Ok((acc, sums))
        })?;
        let mut sums = Vec::with_capacity(ys.len());
        let mut grads = Vec::with_capacity(parts.len());
        for (g, s) in parts {
            grads.push(g);
            sums.extend(s);
        }
        Ok((breakdown_from_sums(&sums, scale, gamma_loss), ModelGrads { flat: sum_in_order(grads, n) }))
    }

    /// Loss without gradients, patch by patch.
    pub fn evaluate_loss(
        &self,
        op: &SensingOperator,
        ys: &[Tensor],
        xs: &[Tensor],
        gamma_loss: f64,
    ) -> Result<LossBreakdown> {
        let pass = self.forward(op, ys)?;
        Ok(self.loss(&pass, xs, gamma_loss)?.breakdown)
    }

    /// Activation and penalty branch pattern of a forward pass plus loss,
    /// used to keep finite-difference probes off kinks.
    #[doc(hidden)]
    pub fn kink_signature(&self, op: &SensingOperator, ys: &[Tensor], xs: &[Tensor]) -> Result<Vec<u8>> {
        let pass = self.forward(op, ys)?;
        let shrink = self.shrinkages()?;
        let eval = self.loss(&pass, xs, 1.0)?;
        let mut out = Vec::new();
        for (tape, pl) in pass.tapes.iter().zip(&eval.patches) {
            for (k, lt) in tape.layers.iter().enumerate() {
                match lt {
                    LayerTape::Pan(t) => t.kink_pattern(&shrink[k], &mut out),
                    LayerTape::Plus(t) => t.kink_pattern(&shrink[k], &mut out),
                }
            }
            for (_, it) in &pl.inverse {
                it.kink_pattern(&mut out);
            }
        }
        Ok(out)
    }
}

fn summarize(patches: &[PatchLoss], scale: f64, gamma_loss: f64) -> LossBreakdown {
    let sums: Vec<(f64, f64)> = patches.iter().map(|p| (p.mse_sum, p.inverse_sum)).collect();
    breakdown_from_sums(&sums, scale, gamma_loss)
}

fn breakdown_from_sums(sums: &[(f64, f64)], scale: f64, gamma_loss: f64) -> LossBreakdown {
    let mse = sums.iter().map(|s| s.0).sum::<f64>() * scale;
    let inverse = sums.iter().map(|s| s.1).sum::<f64>() * scale;
    LossBreakdown {
        total: mse + gamma_loss * inverse,
        mse,
        inverse,
    }
}

fn sum_in_order(parts: Vec<Vec<f64>>, n: usize) -> Vec<f64> {
    let mut total = vec![0.0; n];
    for p in parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Runs `f` over fixed-size index chunks and returns the results in chunk
/// order.
fn map_chunks<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Range<usize>) -> Result<T> + Sync,
{
    let ranges: Vec<Range<usize>> = (0..n).step_by(CHUNK).map(|s| s..(s + CHUNK).min(n)).collect();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        ranges.into_par_iter().map(&f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        ranges.into_iter().map(f).collect()
    }
}
