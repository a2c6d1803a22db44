//! Learnable convolutional analysis transforms and the two layer updates
//! built from them.
//!
//! * PAN layer: `x = Ft(shrink(F(r)))` with `F = B relu(A .)` and the mirrored
//!   `Ft = At relu(Bt .)`.
//! * PAN+ layer: `x = r + G(Ht(shrink(H(D r))))` with `H = H2 relu(H1 .)` and
//!   `Ht = Ht2 relu(Ht1 .)`.
//!
//! `shrink` is a weighted average of proximal operators. Each forward returns
//! a tape holding exactly what its backward needs.

use rand::Rng;

use crate::error::Result;
use crate::penalties::{
    prox_average, prox_average_backward, MixtureWeights, PenaltySpec, ProxAverageGrad, ProxParamGrad,
};
use crate::tensor::{conv2d, conv2d_transpose, conv2d_weight_grad, relu, relu_backward, BankRole, FilterBank, Tensor};

/// Elementwise shrinkage applied in the transform domain.
pub trait Shrinkage {
    fn apply(&self, u: &Tensor) -> Result<Tensor>;
    fn backward(&self, u: &Tensor, grad: &Tensor) -> Result<ProxAverageGrad>;
    /// Branch index of every element, for detecting kink crossings.
    fn branches(&self, _u: &Tensor, _out: &mut Vec<u8>) {}
}

/// Proximal averaging over a set of penalties.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxMix {
    pub specs: Vec<PenaltySpec>,
    pub alphas: MixtureWeights,
}

impl Shrinkage for ProxMix {
    fn apply(&self, u: &Tensor) -> Result<Tensor> {
        prox_average(&self.specs, &self.alphas, u)
    }

    fn backward(&self, u: &Tensor, grad: &Tensor) -> Result<ProxAverageGrad> {
        prox_average_backward(&self.specs, &self.alphas, u, grad)
    }

    fn branches(&self, u: &Tensor, out: &mut Vec<u8>) {
        for s in &self.specs {
            out.extend(u.data().iter().map(|&v| s.branch(v)));
        }
    }
}

/// Pass-through shrinkage, mostly for tests.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityShrinkage;

impl Shrinkage for IdentityShrinkage {
    fn apply(&self, u: &Tensor) -> Result<Tensor> {
        Ok(u.clone())
    }

    fn backward(&self, _u: &Tensor, grad: &Tensor) -> Result<ProxAverageGrad> {
        Ok(ProxAverageGrad {
            input: grad.clone(),
            params: Vec::new(),
        })
    }
}

/// Saved state of `second * relu(first * x)`.
#[derive(Clone, Debug)]
pub struct ConvReluConvTape {
    input: Tensor,
    pre: Tensor,
    hidden: Tensor,
}

impl ConvReluConvTape {
    fn relu_pattern(&self, out: &mut Vec<u8>) {
        out.extend(self.pre.data().iter().map(|&v| (v > 0.0) as u8));
    }
}

pub fn conv_relu_conv(first: &Tensor, second: &Tensor, x: &Tensor) -> Result<(Tensor, ConvReluConvTape)> {
    let pre = conv2d(x, first)?;
    let hidden = relu(&pre);
    let out = conv2d(&hidden, second)?;
    Ok((
        out,
        ConvReluConvTape {
            input: x.clone(),
            pre,
            hidden,
        },
    ))
}

/// Returns `(grad_input, grad_first, grad_second)`.
pub fn conv_relu_conv_backward(
    first: &Tensor,
    second: &Tensor,
    tape: &ConvReluConvTape,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g_second = conv2d_weight_grad(&tape.hidden, grad_out)?;
    let g_hidden = conv2d_transpose(grad_out, second)?;
    let g_pre = relu_backward(&tape.pre, &g_hidden);
    let g_first = conv2d_weight_grad(&tape.input, &g_pre)?;
    let g_in = conv2d_transpose(&g_pre, first)?;
    Ok((g_in, g_first, g_second))
}

/// `F(x) = B relu(A x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisTransform {
    pub a: FilterBank,
    pub b: FilterBank,
}

/// `Ft(z) = At relu(Bt z)`, shape mirror of [`AnalysisTransform`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisTransform {
    pub bt: FilterBank,
    pub at: FilterBank,
}

/// Analysis/synthesis pair used by PAISA and PAN.
#[derive(Clone, Debug, PartialEq)]
pub struct PanTransform {
    pub analysis: AnalysisTransform,
    pub synthesis: SynthesisTransform,
}

/// Banks of the residual-form update: `F = H o D`, residual extractor `G o D`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlusTransform {
    pub d: FilterBank,
    pub h1: FilterBank,
    pub h2: FilterBank,
    pub ht1: FilterBank,
    pub ht2: FilterBank,
    pub g: FilterBank,
}

impl AnalysisTransform {
    pub fn identity(n_f: usize) -> Self {
        AnalysisTransform {
            a: FilterBank::identity(n_f, 1, BankRole::A),
            b: FilterBank::identity(n_f, n_f, BankRole::B),
        }
    }

    pub fn random<R: Rng + ?Sized>(n_f: usize, rng: &mut R) -> Self {
        AnalysisTransform {
            a: FilterBank::random(n_f, 1, BankRole::A, rng),
            b: FilterBank::random(n_f, n_f, BankRole::B, rng),
        }
    }
}

impl SynthesisTransform {
    /// Averages the channels back to one, so `Ft(F(x)) = x` for `x >= 0`
    /// when paired with [`AnalysisTransform::identity`].
    pub fn identity(n_f: usize) -> Self {
        SynthesisTransform {
            bt: FilterBank::identity(n_f, n_f, BankRole::Bt),
            at: FilterBank::identity(1, n_f, BankRole::At),
        }
    }

    pub fn random<R: Rng + ?Sized>(n_f: usize, rng: &mut R) -> Self {
        SynthesisTransform {
            bt: FilterBank::random(n_f, n_f, BankRole::Bt, rng),
            at: FilterBank::random(1, n_f, BankRole::At, rng),
        }
    }
}

impl PanTransform {
    pub fn identity(n_f: usize) -> Self {
        PanTransform {
            analysis: AnalysisTransform::identity(n_f),
            synthesis: SynthesisTransform::identity(n_f),
        }
    }

    pub fn random<R: Rng + ?Sized>(n_f: usize, rng: &mut R) -> Self {
        PanTransform {
            analysis: AnalysisTransform::random(n_f, rng),
            synthesis: SynthesisTransform::random(n_f, rng),
        }
    }

    pub fn n_filters(&self) -> usize {
        self.analysis.a.n_out()
    }

    pub fn weights(&self) -> PanWeights<'_> {
        PanWeights {
            a: self.analysis.a.weights(),
            b: self.analysis.b.weights(),
            bt: self.synthesis.bt.weights(),
            at: self.synthesis.at.weights(),
        }
    }
}

impl PlusTransform {
    pub fn identity(n_f: usize) -> Self {
        PlusTransform {
            d: FilterBank::identity(n_f, 1, BankRole::D),
            h1: FilterBank::identity(n_f, n_f, BankRole::H1),
            h2: FilterBank::identity(n_f, n_f, BankRole::H2),
            ht1: FilterBank::identity(n_f, n_f, BankRole::Ht1),
            ht2: FilterBank::identity(n_f, n_f, BankRole::Ht2),
            g: FilterBank::identity(1, n_f, BankRole::G),
        }
    }

    pub fn random<R: Rng + ?Sized>(n_f: usize, rng: &mut R) -> Self {
        PlusTransform {
            d: FilterBank::random(n_f, 1, BankRole::D, rng),
            h1: FilterBank::random(n_f, n_f, BankRole::H1, rng),
            h2: FilterBank::random(n_f, n_f, BankRole::H2, rng),
            ht1: FilterBank::random(n_f, n_f, BankRole::Ht1, rng),
            ht2: FilterBank::random(n_f, n_f, BankRole::Ht2, rng),
            g: FilterBank::random(1, n_f, BankRole::G, rng),
        }
    }

    pub fn n_filters(&self) -> usize {
        self.d.n_out()
    }

    pub fn weights(&self) -> PlusWeights<'_> {
        PlusWeights {
            d: self.d.weights(),
            h1: self.h1.weights(),
            h2: self.h2.weights(),
            ht1: self.ht1.weights(),
            ht2: self.ht2.weights(),
            g: self.g.weights(),
        }
    }
}

/// Borrowed PAN weights, either full precision or a quantized view.
#[derive(Clone, Copy, Debug)]
pub struct PanWeights<'a> {
    pub a: &'a Tensor,
    pub b: &'a Tensor,
    pub bt: &'a Tensor,
    pub at: &'a Tensor,
}

/// Borrowed PAN+ weights.
#[derive(Clone, Copy, Debug)]
pub struct PlusWeights<'a> {
    pub d: &'a Tensor,
    pub h1: &'a Tensor,
    pub h2: &'a Tensor,
    pub ht1: &'a Tensor,
    pub ht2: &'a Tensor,
    pub g: &'a Tensor,
}

pub const PAN_ROLES: [BankRole; 4] = [BankRole::A, BankRole::B, BankRole::Bt, BankRole::At];
pub const PLUS_ROLES: [BankRole; 6] = [
    BankRole::D,
    BankRole::H1,
    BankRole::H2,
    BankRole::Ht1,
    BankRole::Ht2,
    BankRole::G,
];

impl<'a> PanWeights<'a> {
    pub fn from_slice(banks: &[&'a Tensor]) -> Self {
        PanWeights {
            a: banks[0],
            b: banks[1],
            bt: banks[2],
            at: banks[3],
        }
    }
}

impl<'a> PlusWeights<'a> {
    pub fn from_slice(banks: &[&'a Tensor]) -> Self {
        PlusWeights {
            d: banks[0],
            h1: banks[1],
            h2: banks[2],
            ht1: banks[3],
            ht2: banks[4],
            g: banks[5],
        }
    }
}

pub fn forward_f(t: &AnalysisTransform, x: &Tensor) -> Result<(Tensor, ConvReluConvTape)> {
    conv_relu_conv(t.a.weights(), t.b.weights(), x)
}

pub fn forward_ftilde(t: &SynthesisTransform, z: &Tensor) -> Result<(Tensor, ConvReluConvTape)> {
    conv_relu_conv(t.bt.weights(), t.at.weights(), z)
}

/// Gradients of one layer: input, banks in role order, penalty parameters.
#[derive(Clone, Debug)]
pub struct LayerGrad {
    pub input: Tensor,
    pub banks: Vec<Tensor>,
    pub prox: Vec<ProxParamGrad>,
}

#[derive(Clone, Debug)]
pub struct PanLayerTape {
    analysis: ConvReluConvTape,
    coeffs: Tensor,
    synthesis: ConvReluConvTape,
}

pub fn pan_layer_forward(w: PanWeights<'_>, shrink: &dyn Shrinkage, r: &Tensor) -> Result<(Tensor, PanLayerTape)> {
    let (coeffs, analysis) = conv_relu_conv(w.a, w.b, r)?;
    let shrunk = shrink.apply(&coeffs)?;
    let (x, synthesis) = conv_relu_conv(w.bt, w.at, &shrunk)?;
    Ok((
        x,
        PanLayerTape {
            analysis,
            coeffs,
            synthesis,
        },
    ))
}

pub fn pan_layer_backward(
    w: PanWeights<'_>,
    shrink: &dyn Shrinkage,
    tape: &PanLayerTape,
    grad_out: &Tensor,
) -> Result<LayerGrad> {
    let (g_shrunk, g_bt, g_at) = conv_relu_conv_backward(w.bt, w.at, &tape.synthesis, grad_out)?;
    let prox = shrink.backward(&tape.coeffs, &g_shrunk)?;
    let (g_r, g_a, g_b) = conv_relu_conv_backward(w.a, w.b, &tape.analysis, &prox.input)?;
    Ok(LayerGrad {
        input: g_r,
        banks: vec![g_a, g_b, g_bt, g_at],
        prox: prox.params,
    })
}

impl PanLayerTape {
    pub fn kink_pattern(&self, shrink: &dyn Shrinkage, out: &mut Vec<u8>) {
        self.analysis.relu_pattern(out);
        shrink.branches(&self.coeffs, out);
        self.synthesis.relu_pattern(out);
    }
}

#[derive(Clone, Debug)]
pub struct PlusLayerTape {
    analysis: ConvReluConvTape,
    coeffs: Tensor,
    synthesis: ConvReluConvTape,
    synthesized: Tensor,
}

/// `x = r + G(Ht(shrink(H(D r))))`.
pub fn plus_layer_forward(w: PlusWeights<'_>, shrink: &dyn Shrinkage, r: &Tensor) -> Result<(Tensor, PlusLayerTape)> {
    let features = conv2d(r, w.d)?;
    let (coeffs, analysis) = conv_relu_conv(w.h1, w.h2, &features)?;
    let shrunk = shrink.apply(&coeffs)?;
    let (synthesized, synthesis) = conv_relu_conv(w.ht1, w.ht2, &shrunk)?;
    let mut x = conv2d(&synthesized, w.g)?;
    x.axpy(1.0, r);
    Ok((
        x,
        PlusLayerTape {
            analysis,
            coeffs,
            synthesis,
            synthesized,
        },
    ))
}

pub fn plus_layer_backward(
    w: PlusWeights<'_>,
    shrink: &dyn Shrinkage,
    r: &Tensor,
    tape: &PlusLayerTape,
    grad_out: &Tensor,
) -> Result<LayerGrad> {
    let g_g = conv2d_weight_grad(&tape.synthesized, grad_out)?;
    let g_synth = conv2d_transpose(grad_out, w.g)?;
    let (g_shrunk, g_ht1, g_ht2) = conv_relu_conv_backward(w.ht1, w.ht2, &tape.synthesis, &g_synth)?;
    let prox = shrink.backward(&tape.coeffs, &g_shrunk)?;
    let (g_feat, g_h1, g_h2) = conv_relu_conv_backward(w.h1, w.h2, &tape.analysis, &prox.input)?;
    let g_d = conv2d_weight_grad(r, &g_feat)?;
    let mut g_r = conv2d_transpose(&g_feat, w.d)?;
    g_r.axpy(1.0, grad_out);
    Ok(LayerGrad {
        input: g_r,
        banks: vec![g_d, g_h1, g_h2, g_ht1, g_ht2, g_g],
        prox: prox.params,
    })
}

impl PlusLayerTape {
    pub fn kink_pattern(&self, shrink: &dyn Shrinkage, out: &mut Vec<u8>) {
        self.analysis.relu_pattern(out);
        shrink.branches(&self.coeffs, out);
        self.synthesis.relu_pattern(out);
    }
}

/// `forward_plus` on owned transforms; see [`plus_layer_forward`].
pub fn forward_plus(t: &PlusTransform, r: &Tensor, shrink: &dyn Shrinkage) -> Result<(Tensor, PlusLayerTape)> {
    plus_layer_forward(t.weights(), shrink, r)
}

pub fn backward_plus(
    t: &PlusTransform,
    shrink: &dyn Shrinkage,
    r: &Tensor,
    tape: &PlusLayerTape,
    grad_out: &Tensor,
) -> Result<LayerGrad> {
    plus_layer_backward(t.weights(), shrink, r, tape, grad_out)
}

/// Saved state for the invertibility penalty of one layer.
#[derive(Clone, Debug)]
pub struct InverseTape {
    input: Option<Tensor>,
    analysis: ConvReluConvTape,
    synthesis: ConvReluConvTape,
}

impl InverseTape {
    pub fn kink_pattern(&self, out: &mut Vec<u8>) {
        self.analysis.relu_pattern(out);
        self.synthesis.relu_pattern(out);
    }
}

/// `Ft(F(x)) - x`, the residual whose squared norm the PAN loss penalizes.
pub fn pan_inverse_residual(w: PanWeights<'_>, x: &Tensor) -> Result<(Tensor, InverseTape)> {
    let (u, analysis) = conv_relu_conv(w.a, w.b, x)?;
    let (mut v, synthesis) = conv_relu_conv(w.bt, w.at, &u)?;
    v.axpy(-1.0, x);
    Ok((
        v,
        InverseTape {
            input: None,
            analysis,
            synthesis,
        },
    ))
}

/// Bank gradients (role order) of `<grad, Ft(F(x)) - x>`.
pub fn pan_inverse_backward(w: PanWeights<'_>, tape: &InverseTape, grad: &Tensor) -> Result<Vec<Tensor>> {
    let (g_u, g_bt, g_at) = conv_relu_conv_backward(w.bt, w.at, &tape.synthesis, grad)?;
    let (_, g_a, g_b) = conv_relu_conv_backward(w.a, w.b, &tape.analysis, &g_u)?;
    Ok(vec![g_a, g_b, g_bt, g_at])
}

/// `Ht(H(D x)) - D x`, the PAN+ counterpart of [`pan_inverse_residual`].
pub fn plus_inverse_residual(w: PlusWeights<'_>, x: &Tensor) -> Result<(Tensor, InverseTape)> {
    let features = conv2d(x, w.d)?;
    let (u, analysis) = conv_relu_conv(w.h1, w.h2, &features)?;
    let (mut v, synthesis) = conv_relu_conv(w.ht1, w.ht2, &u)?;
    v.axpy(-1.0, &features);
    Ok((
        v,
        InverseTape {
            input: Some(x.clone()),
            analysis,
            synthesis,
        },
    ))
}

/// Bank gradients (role order) of `<grad, Ht(H(D x)) - D x>`; `G` gets zero.
pub fn plus_inverse_backward(w: PlusWeights<'_>, tape: &InverseTape, grad: &Tensor) -> Result<Vec<Tensor>> {
    let (g_u, g_ht1, g_ht2) = conv_relu_conv_backward(w.ht1, w.ht2, &tape.synthesis, grad)?;
    let (mut g_feat, g_h1, g_h2) = conv_relu_conv_backward(w.h1, w.h2, &tape.analysis, &g_u)?;
    g_feat.axpy(-1.0, grad);
    let x = tape.input.as_ref().expect("PAN+ inverse tape stores its input");
    let g_d = conv2d_weight_grad(x, &g_feat)?;
    Ok(vec![g_d, g_h1, g_h2, g_ht1, g_ht2, Tensor::zeros(w.g.shape())])
}
