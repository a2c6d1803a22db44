//! Sparsity-promoting penalties (l1, MCP, SCAD), their closed-form proximal
//! operators, and the proximal-averaging combinator.
//!
//! All three proximal operators are piecewise linear in the input. Branch
//! partitions follow the usual tables exactly: the dead zone is `|x| <= lambda`
//! and every later region is half-open on the left. For derivatives we use
//! the right-hand derivative at breakpoints.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest admissible distance from each parameter's open bound.
pub const PARAM_MARGIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    L1,
    Mcp,
    Scad,
}

impl PenaltyKind {
    /// Regularizer lists used by the 1R, 2R and 3R model variants.
    pub fn for_count(p: usize) -> Result<Vec<PenaltyKind>> {
        match p {
            1 => Ok(vec![PenaltyKind::L1]),
            2 => Ok(vec![PenaltyKind::L1, PenaltyKind::Mcp]),
            3 => Ok(vec![PenaltyKind::L1, PenaltyKind::Mcp, PenaltyKind::Scad]),
            _ => Err(Error::InvalidParameter(format!(
                "regularizer count must be 1, 2 or 3, got {p}"
            ))),
        }
    }
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PenaltyKind::L1 => "l1",
            PenaltyKind::Mcp => "mcp",
            PenaltyKind::Scad => "scad",
        })
    }
}

impl FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l1" => Ok(PenaltyKind::L1),
            "mcp" => Ok(PenaltyKind::Mcp),
            "scad" => Ok(PenaltyKind::Scad),
            other => Err(Error::InvalidParameter(format!("unknown penalty {other:?}"))),
        }
    }
}

/// One regularizer with its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PenaltySpec {
    L1 { lambda: f64 },
    Mcp { lambda: f64, gamma: f64 },
    Scad { lambda: f64, a: f64 },
}

/// Partial derivatives of a proximal output with respect to the penalty
/// parameters. `d_shape` is the derivative with respect to `gamma` (MCP) or
/// `a` (SCAD) and is always zero for l1.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProxParamGrad {
    pub d_lambda: f64,
    pub d_shape: f64,
}

impl PenaltySpec {
    pub fn l1(lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(PenaltySpec::L1 { lambda })
    }

    pub fn mcp(lambda: f64, gamma: f64) -> Result<Self> {
        check_lambda(lambda)?;
        if !(gamma >= 1.0 + PARAM_MARGIN) || !gamma.is_finite() {
            return Err(Error::InvalidParameter(format!("MCP needs gamma > 1, got {gamma}")));
        }
        Ok(PenaltySpec::Mcp { lambda, gamma })
    }

    pub fn scad(lambda: f64, a: f64) -> Result<Self> {
        check_lambda(lambda)?;
        if !(a >= 2.0 + PARAM_MARGIN) || !a.is_finite() {
            return Err(Error::InvalidParameter(format!("SCAD needs a > 2, got {a}")));
        }
        Ok(PenaltySpec::Scad { lambda, a })
    }

    /// Builds a spec of the given kind. `shape` is gamma for MCP, a for SCAD
    /// and ignored for l1.
    pub fn of_kind(kind: PenaltyKind, lambda: f64, shape: f64) -> Result<Self> {
        match kind {
            PenaltyKind::L1 => Self::l1(lambda),
            PenaltyKind::Mcp => Self::mcp(lambda, shape),
            PenaltyKind::Scad => Self::scad(lambda, shape),
        }
    }

    pub fn kind(&self) -> PenaltyKind {
        match self {
            PenaltySpec::L1 { .. } => PenaltyKind::L1,
            PenaltySpec::Mcp { .. } => PenaltyKind::Mcp,
            PenaltySpec::Scad { .. } => PenaltyKind::Scad,
        }
    }

    pub fn lambda(&self) -> f64 {
        match *self {
            PenaltySpec::L1 { lambda } | PenaltySpec::Mcp { lambda, .. } | PenaltySpec::Scad { lambda, .. } => {
                lambda
            }
        }
    }

    /// Re-checks the parameter constraints, e.g. after deserialization.
    pub fn validate(&self) -> Result<()> {
        match *self {
            PenaltySpec::L1 { lambda } => Self::l1(lambda).map(|_| ()),
            PenaltySpec::Mcp { lambda, gamma } => Self::mcp(lambda, gamma).map(|_| ()),
            PenaltySpec::Scad { lambda, a } => Self::scad(lambda, a).map(|_| ()),
        }
    }

    /// Increasing breakpoints of the proximal operator in `|x|`.
    fn breakpoints(&self) -> ([f64; 3], usize) {
        match *self {
            PenaltySpec::L1 { lambda } => ([lambda, f64::INFINITY, f64::INFINITY], 1),
            PenaltySpec::Mcp { lambda, gamma } => ([lambda, gamma * lambda, f64::INFINITY], 2),
            PenaltySpec::Scad { lambda, a } => ([lambda, 2.0 * lambda, a * lambda], 3),
        }
    }

    /// Region index of `x` under the value partitions (`<=` closes each
    /// region on the right).
    pub fn branch(&self, x: f64) -> u8 {
        let (bp, n) = self.breakpoints();
        let ax = x.abs();
        bp[..n].iter().filter(|&&b| ax > b).count() as u8
    }

    /// Region whose slope is the right-hand derivative at `x`.
    fn derivative_branch(&self, x: f64) -> u8 {
        let (bp, n) = self.breakpoints();
        let ax = x.abs();
        if x >= 0.0 {
            bp[..n].iter().filter(|&&b| ax >= b).count() as u8
        } else {
            bp[..n].iter().filter(|&&b| ax > b).count() as u8
        }
    }

    /// Penalty value g(x).
    pub fn value(&self, x: f64) -> f64 {
        let ax = x.abs();
        match *self {
            PenaltySpec::L1 { lambda } => lambda * ax,
            PenaltySpec::Mcp { lambda, gamma } => {
                if ax <= gamma * lambda {
                    lambda * ax - ax * ax / (2.0 * gamma)
                } else {
                    lambda * lambda * gamma / 2.0
                }
            }
            PenaltySpec::Scad { lambda, a } => {
                if ax <= lambda {
                    lambda * ax
                } else if ax <= a * lambda {
                    (ax * ax - 2.0 * a * lambda * ax + lambda * lambda) / (2.0 * (1.0 - a))
                } else {
                    (a + 1.0) * lambda * lambda / 2.0
                }
            }
        }
    }

    /// Closed-form proximal operator `argmin_u 0.5 (u - x)^2 + g(u)`.
    pub fn prox(&self, x: f64) -> f64 {
        let s = x.signum();
        let ax = x.abs();
        match (*self, self.branch(x)) {
            (_, 0) => 0.0 * x,
            (PenaltySpec::L1 { lambda }, _) => s * (ax - lambda),
            (PenaltySpec::Mcp { lambda, gamma }, 1) => s * gamma / (gamma - 1.0) * (ax - lambda),
            (PenaltySpec::Mcp { .. }, _) => x,
            (PenaltySpec::Scad { lambda, .. }, 1) => s * (ax - lambda),
            (PenaltySpec::Scad { lambda, a }, 2) => ((a - 1.0) * x - s * a * lambda) / (a - 2.0),
            (PenaltySpec::Scad { .. }, _) => x,
        }
    }

    /// d prox / dx, right-hand at breakpoints.
    pub fn prox_grad(&self, x: f64) -> f64 {
        match (*self, self.derivative_branch(x)) {
            (_, 0) => 0.0,
            (PenaltySpec::L1 { .. }, _) => 1.0,
            (PenaltySpec::Mcp { gamma, .. }, 1) => gamma / (gamma - 1.0),
            (PenaltySpec::Mcp { .. }, _) => 1.0,
            (PenaltySpec::Scad { a, .. }, 2) => (a - 1.0) / (a - 2.0),
            (PenaltySpec::Scad { .. }, _) => 1.0,
        }
    }

    /// Derivatives of the proximal output with respect to lambda and the
    /// shape parameter, on the same branch convention as [`Self::prox_grad`].
    pub fn prox_param_grad(&self, x: f64) -> ProxParamGrad {
        let s = x.signum();
        let ax = x.abs();
        let zero = ProxParamGrad::default();
        match (*self, self.derivative_branch(x)) {
            (_, 0) => zero,
            (PenaltySpec::L1 { .. }, _) => ProxParamGrad { d_lambda: -s, d_shape: 0.0 },
            (PenaltySpec::Mcp { lambda, gamma }, 1) => ProxParamGrad {
                d_lambda: -s * gamma / (gamma - 1.0),
                d_shape: -s * (ax - lambda) / ((gamma - 1.0) * (gamma - 1.0)),
            },
            (PenaltySpec::Mcp { .. }, _) => zero,
            (PenaltySpec::Scad { .. }, 1) => ProxParamGrad { d_lambda: -s, d_shape: 0.0 },
            (PenaltySpec::Scad { lambda, a }, 2) => ProxParamGrad {
                d_lambda: -s * a / (a - 2.0),
                d_shape: (2.0 * s * lambda - x) / ((a - 2.0) * (a - 2.0)),
            },
            (PenaltySpec::Scad { .. }, _) => zero,
        }
    }

    /// Sum of g over every element.
    pub fn total_value(&self, x: &Tensor) -> f64 {
        x.data().iter().map(|&v| self.value(v)).sum()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= PARAM_MARGIN && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("lambda must be > 0, got {lambda}")))
    }
}

/// Applies [`PenaltySpec::prox`] to every element.
pub fn prox_elementwise(spec: &PenaltySpec, x: &Tensor) -> Tensor {
    x.map(|v| spec.prox(v))
}

/// Convex combination weights: each strictly inside (0, 1), summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MixtureWeights(Vec<f64>);

impl MixtureWeights {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::InvalidParameter("at least one mixture weight is required".into()));
        }
        // A single regularizer is the degenerate mixture {1}.
        if alphas.len() > 1 && alphas.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::InvalidParameter(format!(
                "mixture weights must lie in (0, 1), got {alphas:?}"
            )));
        }
        let sum: f64 = alphas.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "mixture weights must sum to 1, got {sum}"
            )));
        }
        Ok(MixtureWeights(alphas))
    }

    /// Equal weights 1/p.
    pub fn uniform(p: usize) -> Self {
        assert!(p > 0, "uniform mixture needs p > 0");
        MixtureWeights(vec![1.0 / p as f64; p])
    }

    /// Skips validation. Used to probe degenerate weights such as (1, 0).
    #[doc(hidden)]
    pub fn unchecked(alphas: Vec<f64>) -> Self {
        MixtureWeights(alphas)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for MixtureWeights {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        MixtureWeights::new(v)
    }
}

impl From<MixtureWeights> for Vec<f64> {
    fn from(w: MixtureWeights) -> Self {
        w.0
    }
}

/// `sum_i alpha_i prox_i(x)`, elementwise.
pub fn prox_average(specs: &[PenaltySpec], weights: &MixtureWeights, x: &Tensor) -> Result<Tensor> {
    if specs.len() != weights.len() {
        return Err(Error::shape(
            "prox_average",
            format!("{} penalties", weights.len()),
            format!("{} penalties", specs.len()),
        ));
    }
    let alphas = weights.as_slice();
    Ok(x.map(|v| specs.iter().zip(alphas).map(|(s, a)| a * s.prox(v)).sum()))
}

/// Gradients of a weighted prox mixture with respect to its input and to
/// each penalty's parameters.
#[derive(Clone, Debug)]
pub struct ProxAverageGrad {
    pub input: Tensor,
    pub params: Vec<ProxParamGrad>,
}

/// Back-propagates `grad` through [`prox_average`] evaluated at `x`.
pub fn prox_average_backward(
    specs: &[PenaltySpec],
    weights: &MixtureWeights,
    x: &Tensor,
    grad: &Tensor,
) -> Result<ProxAverageGrad> {
    if specs.len() != weights.len() {
        return Err(Error::shape("prox_average_backward", weights.len(), specs.len()));
    }
    if x.len() != grad.len() {
        return Err(Error::shape("prox_average_backward", x.len(), grad.len()));
    }
    let alphas = weights.as_slice();
    let mut params = vec![ProxParamGrad::default(); specs.len()];
    let input = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| {
            let mut d = 0.0;
            for ((s, &a), p) in specs.iter().zip(alphas).zip(params.iter_mut()) {
                d += a * s.prox_grad(v);
                let pg = s.prox_param_grad(v);
                p.d_lambda += a * pg.d_lambda * g;
                p.d_shape += a * pg.d_shape * g;
            }
            d * g
        })
        .collect();
    Ok(ProxAverageGrad {
        input: Tensor::new(x.shape().to_vec(), input)?,
        params,
    })
}

/// Grid argmin of `0.5 (u - x)^2 + g(u)` over `u` in `[-bound, bound]`.
///
/// Brute-force reference for the closed forms, used by the `proxcheck`
/// command and the tests.
pub fn grid_argmin(spec: &PenaltySpec, x: f64, bound: f64, step: f64) -> f64 {
    let n = (2.0 * bound / step).round() as i64;
    let mut best_u = -bound;
    let mut best = f64::INFINITY;
    for k in 0..=n {
        let u = -bound + k as f64 * step;
        let obj = 0.5 * (u - x) * (u - x) + spec.value(u);
        if obj < best {
            best = obj;
            best_u = u;
        }
    }
    best_u
}
