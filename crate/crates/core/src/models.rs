//! Interaction kernels, diffusion coefficients, surrogate kernels and the
//! closed-form equilibria of the three model families.

use std::f64::consts::{LN_2, PI};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;

use crate::ensemble::InitialLaw;
use crate::error::{Error, Result};
use crate::fastmath;

/// Interaction function `P(x, y, v, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Kernel {
    /// `P ≡ 1`.
    Constant,
    /// `P = χ(|v - w| <= delta)`.
    BoundedConfidence { delta: f64 },
    /// `P = (xi^2 + |x - y|^2)^(-beta)`.
    CuckerSmale { xi: f64, beta: f64 },
}

impl Kernel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Kernel::Constant => Ok(()),
            Kernel::BoundedConfidence { delta } if !(delta > 0.0) || !delta.is_finite() => Err(
                Error::invalid("delta", format!("threshold must be positive, got {delta}")),
            ),
            Kernel::CuckerSmale { xi, .. } if !(xi.abs() > 1e-150) || !xi.is_finite() => {
                Err(Error::invalid("xi", format!("length scale must be positive, got {xi}")))
            }
            Kernel::CuckerSmale { beta, .. } if !(beta >= 0.0) || !beta.is_finite() => Err(
                Error::invalid("beta", format!("exponent must be >= 0, got {beta}")),
            ),
            _ => Ok(()),
        }
    }

    /// Whether the kernel reads positions.
    pub fn needs_positions(&self) -> bool {
        matches!(self, Kernel::CuckerSmale { .. })
    }

    /// Checked evaluation.
    pub fn eval(&self, x_i: &[f64], x_j: &[f64], v_i: &[f64], v_j: &[f64]) -> Result<f64> {
        if x_i.len() != x_j.len() {
            return Err(Error::DimensionMismatch {
                expected: x_i.len(),
                found: x_j.len(),
            });
        }
        if v_i.len() != v_j.len() {
            return Err(Error::DimensionMismatch {
                expected: v_i.len(),
                found: v_j.len(),
            });
        }
        if self.needs_positions() && x_i.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: 1,
                found: 0,
            });
        }
        Ok(self.at(x_i, x_j, v_i, v_j))
    }

    /// Unchecked evaluation used inside the particle loops.
    #[inline]
    pub fn at(&self, x_i: &[f64], x_j: &[f64], v_i: &[f64], v_j: &[f64]) -> f64 {
        match *self {
            Kernel::Constant => 1.0,
            Kernel::BoundedConfidence { delta } => {
                let close = match (v_i, v_j) {
                    ([a], [b]) => (a - b).abs() <= delta,
                    _ => dist2(v_i, v_j) <= delta * delta,
                };
                if close {
                    1.0
                } else {
                    0.0
                }
            }
            Kernel::CuckerSmale { xi, beta } => cs_weight(dist2(x_i, x_j), xi * xi, beta),
        }
    }
}

/// `(xi2 + r2)^(-beta)`.
#[inline(always)]
pub(crate) fn cs_weight(r2: f64, xi2: f64, beta: f64) -> f64 {
    fastmath::pow_neg(xi2 + r2, beta)
}

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Diffusion `D(v)` together with its strength `sigma^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Diffusion {
    None,
    /// `D^2 ≡ 1`.
    Constant { sigma2: f64 },
    /// `D^2(v) = 1 - |v|^2`, vanishing on the boundary of the opinion domain.
    OpinionMultiplicative { sigma2: f64 },
}

impl Diffusion {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Diffusion::None => Ok(()),
            Diffusion::Constant { sigma2 } | Diffusion::OpinionMultiplicative { sigma2 } => {
                if sigma2 > 0.0 && sigma2.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid(
                        "sigma2",
                        format!("diffusion variance must be positive, got {sigma2}"),
                    ))
                }
            }
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Diffusion::None)
    }

    /// Multiplier `sqrt(2 sigma^2 D^2(v))` of the Wiener increment.
    #[inline]
    pub fn coefficient(&self, v: &[f64]) -> f64 {
        match *self {
            Diffusion::None => 0.0,
            Diffusion::Constant { sigma2 } => (2.0 * sigma2).sqrt(),
            Diffusion::OpinionMultiplicative { sigma2 } => {
                let d2 = (1.0 - v.iter().map(|a| a * a).sum::<f64>()).max(0.0);
                (2.0 * sigma2 * d2).sqrt()
            }
        }
    }
}

type DynSurrogate = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;

/// User-supplied surrogate `P̃(x, v)`.
#[derive(Clone)]
pub struct SurrogateFn(pub Arc<DynSurrogate>);

impl fmt::Debug for SurrogateFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SurrogateFn(..)")
    }
}

/// Surrogate interaction `P̃(x, v)` whose expectation costs O(N).
#[derive(Debug, Clone, Default)]
pub enum Surrogate {
    /// `P̃ ≡ 1`.
    #[default]
    One,
    /// `P̃(v) = 1 - |v|^2`.
    OneMinusSquare,
    /// `P̃(v) = (v - 1/2)(v + 1/2)`.
    TwoClusterQuadratic,
    Custom(Option<SurrogateFn>),
}

impl Surrogate {
    pub fn custom(f: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Surrogate::Custom(Some(SurrogateFn(Arc::new(f))))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Surrogate::Custom(None) => Err(Error::UnboundSurrogate),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, x: &[f64], v: &[f64]) -> Result<f64> {
        self.validate()?;
        Ok(self.at(x, v))
    }

    /// Unchecked evaluation; the surrogate must have passed [`Surrogate::validate`].
    #[inline]
    pub fn at(&self, x: &[f64], v: &[f64]) -> f64 {
        let v2 = || v.iter().map(|a| a * a).sum::<f64>();
        match self {
            Surrogate::One => 1.0,
            Surrogate::OneMinusSquare => 1.0 - v2(),
            Surrogate::TwoClusterQuadratic => v2() - 0.25,
            Surrogate::Custom(Some(f)) => (f.0)(x, v),
            Surrogate::Custom(None) => panic!("custom surrogate evaluated without a function"),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Surrogate::One => "case1",
            Surrogate::OneMinusSquare => "case2",
            Surrogate::TwoClusterQuadratic => "two-cluster-quadratic",
            Surrogate::Custom(_) => "custom",
        }
    }
}

impl FromStr for Surrogate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "case1" | "one" => Ok(Surrogate::One),
            "case2" | "one-minus-square" => Ok(Surrogate::OneMinusSquare),
            "two-cluster-quadratic" => Ok(Surrogate::TwoClusterQuadratic),
            other => Err(Error::invalid(
                "surrogate",
                format!("unknown surrogate `{other}` (case1, case2, two-cluster-quadratic)"),
            )),
        }
    }
}

/// Everything that defines a particle model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kernel: Kernel,
    pub diffusion: Diffusion,
    pub initial: InitialLaw,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.diffusion.validate()?;
        if self.kernel.needs_positions() && self.initial.dim_x() == 0 {
            return Err(Error::invalid(
                "kernel",
                format!("{:?} needs positions but `{}` has none", self.kernel, self.initial),
            ));
        }
        Ok(())
    }

    /// Opinion models keep velocities inside `[-1, 1]`.
    pub fn is_bounded(&self) -> bool {
        self.initial.is_bounded()
    }
}

/// Stationary density of the noisy opinion model with `P ≡ 1` and
/// `D^2(v) = 1 - v^2`: a Beta law rescaled to `(-1, 1)`.
pub fn beta_equilibrium_density(m: f64, sigma2: f64, v: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::invalid("sigma2", format!("must be positive, got {sigma2}")));
    }
    if !(m.abs() < 1.0) {
        return Err(Error::invalid("m", format!("mean opinion must lie in (-1, 1), got {m}")));
    }
    if !(v.abs() < 1.0) {
        return Err(Error::invalid("v", format!("must lie in (-1, 1), got {v}")));
    }
    let a = (1.0 + m) / sigma2;
    let b = (1.0 - m) / sigma2;
    let log_density = (a - 1.0) * (1.0 + v).ln() + (b - 1.0) * (1.0 - v).ln()
        - (2.0 / sigma2 - 1.0) * LN_2
        - ln_beta(a, b);
    Ok(log_density.exp())
}

/// Global Maxwellian `(2π σ²)^(-d/2) exp(-|v-u|²/(2σ²))`.
pub fn maxwellian_density(u: &[f64], sigma2: f64, v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len(), "maxwellian: dimension mismatch");
    let d = u.len() as f64;
    let r2 = dist2(u, v);
    (2.0 * PI * sigma2).powf(-0.5 * d) * (-r2 / (2.0 * sigma2)).exp()
}
