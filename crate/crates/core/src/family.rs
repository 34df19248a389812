//! Canonical-link exponential families.
//!
//! Every family is written as `log f(y | η) = (y·η − A(η)) / φ + c(y, φ)`
//! with cumulant `A`, mean `A'(η)` and variance function `A''(η)`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Largest linear predictor fed to `exp` in the log link.
const ETA_MAX: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    GaussianIdentity,
    BernoulliLogit,
    PoissonLog,
}

impl FamilyKind {
    pub fn name(&self) -> &'static str {
        match self {
            FamilyKind::GaussianIdentity => "gaussian",
            FamilyKind::BernoulliLogit => "binomial",
            FamilyKind::PoissonLog => "poisson",
        }
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "gaussian_identity" | "normal" => Ok(FamilyKind::GaussianIdentity),
            "binomial" | "bernoulli" | "bernoulli_logit" | "binary" => Ok(FamilyKind::BernoulliLogit),
            "poisson" | "poisson_log" => Ok(FamilyKind::PoissonLog),
            other => Err(Error::argument(format!("unknown family '{other}'"))),
        }
    }
}

/// An exponential family with its canonical link.
///
/// `dispersion` is only meaningful for the Gaussian family; Bernoulli and
/// Poisson always use φ = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub kind: FamilyKind,
    pub dispersion: f64,
}

impl Family {
    pub fn gaussian(dispersion: f64) -> Self {
        Family { kind: FamilyKind::GaussianIdentity, dispersion }
    }

    pub fn bernoulli() -> Self {
        Family { kind: FamilyKind::BernoulliLogit, dispersion: 1.0 }
    }

    pub fn poisson() -> Self {
        Family { kind: FamilyKind::PoissonLog, dispersion: 1.0 }
    }

    pub fn from_kind(kind: FamilyKind) -> Self {
        match kind {
            FamilyKind::GaussianIdentity => Family::gaussian(1.0),
            FamilyKind::BernoulliLogit => Family::bernoulli(),
            FamilyKind::PoissonLog => Family::poisson(),
        }
    }

    pub fn with_dispersion(self, dispersion: f64) -> Self {
        match self.kind {
            FamilyKind::GaussianIdentity => Family { dispersion, ..self },
            _ => self,
        }
    }

    /// φ used in the likelihood (1 for non-Gaussian families).
    pub fn phi(&self) -> f64 {
        match self.kind {
            FamilyKind::GaussianIdentity => self.dispersion,
            _ => 1.0,
        }
    }

    pub fn is_gaussian(&self) -> bool {
        self.kind == FamilyKind::GaussianIdentity
    }

    /// Cumulant function A(η).
    pub fn cumulant(&self, eta: f64) -> f64 {
        match self.kind {
            FamilyKind::GaussianIdentity => 0.5 * eta * eta,
            FamilyKind::BernoulliLogit => softplus(eta),
            FamilyKind::PoissonLog => eta.min(ETA_MAX).exp(),
        }
    }

    /// Inverse link μ = A'(η).
    pub fn mean(&self, eta: f64) -> f64 {
        match self.kind {
            FamilyKind::GaussianIdentity => eta,
            FamilyKind::BernoulliLogit => logistic(eta),
            FamilyKind::PoissonLog => eta.min(ETA_MAX).exp(),
        }
    }

    /// Link g(μ).
    pub fn link(&self, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::GaussianIdentity => mu,
            FamilyKind::BernoulliLogit => {
                let m = mu.clamp(1e-10, 1.0 - 1e-10);
                (m / (1.0 - m)).ln()
            }
            FamilyKind::PoissonLog => mu.max(1e-10).ln(),
        }
    }

    /// Variance function A''(η) (per unit dispersion).
    pub fn variance(&self, eta: f64) -> f64 {
        match self.kind {
            FamilyKind::GaussianIdentity => 1.0,
            FamilyKind::BernoulliLogit => {
                let mu = logistic(eta);
                mu * (1.0 - mu)
            }
            FamilyKind::PoissonLog => eta.min(ETA_MAX).exp(),
        }
    }

    /// Derivative of the variance function with respect to η, A'''(η).
    pub fn variance_deriv(&self, eta: f64) -> f64 {
        match self.kind {
            FamilyKind::GaussianIdentity => 0.0,
            FamilyKind::BernoulliLogit => {
                let mu = logistic(eta);
                mu * (1.0 - mu) * (1.0 - 2.0 * mu)
            }
            FamilyKind::PoissonLog => eta.min(ETA_MAX).exp(),
        }
    }

    /// Normalizing term c(y, φ) of the log density.
    pub fn log_base_measure(&self, y: f64) -> f64 {
        match self.kind {
            FamilyKind::GaussianIdentity => {
                let phi = self.dispersion;
                -0.5 * (2.0 * PI * phi).ln() - 0.5 * y * y / phi
            }
            FamilyKind::BernoulliLogit => 0.0,
            FamilyKind::PoissonLog => -statrs::function::gamma::ln_gamma(y + 1.0),
        }
    }

    /// Full log density log f(y | η).
    pub fn log_density(&self, y: f64, eta: f64) -> f64 {
        (y * eta - self.cumulant(eta)) / self.phi() + self.log_base_measure(y)
    }

    /// Checks that an observed outcome is in the support of the family.
    pub fn validate_outcome(&self, y: f64) -> bool {
        if !y.is_finite() {
            return false;
        }
        match self.kind {
            FamilyKind::GaussianIdentity => true,
            FamilyKind::BernoulliLogit => y == 0.0 || y == 1.0,
            FamilyKind::PoissonLog => y >= 0.0 && y.fract() == 0.0,
        }
    }
}

pub(crate) fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}
