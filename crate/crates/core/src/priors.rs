//! Contrast functions `G(z) = -log p(y)` of the squared cross-frequency norm
//! `z = Σ_k |y^k|²`, with analytic first and second derivatives.
//!
//! All three families are increasing and concave for `z > 0`. Their derivatives
//! are singular at the origin, so every evaluation uses `max(z, floor)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FLOOR: f64 = 1e-12;
pub const DEFAULT_NU: f64 = 4.0;
pub const DEFAULT_GG_EXPONENT: f64 = 0.25;

/// The nonlinearity triple driving the fixed-point update.
///
/// Implementors clamp `z` to their floor; callers guarantee `z >= 0`.
pub trait Contrast {
    fn value(&self, z: f64) -> f64;
    fn first(&self, z: f64) -> f64;
    fn second(&self, z: f64) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PriorKind {
    /// Spherically symmetric Laplacian, `G(z) = √z`.
    Ssl,
    /// Multivariate generalized Gaussian, `G(z) = z^p` with `0 < p < 1`.
    Gg { exponent: f64 },
    /// Multivariate Student's t, `G(z) = log(1 + z/ν)`.
    #[serde(rename = "t")]
    StudentT { nu: f64 },
}

impl PriorKind {
    pub fn label(&self) -> &'static str {
        match self {
            PriorKind::Ssl => "ssl",
            PriorKind::Gg { .. } => "gg",
            PriorKind::StudentT { .. } => "t",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastModel {
    pub kind: PriorKind,
    pub floor: f64,
}

impl Default for ContrastModel {
    fn default() -> Self {
        ContrastModel::student_t(DEFAULT_NU).expect("default nu is valid")
    }
}

impl ContrastModel {
    pub fn new(kind: PriorKind, floor: f64) -> Result<Self> {
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(Error::BadConfig(format!("prior floor must be positive, got {floor}")));
        }
        match kind {
            PriorKind::StudentT { nu } if !(nu > 0.0 && nu.is_finite()) => {
                return Err(Error::BadConfig(format!("nu must be positive, got {nu}")))
            }
            PriorKind::Gg { exponent } if !(exponent > 0.0 && exponent < 1.0) => {
                return Err(Error::BadConfig(format!(
                    "generalized Gaussian exponent must lie in (0, 1), got {exponent}"
                )))
            }
            _ => {}
        }
        Ok(ContrastModel { kind, floor })
    }

    pub fn ssl() -> Self {
        ContrastModel {
            kind: PriorKind::Ssl,
            floor: DEFAULT_FLOOR,
        }
    }

    pub fn gg() -> Self {
        ContrastModel {
            kind: PriorKind::Gg {
                exponent: DEFAULT_GG_EXPONENT,
            },
            floor: DEFAULT_FLOOR,
        }
    }

    pub fn student_t(nu: f64) -> Result<Self> {
        Self::new(PriorKind::StudentT { nu }, DEFAULT_FLOOR)
    }

    /// Builds a model from a CLI-style name (`ssl`, `gg`, `t`).
    pub fn from_name(name: &str, nu: f64) -> Result<Self> {
        match name.parse::<PriorName>()? {
            PriorName::Ssl => Ok(Self::ssl()),
            PriorName::Gg => Ok(Self::gg()),
            PriorName::T => Self::student_t(nu),
        }
    }

    pub fn label(&self) -> &'static str {
        self.kind.label()
    }

    pub fn g(&self, z: f64) -> Result<f64> {
        check(z).map(|z| self.value(z))
    }

    pub fn g_prime(&self, z: f64) -> Result<f64> {
        check(z).map(|z| self.first(z))
    }

    pub fn g_double_prime(&self, z: f64) -> Result<f64> {
        check(z).map(|z| self.second(z))
    }
}

fn check(z: f64) -> Result<f64> {
    if z < 0.0 || z.is_nan() {
        Err(Error::NegativeArgument(z))
    } else {
        Ok(z)
    }
}

impl Contrast for ContrastModel {
    #[inline]
    fn value(&self, z: f64) -> f64 {
        let z = z.max(self.floor);
        match self.kind {
            PriorKind::Ssl => z.sqrt(),
            PriorKind::Gg { exponent } => z.powf(exponent),
            PriorKind::StudentT { nu } => (z / nu).ln_1p(),
        }
    }

    #[inline]
    fn first(&self, z: f64) -> f64 {
        let z = z.max(self.floor);
        match self.kind {
            PriorKind::Ssl => 0.5 / z.sqrt(),
            PriorKind::Gg { exponent } => exponent * z.powf(exponent - 1.0),
            PriorKind::StudentT { nu } => 1.0 / (nu + z),
        }
    }

    #[inline]
    fn second(&self, z: f64) -> f64 {
        let z = z.max(self.floor);
        match self.kind {
            PriorKind::Ssl => -0.25 / (z * z.sqrt()),
            PriorKind::Gg { exponent } => exponent * (exponent - 1.0) * z.powf(exponent - 2.0),
            PriorKind::StudentT { nu } => -1.0 / ((nu + z) * (nu + z)),
        }
    }
}

impl<C: Contrast + ?Sized> Contrast for &C {
    fn value(&self, z: f64) -> f64 {
        (**self).value(z)
    }
    fn first(&self, z: f64) -> f64 {
        (**self).first(z)
    }
    fn second(&self, z: f64) -> f64 {
        (**self).second(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorName {
    Ssl,
    Gg,
    T,
}

impl FromStr for PriorName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ssl" | "laplace" => Ok(PriorName::Ssl),
            "gg" => Ok(PriorName::Gg),
            "t" | "student" | "student-t" => Ok(PriorName::T),
            other => Err(Error::BadConfig(format!("unknown prior '{other}' (expected ssl, gg or t)"))),
        }
    }
}

impl fmt::Display for ContrastModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PriorKind::Ssl => write!(f, "ssl"),
            PriorKind::Gg { exponent } => write!(f, "gg(p={exponent})"),
            PriorKind::StudentT { nu } => write!(f, "t(nu={nu})"),
        }
    }
}
