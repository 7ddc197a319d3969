//! Separable Legendre regularizers on transport couplings.
//!
//! A regularizer is specified by its scalar component `R(u)`, applied to
//! the coupling density pointwise. The dual objective only consumes the
//! conjugate `R*`, its derivative, and the clamp threshold `R'(0)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar component of a separable, Legendre-type regularizer.
pub trait Legendre {
    /// `R(u)`.
    fn r_bar(&self, u: f64) -> Result<f64>;
    /// `R'(u)`, the inverse of [`Legendre::grad_r_bar_conj`].
    fn grad_r_bar(&self, u: f64) -> Result<f64>;
    /// `R*(xi) = sup_u [u xi - R(u)]`.
    fn r_bar_conj(&self, xi: f64) -> f64;
    /// `(R*)'(xi)`.
    fn grad_r_bar_conj(&self, xi: f64) -> f64;
    /// `R'(0)`; `-inf` when the derivative diverges at zero.
    fn clamp_at(&self) -> f64;
}

/// `R(u) = u (log u - 1)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Entropy;

/// `R(u) = u^2`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SquaredL2;

impl Legendre for Entropy {
    fn r_bar(&self, u: f64) -> Result<f64> {
        if u < 0.0 || u.is_nan() {
            return Err(Error::OutOfDomain {
                what: "entropy regularizer",
                value: u,
            });
        }
        Ok(if u == 0.0 { 0.0 } else { u * (u.ln() - 1.0) })
    }

    fn grad_r_bar(&self, u: f64) -> Result<f64> {
        if u <= 0.0 || u.is_nan() {
            return Err(Error::OutOfDomain {
                what: "entropy regularizer gradient",
                value: u,
            });
        }
        Ok(u.ln())
    }

    fn r_bar_conj(&self, xi: f64) -> f64 {
        xi.exp()
    }

    fn grad_r_bar_conj(&self, xi: f64) -> f64 {
        xi.exp()
    }

    fn clamp_at(&self) -> f64 {
        f64::NEG_INFINITY
    }
}

impl Legendre for SquaredL2 {
    fn r_bar(&self, u: f64) -> Result<f64> {
        Ok(u * u)
    }

    fn grad_r_bar(&self, u: f64) -> Result<f64> {
        Ok(2.0 * u)
    }

    fn r_bar_conj(&self, xi: f64) -> f64 {
        0.25 * xi * xi
    }

    fn grad_r_bar_conj(&self, xi: f64) -> f64 {
        0.5 * xi
    }

    fn clamp_at(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerKind {
    Entropy,
    L2,
}

/// The two shipped regularizers behind one concrete type, so the dual's
/// inner loop dispatches with a match instead of a vtable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularizer {
    Entropy(Entropy),
    L2(SquaredL2),
}

pub fn entropy_regularizer() -> Regularizer {
    Regularizer::Entropy(Entropy)
}

pub fn l2_regularizer() -> Regularizer {
    Regularizer::L2(SquaredL2)
}

impl Regularizer {
    pub fn from_kind(kind: RegularizerKind) -> Self {
        match kind {
            RegularizerKind::Entropy => entropy_regularizer(),
            RegularizerKind::L2 => l2_regularizer(),
        }
    }

    pub fn kind(&self) -> RegularizerKind {
        match self {
            Self::Entropy(_) => RegularizerKind::Entropy,
            Self::L2(_) => RegularizerKind::L2,
        }
    }
}

impl Legendre for Regularizer {
    fn r_bar(&self, u: f64) -> Result<f64> {
        match self {
            Self::Entropy(r) => r.r_bar(u),
            Self::L2(r) => r.r_bar(u),
        }
    }

    fn grad_r_bar(&self, u: f64) -> Result<f64> {
        match self {
            Self::Entropy(r) => r.grad_r_bar(u),
            Self::L2(r) => r.grad_r_bar(u),
        }
    }

    #[inline]
    fn r_bar_conj(&self, xi: f64) -> f64 {
        match self {
            Self::Entropy(r) => r.r_bar_conj(xi),
            Self::L2(r) => r.r_bar_conj(xi),
        }
    }

    #[inline]
    fn grad_r_bar_conj(&self, xi: f64) -> f64 {
        match self {
            Self::Entropy(r) => r.grad_r_bar_conj(xi),
            Self::L2(r) => r.grad_r_bar_conj(xi),
        }
    }

    #[inline]
    fn clamp_at(&self) -> f64 {
        match self {
            Self::Entropy(r) => r.clamp_at(),
            Self::L2(r) => r.clamp_at(),
        }
    }
}
