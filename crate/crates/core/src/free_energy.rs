//! Advection-diffusion free energy `f(rho) = <w, rho> + beta^-1 <rho, log rho - 1>`
//! and the conjugate quantities consumed by the dual:
//!
//! ```text
//! f*(z)        = beta^-1 ∫ exp(beta (z(x) - w(x))) dx
//! (∇f*(z))(x)  = exp(beta (z(x) - w(x)))
//! ```

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DiagGaussian;

/// Exponents above this are clamped before `exp`.
pub const MAX_EXPONENT: f64 = 700.0;

/// Advection potential `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PotentialSpec {
    /// `w(x) = (x - b)^T A (x - b)` with diagonal `A`.
    QuadraticOu { a: Vec<f64>, b: Vec<f64> },
    /// `w(x) = sin(2 pi x) / pi + x^2 / 4`, one-dimensional.
    SineWell,
    /// `w = 0`: pure Brownian motion.
    Flat { dim: usize },
}

impl PotentialSpec {
    pub fn quadratic(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let spec = Self::QuadraticOu { a, b };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::QuadraticOu { a, b } => {
                if a.len() != b.len() || a.is_empty() {
                    return Err(Error::DimensionMismatch {
                        expected: a.len(),
                        got: b.len(),
                    });
                }
                if a.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                    return Err(Error::InvalidArgument(
                        "quadratic potential needs a strictly positive diagonal".into(),
                    ));
                }
                Ok(())
            }
            Self::SineWell => Ok(()),
            Self::Flat { dim } => {
                if *dim == 0 {
                    Err(Error::InvalidArgument("flat potential needs dim > 0".into()))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::QuadraticOu { a, .. } => a.len(),
            Self::SineWell => 1,
            Self::Flat { dim } => *dim,
        }
    }

    /// A lower bound of `w` over `R^d`.
    pub fn lower_bound(&self) -> f64 {
        match self {
            Self::QuadraticOu { .. } | Self::Flat { .. } => 0.0,
            // sin/pi >= -1/pi and x^2/4 >= 0
            Self::SineWell => -1.0 / PI,
        }
    }

    #[inline]
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Self::QuadraticOu { a, b } => a
                .iter()
                .zip(b)
                .zip(x)
                .map(|((ai, bi), xi)| ai * (xi - bi) * (xi - bi))
                .sum(),
            Self::SineWell => {
                let x = x[0];
                (2.0 * PI * x).sin() / PI + 0.25 * x * x
            }
            Self::Flat { .. } => 0.0,
        }
    }

    /// `∇w(x)` written into `out`.
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Self::QuadraticOu { a, b } => {
                for k in 0..a.len() {
                    out[k] = 2.0 * a[k] * (x[k] - b[k]);
                }
            }
            Self::SineWell => {
                out[0] = 2.0 * (2.0 * PI * x[0]).cos() + 0.5 * x[0];
            }
            Self::Flat { .. } => out.iter_mut().for_each(|v| *v = 0.0),
        }
    }

    /// Diagonal of the Hessian of `w`. Every shipped potential is separable,
    /// so the off-diagonal entries are zero.
    pub fn hessian_diag(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Self::QuadraticOu { a, .. } => {
                for k in 0..a.len() {
                    out[k] = 2.0 * a[k];
                }
            }
            Self::SineWell => {
                out[0] = -4.0 * PI * (2.0 * PI * x[0]).sin() + 0.5;
            }
            Self::Flat { .. } => out.iter_mut().for_each(|v| *v = 0.0),
        }
    }
}

/// Count of exponent clamps and the largest exponent seen in a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpDiagnostics {
    pub clamped: usize,
    pub max_exponent: f64,
}

impl ExpDiagnostics {
    pub fn new() -> Self {
        Self {
            clamped: 0,
            max_exponent: f64::NEG_INFINITY,
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.clamped += other.clamped;
        self.max_exponent = self.max_exponent.max(other.max_exponent);
    }

    #[inline]
    pub fn exp(&mut self, exponent: f64) -> f64 {
        if exponent > self.max_exponent {
            self.max_exponent = exponent;
        }
        if exponent > MAX_EXPONENT {
            self.clamped += 1;
            MAX_EXPONENT.exp()
        } else {
            exponent.exp()
        }
    }
}

/// Free energy of an advection-diffusion with potential `w` and inverse
/// dispersion `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergy {
    pub potential: PotentialSpec,
    pub beta: f64,
}

impl FreeEnergy {
    pub fn new(potential: PotentialSpec, beta: f64) -> Result<Self> {
        potential.validate()?;
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")));
        }
        if !potential.lower_bound().is_finite() {
            return Err(Error::InvalidArgument("potential must be bounded below".into()));
        }
        Ok(Self { potential, beta })
    }

    pub fn dim(&self) -> usize {
        self.potential.dim()
    }

    #[inline]
    pub fn w(&self, x: &[f64]) -> f64 {
        self.potential.value(x)
    }

    /// Pointwise integrand of `f*`: `beta^-1 exp(beta (z - w(x)))`.
    pub fn eval_f_bar_conj(&self, z: f64, x: &[f64]) -> f64 {
        self.f_bar_conj_given_w(z, self.w(x), &mut ExpDiagnostics::new())
    }

    /// `exp(beta (z - w(x)))`.
    pub fn grad_f_conj(&self, z: f64, x: &[f64]) -> f64 {
        self.grad_f_conj_given_w(z, self.w(x), &mut ExpDiagnostics::new())
    }

    #[inline]
    pub fn f_bar_conj_given_w(&self, z: f64, w: f64, diag: &mut ExpDiagnostics) -> f64 {
        diag.exp(self.beta * (z - w)) / self.beta
    }

    #[inline]
    pub fn grad_f_conj_given_w(&self, z: f64, w: f64, diag: &mut ExpDiagnostics) -> f64 {
        diag.exp(self.beta * (z - w))
    }

    /// `exp(beta (z_i - w(x_i)))` for each pair.
    pub fn eval_grad_f_conj(
        &self,
        z_values: &[f64],
        points: &[Vec<f64>],
    ) -> Result<(Vec<f64>, ExpDiagnostics)> {
        if z_values.len() != points.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                got: z_values.len(),
            });
        }
        let mut diag = ExpDiagnostics::new();
        let out = z_values
            .iter()
            .zip(points)
            .map(|(&z, x)| self.grad_f_conj_given_w(z, self.w(x), &mut diag))
            .collect();
        Ok((out, diag))
    }
}

/// Law at time `t` of the OU diffusion with potential `(x-b)^T A (x-b)`
/// started from the point `x0`.
pub fn ou_closed_form_solution(
    a: &[f64],
    b: &[f64],
    beta: f64,
    x0: &[f64],
    t: f64,
) -> Result<DiagGaussian> {
    ou_propagate(a, b, beta, x0, &vec![0.0; x0.len()], t)
}

/// Propagate a diagonal Gaussian `N(mean0, diag(var0))` through the OU
/// dynamics for time `t`. Per axis, with drift `-2 a (x - b)`:
/// mean `b + e^{-2at} (m0 - b)` and variance
/// `e^{-4at} v0 + (1 - e^{-4at}) / (2 a beta)`.
pub fn ou_propagate(
    a: &[f64],
    b: &[f64],
    beta: f64,
    mean0: &[f64],
    var0: &[f64],
    t: f64,
) -> Result<DiagGaussian> {
    let d = a.len();
    if b.len() != d || mean0.len() != d || var0.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: mean0.len(),
        });
    }
    if t < 0.0 || !(beta > 0.0) {
        return Err(Error::InvalidArgument("need t >= 0 and beta > 0".into()));
    }
    let mut mean = Vec::with_capacity(d);
    let mut var = Vec::with_capacity(d);
    for k in 0..d {
        let decay = (-2.0 * a[k] * t).exp();
        mean.push(b[k] + decay * (mean0[k] - b[k]));
        let decay2 = decay * decay;
        var.push(decay2 * var0[k] + (-(-4.0 * a[k] * t).exp_m1()) / (2.0 * a[k] * beta));
    }
    DiagGaussian::new(mean, var)
}
