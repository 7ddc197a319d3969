//! Monte Carlo smoothed dual of one regularized proximal step.
//!
//! For pairs `(x_i, y_i) ~ mu0 ⊗ nu0` the integrand is
//!
//! ```text
//! d_i = -tau f̄*(-g(x_i)/tau) / mu0(x_i)
//!       + h(y_i) nu(y_i) / nu0(y_i)
//!       - gamma / (mu0(x_i) nu0(y_i)) R̄*(max{(g(x_i) + h(y_i) - c_i) / gamma, R̄'(0)})
//! ```
//!
//! and the objective is the sample mean of `d_i`. `tau` here is the weight
//! of the free energy in the primal `W_gamma(mu, nu) + tau f(mu)`; the flow
//! module passes twice the time step.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::free_energy::{ExpDiagnostics, FreeEnergy, MAX_EXPONENT};
use crate::model::{pairwise_sum, Density, DensityKind, SamplePairSet};
use crate::regularizer::{Legendre, Regularizer};
use crate::rkhs::{potential_eval_gram, DualPotential, GramMatrix, KernelSpec};

/// Kernel centres spanning one dual potential.
#[derive(Debug, Clone)]
pub struct Basis {
    pub kernel: KernelSpec,
    pub support: Array2<f64>,
}

impl Basis {
    pub fn len(&self) -> usize {
        self.support.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn potential(&self, coefficients: &[f64]) -> Result<DualPotential> {
        DualPotential::new(
            self.kernel,
            self.support.clone(),
            Array1::from(coefficients.to_vec()),
        )
    }
}

/// Per-evaluation diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DualDiagnostics {
    /// Fraction of samples where the regularizer clamp binds.
    pub clamp_active_fraction: f64,
    /// Largest exponent passed to `exp` in the free-energy term.
    pub max_exponent: f64,
    /// Number of exponent clamps.
    pub exp_clamps: usize,
}

#[derive(Debug, Clone)]
pub struct DualEval {
    pub value: f64,
    pub grad_g: Vec<f64>,
    pub grad_h: Vec<f64>,
    pub diagnostics: DualDiagnostics,
}

/// One Monte Carlo dual problem with all sample-dependent quantities cached.
#[derive(Debug, Clone)]
pub struct DualObjectiveInstance {
    gram_g: GramMatrix,
    gram_h: GramMatrix,
    cost: Vec<f64>,
    inv_mu0: Vec<f64>,
    inv_nu0: Vec<f64>,
    nu_ratio: Vec<f64>,
    w_x: Vec<f64>,
    free_energy: FreeEnergy,
    regularizer: Regularizer,
    gamma: f64,
    tau: f64,
    g_basis: Option<Basis>,
    h_basis: Option<Basis>,
}

impl DualObjectiveInstance {
    /// Build from sample pairs, the previous density `nu`, and bases for `g`
    /// (evaluated at the `x_i`) and `h` (at the `y_i`).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        samples: &SamplePairSet,
        nu: &dyn Density,
        free_energy: FreeEnergy,
        regularizer: Regularizer,
        gamma: f64,
        tau: f64,
        g_basis: Basis,
        h_basis: Basis,
        gram_cap_bytes: usize,
    ) -> Result<Self> {
        check_weights(gamma, tau)?;
        let n = samples.len();
        let d = samples.dim();
        if nu.dim() != d || free_energy.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: nu.dim(),
            });
        }
        let xs = samples.xs.as_standard_layout();
        let ys = samples.ys.as_standard_layout();
        let mut cost = Vec::with_capacity(n);
        let mut inv_mu0 = Vec::with_capacity(n);
        let mut inv_nu0 = Vec::with_capacity(n);
        let mut w_x = Vec::with_capacity(n);
        for i in 0..n {
            let x = xs.row(i);
            let y = ys.row(i);
            let (x, y) = (x.as_slice().unwrap(), y.as_slice().unwrap());
            cost.push(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum());
            let m0 = samples.mu0.eval(x);
            let n0 = samples.nu0.eval(y);
            if !(m0 > 0.0 && n0 > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "proposal density vanishes at sample {i}"
                )));
            }
            inv_mu0.push(1.0 / m0);
            inv_nu0.push(1.0 / n0);
            w_x.push(free_energy.w(x));
        }
        let nu_vals = nu.eval_rows(ys.view());
        let nu_ratio: Vec<f64> = nu_vals.iter().zip(&inv_nu0).map(|(v, i)| v * i).collect();
        if let Some(i) = nu_ratio.iter().position(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::NonFinite { index: i });
        }
        let gram_g = GramMatrix::compact(
            potential_eval_gram(g_basis.support.view(), xs.view(), &g_basis.kernel, gram_cap_bytes)?,
            &g_basis.kernel,
        );
        let gram_h = GramMatrix::compact(
            potential_eval_gram(h_basis.support.view(), ys.view(), &h_basis.kernel, gram_cap_bytes)?,
            &h_basis.kernel,
        );
        Ok(Self {
            gram_g,
            gram_h,
            cost,
            inv_mu0,
            inv_nu0,
            nu_ratio,
            w_x,
            free_energy,
            regularizer,
            gamma,
            tau,
            g_basis: Some(g_basis),
            h_basis: Some(h_basis),
        })
    }

    /// The fully discrete problem on `n` atoms with counting reference
    /// measure: all `n^2` atom pairs with uniform `1/n` proposals, and the
    /// coefficients of `g` and `h` equal to their values at the atoms.
    pub fn discrete(
        atoms: ArrayView2<'_, f64>,
        nu_weights: &[f64],
        free_energy: FreeEnergy,
        regularizer: Regularizer,
        gamma: f64,
        tau: f64,
    ) -> Result<Self> {
        check_weights(gamma, tau)?;
        let n = atoms.nrows();
        if nu_weights.len() != n || n == 0 {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: nu_weights.len(),
            });
        }
        if free_energy.dim() != atoms.ncols() {
            return Err(Error::DimensionMismatch {
                expected: atoms.ncols(),
                got: free_energy.dim(),
            });
        }
        let total: f64 = nu_weights.iter().sum();
        if nu_weights.iter().any(|&v| v < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "nu weights must be nonnegative and sum to 1".into(),
            ));
        }
        let atoms = atoms.as_standard_layout();
        let nf = n as f64;
        let pairs = n * n;
        let mut gram_g = Array2::zeros((pairs, n));
        let mut gram_h = Array2::zeros((pairs, n));
        let mut cost = Vec::with_capacity(pairs);
        let mut w_x = Vec::with_capacity(pairs);
        let mut nu_ratio = Vec::with_capacity(pairs);
        for i in 0..n {
            let xi = atoms.row(i);
            let wi = free_energy.w(xi.as_slice().unwrap());
            for j in 0..n {
                let k = i * n + j;
                gram_g[[k, i]] = 1.0;
                gram_h[[k, j]] = 1.0;
                let yj = atoms.row(j);
                cost.push(xi.iter().zip(yj.iter()).map(|(a, b)| (a - b) * (a - b)).sum());
                w_x.push(wi);
                nu_ratio.push(nu_weights[j] * nf);
            }
        }
        Ok(Self {
            gram_g: GramMatrix::Dense(gram_g),
            gram_h: GramMatrix::Dense(gram_h),
            cost,
            inv_mu0: vec![nf; pairs],
            inv_nu0: vec![nf; pairs],
            nu_ratio,
            w_x,
            free_energy,
            regularizer,
            gamma,
            tau,
            g_basis: None,
            h_basis: None,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.cost.len()
    }

    pub fn g_len(&self) -> usize {
        self.gram_g.ncols()
    }

    pub fn h_len(&self) -> usize {
        self.gram_h.ncols()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Change the regularization weight, keeping samples and Gram matrices.
    pub fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        check_weights(gamma, self.tau)?;
        self.gamma = gamma;
        Ok(())
    }

    pub fn free_energy(&self) -> &FreeEnergy {
        &self.free_energy
    }

    pub fn regularizer(&self) -> &Regularizer {
        &self.regularizer
    }

    pub fn cost_cache(&self) -> &[f64] {
        &self.cost
    }

    pub fn nu_ratio_cache(&self) -> &[f64] {
        &self.nu_ratio
    }

    pub fn inv_mu0(&self) -> &[f64] {
        &self.inv_mu0
    }

    pub fn inv_nu0(&self) -> &[f64] {
        &self.inv_nu0
    }

    pub fn w_at_x(&self) -> &[f64] {
        &self.w_x
    }

    pub fn gram_g(&self) -> &GramMatrix {
        &self.gram_g
    }

    pub fn gram_h(&self) -> &GramMatrix {
        &self.gram_h
    }

    pub fn g_basis(&self) -> Option<&Basis> {
        self.g_basis.as_ref()
    }

    pub fn h_basis(&self) -> Option<&Basis> {
        self.h_basis.as_ref()
    }

    /// `g(x_i)` for every sample.
    pub fn g_values(&self, alpha_g: &[f64]) -> Vec<f64> {
        self.gram_g.matvec(alpha_g)
    }

    pub fn h_values(&self, alpha_h: &[f64]) -> Vec<f64> {
        self.gram_h.matvec(alpha_h)
    }

    #[inline]
    fn conj_with_guard(&self, q: f64, diag: &mut ExpDiagnostics) -> (f64, f64) {
        match self.regularizer {
            Regularizer::Entropy(_) => {
                let e = diag.exp(q);
                (e, e)
            }
            Regularizer::L2(_) => (
                self.regularizer.r_bar_conj(q),
                self.regularizer.grad_r_bar_conj(q),
            ),
        }
    }

    /// Value, `∂d/∂g(x_i)` and `∂d/∂h(y_i)` of one sample, plus whether the
    /// clamp binds.
    #[inline]
    fn sample_terms(&self, i: usize, g: f64, h: f64, diag: &mut ExpDiagnostics) -> (f64, f64, f64, bool) {
        let beta = self.free_energy.beta;
        let tau = self.tau;
        let inv_mu0 = self.inv_mu0[i];
        let ef = diag.exp(beta * (-g / tau - self.w_x[i]));
        let t1 = -tau / beta * ef * inv_mu0;
        let mut dg = ef * inv_mu0;
        let t2 = h * self.nu_ratio[i];
        let mut dh = self.nu_ratio[i];
        let q = (g + h - self.cost[i]) / self.gamma;
        let clamp = self.regularizer.clamp_at();
        let scale = inv_mu0 * self.inv_nu0[i];
        let (t3, clamped) = if q > clamp {
            let mut rd = ExpDiagnostics::new();
            let (conj, grad) = self.conj_with_guard(q, &mut rd);
            diag.clamped += rd.clamped;
            let dr = scale * grad;
            dg -= dr;
            dh -= dr;
            (-self.gamma * scale * conj, false)
        } else {
            // Below the clamp the coupling density is zero and the
            // subgradient's lower endpoint is used.
            (-self.gamma * scale * self.regularizer.r_bar_conj(clamp), true)
        };
        (t1 + t2 + t3, dg, dh, clamped)
    }

    /// The integrand `d_i` at given potential values.
    pub fn integrand(&self, i: usize, g_val: f64, h_val: f64) -> Result<f64> {
        if i >= self.n_samples() {
            return Err(Error::InvalidArgument(format!(
                "sample index {i} out of range ({})",
                self.n_samples()
            )));
        }
        let (v, ..) = self.sample_terms(i, g_val, h_val, &mut ExpDiagnostics::new());
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { index: i })
        }
    }

    /// Mean integrand and its gradient in the coefficients of `g` and `h`.
    pub fn objective_and_gradient(&self, alpha_g: &[f64], alpha_h: &[f64]) -> Result<DualEval> {
        if alpha_g.len() != self.g_len() || alpha_h.len() != self.h_len() {
            return Err(Error::DimensionMismatch {
                expected: self.g_len() + self.h_len(),
                got: alpha_g.len() + alpha_h.len(),
            });
        }
        let n = self.n_samples();
        let gv = self.g_values(alpha_g);
        let hv = self.h_values(alpha_h);

        const CHUNK: usize = 1024;
        let mut values = vec![0.0; n];
        let mut dg = vec![0.0; n];
        let mut dh = vec![0.0; n];
        let partial: Vec<(ExpDiagnostics, usize)> = values
            .par_chunks_mut(CHUNK)
            .zip(dg.par_chunks_mut(CHUNK))
            .zip(dh.par_chunks_mut(CHUNK))
            .enumerate()
            .map(|(c, ((vals, dgs), dhs))| {
                let mut diag = ExpDiagnostics::new();
                let mut clamped = 0;
                for k in 0..vals.len() {
                    let i = c * CHUNK + k;
                    let (v, a, b, cl) = self.sample_terms(i, gv[i], hv[i], &mut diag);
                    vals[k] = v;
                    dgs[k] = a;
                    dhs[k] = b;
                    clamped += cl as usize;
                }
                (diag, clamped)
            })
            .collect();
        let mut diag = ExpDiagnostics::new();
        let mut clamped = 0;
        for (d, c) in &partial {
            diag.merge(d);
            clamped += c;
        }
        if let Some(i) = values
            .iter()
            .zip(&dg)
            .zip(&dh)
            .position(|((v, a), b)| !(v.is_finite() && a.is_finite() && b.is_finite()))
        {
            return Err(Error::NonFinite { index: i });
        }
        let inv_n = 1.0 / n as f64;
        let value = pairwise_sum(&values) * inv_n;
        let mut grad_g = self.gram_g.t_matvec(&dg);
        let mut grad_h = self.gram_h.t_matvec(&dh);
        grad_g.iter_mut().for_each(|v| *v *= inv_n);
        grad_h.iter_mut().for_each(|v| *v *= inv_n);
        Ok(DualEval {
            value,
            grad_g,
            grad_h,
            diagnostics: DualDiagnostics {
                clamp_active_fraction: clamped as f64 * inv_n,
                max_exponent: diag.max_exponent,
                exp_clamps: diag.clamped,
            },
        })
    }

    /// Row-major Hessian of the objective over `[alpha_g, alpha_h]`.
    ///
    /// Forms dense copies of both Gram matrices, so it is meant for fixed
    /// bases of moderate size.
    pub fn hessian_joint(&self, z: &[f64]) -> Result<Vec<f64>> {
        let (pg, ph) = (self.g_len(), self.h_len());
        if z.len() != pg + ph {
            return Err(Error::DimensionMismatch {
                expected: pg + ph,
                got: z.len(),
            });
        }
        let (ag, ah) = z.split_at(pg);
        let gv = self.g_values(ag);
        let hv = self.h_values(ah);
        let kg = self.gram_g.to_dense();
        let kh = self.gram_h.to_dense();
        let beta = self.free_energy.beta;
        let clamp = self.regularizer.clamp_at();
        let p = pg + ph;
        const CHUNK: usize = 1024;
        let n = self.n_samples();
        let partial: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut acc = vec![0.0; p * p];
                let mut diag = ExpDiagnostics::new();
                let mut row = vec![0.0; p];
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    let inv_mu0 = self.inv_mu0[i];
                    let ef = diag.exp(beta * (-gv[i] / self.tau - self.w_x[i]));
                    let a = -(beta / self.tau) * ef * inv_mu0;
                    let q = (gv[i] + hv[i] - self.cost[i]) / self.gamma;
                    let r = if q > clamp {
                        let second = match self.regularizer {
                            Regularizer::Entropy(_) => diag.exp(q),
                            Regularizer::L2(_) => 0.5,
                        };
                        -inv_mu0 * self.inv_nu0[i] * second / self.gamma
                    } else {
                        0.0
                    };
                    row[..pg].iter_mut().zip(kg.row(i)).for_each(|(d, s)| *d = *s);
                    row[pg..].iter_mut().zip(kh.row(i)).for_each(|(d, s)| *d = *s);
                    // g block gets a + r, the rest r.
                    for j in 0..p {
                        let rj = r * row[j];
                        let aj = if j < pg { a * row[j] } else { 0.0 };
                        let line = &mut acc[j * p..(j + 1) * p];
                        for (k, v) in line.iter_mut().enumerate() {
                            *v += rj * row[k];
                        }
                        if aj != 0.0 {
                            for (k, v) in line[..pg].iter_mut().enumerate() {
                                *v += aj * row[k];
                            }
                        }
                    }
                }
                acc
            })
            .collect();
        let inv_n = 1.0 / n as f64;
        let mut h = vec![0.0; p * p];
        for part in &partial {
            h.iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
        h.iter_mut().for_each(|v| *v *= inv_n);
        if h.iter().all(|v| v.is_finite()) {
            Ok(h)
        } else {
            Err(Error::NonFinite { index: 0 })
        }
    }

    /// Objective over the concatenated coefficient vector `[alpha_g, alpha_h]`.
    pub fn value_and_gradient_joint(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = z.split_at(self.g_len());
        let eval = self.objective_and_gradient(a, b)?;
        let mut grad = eval.grad_g;
        grad.extend(eval.grad_h);
        Ok((eval.value, grad))
    }

    /// Evolved density `exp(beta(-g(x)/tau - w(x)))`, unnormalized.
    pub fn recover_density(&self, g_star: DualPotential) -> Result<RkhsDensity> {
        RkhsDensity::new(g_star, self.free_energy.clone(), self.tau, 1.0)
    }

    /// Recovered masses at the atoms of a [`DualObjectiveInstance::discrete`] problem.
    pub fn recover_discrete(&self, alpha_g: &[f64]) -> Vec<f64> {
        let n = self.g_len();
        let beta = self.free_energy.beta;
        (0..n)
            .map(|i| (beta * (-alpha_g[i] / self.tau - self.w_x[i * n])).min(MAX_EXPONENT).exp())
            .collect()
    }
}

fn check_weights(gamma: f64, tau: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("gamma must be > 0, got {gamma}")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    Ok(())
}

/// Density `scale * exp(beta(-g(x)/tau - w(x)))` implied by a dual potential.
#[derive(Debug, Clone)]
pub struct RkhsDensity {
    pub potential: Arc<DualPotential>,
    pub free_energy: FreeEnergy,
    pub tau: f64,
    pub scale: f64,
}

impl RkhsDensity {
    pub fn new(potential: DualPotential, free_energy: FreeEnergy, tau: f64, scale: f64) -> Result<Self> {
        if potential.dim() != free_energy.dim() {
            return Err(Error::DimensionMismatch {
                expected: free_energy.dim(),
                got: potential.dim(),
            });
        }
        Ok(Self {
            potential: Arc::new(potential),
            free_energy,
            tau,
            scale,
        })
    }

    pub fn with_scale(&self, scale: f64) -> Self {
        Self {
            potential: self.potential.clone(),
            free_energy: self.free_energy.clone(),
            tau: self.tau,
            scale,
        }
    }

    #[inline]
    fn from_g(&self, g: f64, x: &[f64]) -> f64 {
        let e = self.free_energy.beta * (-g / self.tau - self.free_energy.w(x));
        self.scale * e.min(MAX_EXPONENT).exp()
    }
}

impl Density for RkhsDensity {
    fn dim(&self) -> usize {
        self.free_energy.dim()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.from_g(self.potential.eval(x), x)
    }

    fn kind(&self) -> DensityKind {
        DensityKind::RkhsImplied
    }

    fn eval_rows(&self, points: ArrayView2<'_, f64>) -> Vec<f64> {
        let points = points.as_standard_layout();
        let g = crate::rkhs::potential_eval_batch(&self.potential, points.view())
            .expect("dimension checked at construction");
        g.iter()
            .enumerate()
            .map(|(i, &gi)| self.from_g(gi, points.row(i).as_slice().unwrap()))
            .collect()
    }
}
