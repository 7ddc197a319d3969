//! Gaussian-approximation filters: extended and unscented Kalman filters
//! and the Gaussian sum filter, all with identity observation map.
//!
//! Moments are propagated through ODEs for the diffusion
//! `dX = -∇w dt + sqrt(2/β) dW`, integrated by an adaptive Dormand–Prince
//! 5(4) pair.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::free_energy::PotentialSpec;
use crate::model::{Density, DensityKind};

pub const ODE_TOL: f64 = 1e-8;

/// Integrate `y' = f(t, y)` from `t0` to `t1` with error control
/// `|err_i| <= atol + rtol |y_i|`.
pub fn dopri5<F>(mut f: F, t0: f64, y0: &[f64], t1: f64, rtol: f64, atol: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
    const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];
    let n = y0.len();
    let mut y = y0.to_vec();
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(y);
    }
    if span < 0.0 {
        return Err(Error::InvalidArgument("ODE integration runs forward only".into()));
    }
    let mut t = t0;
    let mut h = (span * 1e-3).max(1e-12);
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    f(t, &y, &mut k[0]);
    let mut steps = 0usize;
    while t < t1 {
        steps += 1;
        if steps > 1_000_000 {
            return Err(Error::Unstable("ODE step budget exhausted".into()));
        }
        if t + h > t1 {
            h = t1 - t;
        }
        for s in 1..7 {
            for i in 0..n {
                let mut acc = y[i];
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += h * A[s][j] * kj[i];
                }
                tmp[i] = acc;
            }
            let (head, tail) = k.split_at_mut(s);
            let _ = head;
            f(t + C[s] * h, &tmp, &mut tail[0]);
        }
        // Stage 7 is evaluated at the 5th-order solution (FSAL).
        let mut err = 0.0f64;
        for i in 0..n {
            let mut e = 0.0;
            for s in 0..7 {
                e += E[s] * k[s][i];
            }
            let sc = atol + rtol * y[i].abs().max(tmp[i].abs());
            err = err.max((h * e / sc).abs());
        }
        if !err.is_finite() {
            h *= 0.1;
            if h < 1e-14 * span {
                return Err(Error::Unstable("ODE solution is not finite".into()));
            }
            continue;
        }
        if err <= 1.0 {
            t += h;
            for i in 0..n {
                let mut acc = y[i];
                for s in 0..7 {
                    acc += h * B[s] * k[s][i];
                }
                y[i] = acc;
            }
            k.swap(0, 6);
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= factor;
        if h < 1e-14 * span && t < t1 {
            return Err(Error::Unstable("ODE step size underflow".into()));
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianState {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: cov.nrows(),
            });
        }
        let s = Self {
            mean: DVector::from_vec(mean),
            cov,
        };
        if !s.is_spd() {
            return Err(Error::InvalidArgument("covariance must be symmetric positive definite".into()));
        }
        Ok(s)
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, DMatrix::identity(n, n) * var)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_spd(&self) -> bool {
        let sym = (&self.cov - self.cov.transpose()).abs().max() <= 1e-10 * self.cov.abs().max().max(1e-300);
        sym && self.cov.clone().cholesky().is_some()
    }

    fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.mean.iter().copied().collect();
        v.extend(self.cov.iter());
        v
    }

    fn from_vec(n: usize, v: &[f64]) -> Self {
        Self {
            mean: DVector::from_column_slice(&v[..n]),
            cov: DMatrix::from_column_slice(n, n, &v[n..]),
        }
    }

    /// Symmetrize and floor eigenvalues at `floor`; returns whether a
    /// repair was needed.
    pub fn repair(&mut self, floor: f64) -> bool {
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        let eig = sym.clone().symmetric_eigen();
        let bad = eig.eigenvalues.iter().any(|&l| !(l > floor));
        self.cov = if bad {
            let vals = eig.eigenvalues.map(|l| if l > floor { l } else { floor });
            &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
        } else {
            sym
        };
        bad
    }
}

impl Density for GaussianState {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        gaussian_log_pdf(x, &self.mean, &self.cov).exp()
    }

    fn kind(&self) -> DensityKind {
        DensityKind::ClosedForm
    }
}

fn gaussian_log_pdf(x: &[f64], mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let n = mean.len();
    let Some(ch) = cov.clone().cholesky() else {
        return f64::NEG_INFINITY;
    };
    let r = DVector::from_column_slice(x) - mean;
    let z = ch.l().solve_lower_triangular(&r).expect("cholesky factor is invertible");
    let logdet: f64 = ch.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    -0.5 * (z.dot(&z) + logdet + n as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Flags raised while filtering.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterFlags {
    pub covariance_repaired: bool,
    pub weights_reset: bool,
}

const COV_FLOOR: f64 = 1e-12;

/// Linear-Gaussian update with `H = I`, `R = σ² I`. Returns the posterior
/// and `log N(y; m, P + R)`.
pub fn kalman_update(prior: &GaussianState, observation: &[f64], obs_sd: f64) -> Result<(GaussianState, f64)> {
    let n = prior.dim();
    if observation.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: observation.len(),
        });
    }
    let r = DMatrix::identity(n, n) * (obs_sd * obs_sd);
    let s = &prior.cov + &r;
    let log_lik = gaussian_log_pdf(observation, &prior.mean, &s);
    let s_inv = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Unstable("innovation covariance is not SPD".into()))?
        .inverse();
    let gain = &prior.cov * s_inv;
    let innov = DVector::from_column_slice(observation) - &prior.mean;
    let mean = &prior.mean + &gain * innov;
    let eye = DMatrix::<f64>::identity(n, n);
    // Joseph form keeps the covariance symmetric and positive.
    let a = &eye - &gain;
    let cov = &a * &prior.cov * a.transpose() + &gain * &r * gain.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok((GaussianState { mean, cov }, log_lik))
}

/// Linearized moment propagation over `delta_t`.
pub fn ekf_predict(state: &GaussianState, potential: &PotentialSpec, beta: f64, delta_t: f64) -> Result<(GaussianState, FilterFlags)> {
    let n = state.dim();
    let q = 2.0 / beta;
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| {
        let m = &y[..n];
        potential.gradient(m, &mut grad);
        potential.hessian_diag(m, &mut hess);
        for i in 0..n {
            dy[i] = -grad[i];
        }
        // P is stored column-major after the mean.
        for c in 0..n {
            for r in 0..n {
                let p = y[n + c * n + r];
                let mut v = -(hess[r] + hess[c]) * p;
                if r == c {
                    v += q;
                }
                dy[n + c * n + r] = v;
            }
        }
    };
    let y = dopri5(rhs, 0.0, &state.to_vec(), delta_t, ODE_TOL, ODE_TOL)?;
    let mut out = GaussianState::from_vec(n, &y);
    let repaired = out.repair(COV_FLOOR);
    Ok((
        out,
        FilterFlags {
            covariance_repaired: repaired,
            weights_reset: false,
        },
    ))
}

pub fn ekf_predict_update(
    state: &GaussianState,
    potential: &PotentialSpec,
    beta: f64,
    delta_t: f64,
    observation: &[f64],
    obs_sd: f64,
) -> Result<(GaussianState, FilterFlags)> {
    let (pred, flags) = ekf_predict(state, potential, beta, delta_t)?;
    Ok((kalman_update(&pred, observation, obs_sd)?.0, flags))
}

/// Scaled unscented transform parameters. `beta` is the prior-knowledge
/// parameter of the transform, not the inverse dispersion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UkfParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UkfParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 2.0,
            kappa: 1.0,
        }
    }
}

impl UkfParams {
    /// `(lambda, mean weights, covariance weights)` for dimension `n`,
    /// with `lambda = alpha² (n + kappa) - n`.
    pub fn weights(&self, n: usize) -> (f64, Vec<f64>, Vec<f64>) {
        let nf = n as f64;
        let lambda = self.alpha * self.alpha * (nf + self.kappa) - nf;
        let wi = 1.0 / (2.0 * (nf + lambda));
        let mut wm = vec![wi; 2 * n + 1];
        let mut wc = wm.clone();
        wm[0] = lambda / (nf + lambda);
        wc[0] = wm[0] + (1.0 - self.alpha * self.alpha + self.beta);
        (lambda, wm, wc)
    }
}

/// Continuous-discrete unscented moment propagation:
/// `dm/dt = Σ wm_i f(X_i)` and
/// `dP/dt = Σ wc_i [(X_i - m)(f_i - f̄)ᵀ + (f_i - f̄)(X_i - m)ᵀ] + (2/β) I`
/// with sigma points `X = m ± sqrt(n + λ) cols(chol P)`.
pub fn ukf_predict(
    state: &GaussianState,
    potential: &PotentialSpec,
    beta: f64,
    delta_t: f64,
    params: &UkfParams,
) -> Result<(GaussianState, FilterFlags)> {
    let n = state.dim();
    let q = 2.0 / beta;
    let (lambda, wm, wc) = params.weights(n);
    let scale = (n as f64 + lambda).sqrt();
    if !scale.is_finite() || !(n as f64 + lambda > 0.0) {
        return Err(Error::InvalidArgument("unscented parameters give n + lambda <= 0".into()));
    }
    let mut repaired = false;
    let mut grad = vec![0.0; n];
    let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| {
        let mut st = GaussianState::from_vec(n, y);
        let chol = match st.cov.clone().cholesky() {
            Some(c) => c,
            None => {
                repaired |= st.repair(COV_FLOOR);
                st.cov.clone().cholesky().expect("repaired covariance is SPD")
            }
        };
        let l = chol.l();
        let mut xs = Vec::with_capacity(2 * n + 1);
        xs.push(st.mean.clone());
        for c in 0..n {
            xs.push(&st.mean + l.column(c) * scale);
        }
        for c in 0..n {
            xs.push(&st.mean - l.column(c) * scale);
        }
        let fs: Vec<DVector<f64>> = xs
            .iter()
            .map(|x| {
                potential.gradient(x.as_slice(), &mut grad);
                DVector::from_iterator(n, grad.iter().map(|g| -g))
            })
            .collect();
        let mut fbar = DVector::zeros(n);
        for (f, w) in fs.iter().zip(&wm) {
            fbar += f * *w;
        }
        let mut dp = DMatrix::identity(n, n) * q;
        for i in 0..xs.len() {
            let dx = &xs[i] - &st.mean;
            let df = &fs[i] - &fbar;
            let outer = &dx * df.transpose();
            dp += (&outer + outer.transpose()) * wc[i];
        }
        dy[..n].copy_from_slice(fbar.as_slice());
        dy[n..].copy_from_slice(dp.as_slice());
    };
    let y = dopri5(rhs, 0.0, &state.to_vec(), delta_t, ODE_TOL, ODE_TOL)?;
    let mut out = GaussianState::from_vec(n, &y);
    repaired |= out.repair(COV_FLOOR);
    Ok((
        out,
        FilterFlags {
            covariance_repaired: repaired,
            weights_reset: false,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
pub fn ukf_predict_update(
    state: &GaussianState,
    potential: &PotentialSpec,
    beta: f64,
    delta_t: f64,
    observation: &[f64],
    obs_sd: f64,
    params: &UkfParams,
) -> Result<(GaussianState, FilterFlags)> {
    let (pred, flags) = ukf_predict(state, potential, beta, delta_t, params)?;
    Ok((kalman_update(&pred, observation, obs_sd)?.0, flags))
}

/// Weighted mixture of Gaussian states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSum {
    pub weights: Vec<f64>,
    pub components: Vec<GaussianState>,
}

impl GaussianSum {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianState>) -> Result<Self> {
        if weights.len() != components.len() || weights.is_empty() {
            return Err(Error::InvalidArgument("one weight per component".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidArgument("weights must be >= 0 and sum to 1".into()));
        }
        Ok(Self { weights, components })
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.components[0].dim();
        let mut m = DVector::zeros(n);
        for (w, c) in self.weights.iter().zip(&self.components) {
            m += &c.mean * *w;
        }
        m.iter().copied().collect()
    }
}

impl Density for GaussianSum {
    fn dim(&self) -> usize {
        self.components[0].dim()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w * c.eval(x))
            .sum()
    }

    fn kind(&self) -> DensityKind {
        DensityKind::Mixture
    }
}

pub fn gaussian_sum_predict(mixture: &GaussianSum, potential: &PotentialSpec, beta: f64, delta_t: f64) -> Result<(GaussianSum, FilterFlags)> {
    let mut flags = FilterFlags::default();
    let mut comps = Vec::with_capacity(mixture.components.len());
    for c in &mixture.components {
        let (p, f) = ekf_predict(c, potential, beta, delta_t)?;
        flags.covariance_repaired |= f.covariance_repaired;
        comps.push(p);
    }
    Ok((
        GaussianSum {
            weights: mixture.weights.clone(),
            components: comps,
        },
        flags,
    ))
}

/// Kalman-update every component and reweight by its marginal likelihood.
pub fn gaussian_sum_update(prior: &GaussianSum, observation: &[f64], obs_sd: f64) -> Result<(GaussianSum, bool)> {
    let mut logs = Vec::with_capacity(prior.components.len());
    let mut comps = Vec::with_capacity(prior.components.len());
    for (w, c) in prior.weights.iter().zip(&prior.components) {
        let (post, ll) = kalman_update(c, observation, obs_sd)?;
        logs.push(w.ln() + ll);
        comps.push(post);
    }
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (weights, reset) = if max.is_finite() {
        let e: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = e.iter().sum();
        (e.into_iter().map(|v| v / s).collect(), false)
    } else {
        let k = comps.len();
        (vec![1.0 / k as f64; k], true)
    };
    Ok((
        GaussianSum {
            weights,
            components: comps,
        },
        reset,
    ))
}

pub fn gaussian_sum_filter_step(
    mixture: &GaussianSum,
    potential: &PotentialSpec,
    beta: f64,
    delta_t: f64,
    observation: &[f64],
    obs_sd: f64,
) -> Result<(GaussianSum, FilterFlags)> {
    let (pred, mut flags) = gaussian_sum_predict(mixture, potential, beta, delta_t)?;
    let (post, reset) = gaussian_sum_update(&pred, observation, obs_sd)?;
    flags.weights_reset = reset;
    Ok((post, flags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::free_energy::ou_propagate;

    #[test]
    fn dopri_exponential() {
        let y = dopri5(|_, y, dy| dy[0] = -2.0 * y[0], 0.0, &[1.0], 1.5, 1e-10, 1e-12).unwrap();
        assert!((y[0] - (-3.0f64).exp()).abs() < 1e-9);
        let y = dopri5(|t, _, dy| dy[0] = t.cos(), 0.0, &[0.0], 2.0, 1e-10, 1e-12).unwrap();
        assert!((y[0] - 2f64.sin()).abs() < 1e-9);
    }

    fn ou_pot() -> PotentialSpec {
        PotentialSpec::quadratic(vec![0.7, 1.3], vec![0.2, -0.4]).unwrap()
    }

    #[test]
    fn ekf_is_exact_for_ou() {
        let s = GaussianState::new(vec![1.0, 0.5], DMatrix::from_diagonal(&DVector::from_vec(vec![0.04, 0.2]))).unwrap();
        let (p, _) = ekf_predict(&s, &ou_pot(), 1.5, 0.8).unwrap();
        let e = ou_propagate(&[0.7, 1.3], &[0.2, -0.4], 1.5, &[1.0, 0.5], &[0.04, 0.2], 0.8).unwrap();
        for k in 0..2 {
            assert!((p.mean[k] - e.mean[k]).abs() < 1e-6);
            assert!((p.cov[(k, k)] - e.var[k]).abs() < 1e-6);
        }
        assert!(p.cov[(0, 1)].abs() < 1e-9);
    }

    #[test]
    fn ukf_matches_ekf_on_linear_dynamics() {
        let s = GaussianState::new(
            vec![1.0, 0.5],
            DMatrix::from_row_slice(2, 2, &[0.05, 0.01, 0.01, 0.2]),
        )
        .unwrap();
        let (a, _) = ekf_predict(&s, &ou_pot(), 1.0, 1.0).unwrap();
        let (b, _) = ukf_predict(&s, &ou_pot(), 1.0, 1.0, &UkfParams::default()).unwrap();
        assert!((&a.mean - &b.mean).amax() < 1e-6);
        assert!((&a.cov - &b.cov).amax() < 1e-6);
    }

    #[test]
    fn ukf_weights() {
        let (lambda, wm, wc) = UkfParams::default().weights(1);
        assert!((lambda + 0.5).abs() < 1e-15);
        assert!((wm.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(wm, vec![-1.0, 1.0, 1.0]);
        assert!((wc[0] - 1.75).abs() < 1e-15);
        for n in 1..6 {
            let (_, wm, _) = UkfParams::default().weights(n);
            assert!((wm.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_potential_keeps_zero_mean() {
        let s = GaussianState::isotropic(vec![0.0], 0.3).unwrap();
        let pot = PotentialSpec::quadratic(vec![1.0], vec![0.0]).unwrap();
        let (p, _) = ukf_predict(&s, &pot, 1.0, 1.0, &UkfParams::default()).unwrap();
        assert!(p.mean[0].abs() < 1e-8);
    }

    #[test]
    fn observation_noise_limits() {
        let s = GaussianState::isotropic(vec![0.3], 0.5).unwrap();
        let (tight, _) = kalman_update(&s, &[2.0], 1e-6).unwrap();
        assert!((tight.mean[0] - 2.0).abs() < 1e-9);
        let (loose, _) = kalman_update(&s, &[2.0], 1e6).unwrap();
        assert!((loose.mean[0] - 0.3).abs() < 1e-9);
        assert!((loose.cov[(0, 0)] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn single_component_sum_is_ekf() {
        let s = GaussianState::isotropic(vec![0.1], 0.2).unwrap();
        let pot = PotentialSpec::SineWell;
        let mix = GaussianSum::new(vec![1.0], vec![s.clone()]).unwrap();
        let (a, _) = gaussian_sum_filter_step(&mix, &pot, 1.0, 1.0, &[0.7], 1.0).unwrap();
        let (b, _) = ekf_predict_update(&s, &pot, 1.0, 1.0, &[0.7], 1.0).unwrap();
        assert!((a.components[0].mean[0] - b.mean[0]).abs() < 1e-12);
        assert_eq!(a.weights, vec![1.0]);
    }

    #[test]
    fn symmetric_pair_keeps_equal_weights() {
        let pot = PotentialSpec::quadratic(vec![1.0], vec![0.0]).unwrap();
        let mix = GaussianSum::new(
            vec![0.5, 0.5],
            vec![
                GaussianState::isotropic(vec![-1.0], 0.1).unwrap(),
                GaussianState::isotropic(vec![1.0], 0.1).unwrap(),
            ],
        )
        .unwrap();
        let (post, _) = gaussian_sum_filter_step(&mix, &pot, 1.0, 0.3, &[0.0], 1.0).unwrap();
        assert!((post.weights[0] - post.weights[1]).abs() < 1e-12);
    }

    #[test]
    fn repair_floors_eigenvalues() {
        let mut s = GaussianState {
            mean: DVector::from_vec(vec![0.0, 0.0]),
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
        };
        assert!(s.repair(1e-12));
        assert!(s.cov.clone().cholesky().is_some());
    }
}
