//! Particle methods: Euler–Maruyama simulation, Gaussian KDE and the
//! bootstrap particle filter.
//!
//! Particles are simulated from `dX = -∇w dt + sqrt(2/β) dW`, whose law
//! follows the same Fokker–Planck equation as the flow. Particle `i` draws
//! from stream `i` of the step seed, so results do not depend on thread
//! scheduling.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::free_energy::PotentialSpec;
use crate::model::{pairwise_sum, rng_stream, Density, DensityKind, Sampler, SimRng};

/// Weighted point cloud; weights sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub positions: Array2<f64>,
    pub weights: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn uniform(positions: Array2<f64>) -> Result<Self> {
        let n = positions.nrows();
        if n == 0 {
            return Err(Error::InvalidArgument("empty ensemble".into()));
        }
        Ok(Self {
            positions,
            weights: vec![1.0 / n as f64; n],
        })
    }

    pub fn weighted(positions: Array2<f64>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != positions.nrows() || weights.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: positions.nrows(),
                got: weights.len(),
            });
        }
        let total = pairwise_sum(&weights);
        if !(total > 0.0) || !total.is_finite() || weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidArgument("weights must be >= 0 with positive sum".into()));
        }
        Ok(Self {
            positions,
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.positions.ncols()
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d];
        for (row, &w) in self.positions.rows().into_iter().zip(&self.weights) {
            for k in 0..d {
                m[k] += w * row[k];
            }
        }
        m
    }

    /// Weighted per-axis variance.
    pub fn variance(&self) -> Vec<f64> {
        let m = self.mean();
        let d = self.dim();
        let mut v = vec![0.0; d];
        for (row, &w) in self.positions.rows().into_iter().zip(&self.weights) {
            for k in 0..d {
                v[k] += w * (row[k] - m[k]).powi(2);
            }
        }
        v
    }

    /// Effective sample size `1 / Σ w²`.
    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

fn em_path(x: &mut [f64], potential: &PotentialSpec, beta: f64, steps: usize, dt: f64, rng: &mut SimRng) {
    let noise = (2.0 * dt / beta).sqrt();
    let mut grad = vec![0.0; x.len()];
    for _ in 0..steps {
        potential.gradient(x, &mut grad);
        for (xi, gi) in x.iter_mut().zip(&grad) {
            let z: f64 = StandardNormal.sample(rng);
            *xi += -gi * dt + noise * z;
        }
    }
}

fn step_count(t: f64, dt: f64) -> Result<(usize, f64)> {
    if !(dt > 0.0) || !(t >= 0.0) {
        return Err(Error::InvalidArgument("need dt > 0 and t >= 0".into()));
    }
    if t == 0.0 {
        return Ok((0, dt));
    }
    let n = (t / dt).round().max(1.0) as usize;
    Ok((n, t / n as f64))
}

/// Move every particle forward by `t`; weights are kept.
pub fn propagate(
    ensemble: &ParticleEnsemble,
    potential: &PotentialSpec,
    beta: f64,
    t: f64,
    dt: f64,
    seed: u64,
) -> Result<ParticleEnsemble> {
    let (steps, dt) = step_count(t, dt)?;
    let d = ensemble.dim();
    let mut pos = ensemble.positions.as_standard_layout().into_owned();
    pos.as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(i, x)| {
            let mut rng = rng_stream(seed, i as u64);
            em_path(x, potential, beta, steps, dt, &mut rng);
        });
    Ok(ParticleEnsemble {
        positions: pos,
        weights: ensemble.weights.clone(),
    })
}

/// `n_particles` independent Euler–Maruyama paths started from `x0`.
pub fn euler_maruyama_simulate(
    x0: &dyn Sampler,
    potential: &PotentialSpec,
    beta: f64,
    t: f64,
    dt: f64,
    n_particles: usize,
    seed: u64,
) -> Result<ParticleEnsemble> {
    if n_particles == 0 {
        return Err(Error::InvalidArgument("need at least one particle".into()));
    }
    let d = x0.dim();
    let init_seed = crate::model::derive_seed(seed, 1);
    let mut data = vec![0.0; n_particles * d];
    data.par_chunks_mut(d).enumerate().for_each(|(i, x)| {
        let mut rng = rng_stream(init_seed, i as u64);
        x.copy_from_slice(&x0.sample(&mut rng));
    });
    let start = ParticleEnsemble::uniform(Array2::from_shape_vec((n_particles, d), data).expect("shape"))?;
    propagate(&start, potential, beta, t, dt, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub enum BandwidthRule {
    /// `n^{-1/(d+4)}` times the per-axis standard deviation, with `n` the
    /// effective sample size.
    Scott,
    Fixed(Vec<f64>),
}

/// Gaussian kernel density estimate with per-axis bandwidths.
#[derive(Debug, Clone)]
pub struct KdeDensity {
    ensemble: ParticleEnsemble,
    bandwidth: Vec<f64>,
    log_norm: f64,
}

impl KdeDensity {
    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }
}

pub fn kde_density(ensemble: &ParticleEnsemble, rule: &BandwidthRule) -> Result<KdeDensity> {
    if ensemble.len() < 2 {
        return Err(Error::InvalidArgument("KDE needs at least two particles".into()));
    }
    let d = ensemble.dim();
    let bandwidth = match rule {
        BandwidthRule::Scott => {
            let factor = ensemble.ess().powf(-1.0 / (d as f64 + 4.0));
            let var = ensemble.variance();
            if var.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::InvalidArgument("ensemble has zero spread".into()));
            }
            var.iter().map(|v| factor * v.sqrt()).collect()
        }
        BandwidthRule::Fixed(h) => {
            if h.len() != d || h.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::InvalidArgument("fixed bandwidths must be positive".into()));
            }
            h.clone()
        }
    };
    let log_norm = -bandwidth
        .iter()
        .map(|h| (h * (2.0 * std::f64::consts::PI).sqrt()).ln())
        .sum::<f64>();
    Ok(KdeDensity {
        ensemble: ParticleEnsemble {
            positions: ensemble.positions.as_standard_layout().into_owned(),
            weights: ensemble.weights.clone(),
        },
        bandwidth,
        log_norm,
    })
}

impl Density for KdeDensity {
    fn dim(&self) -> usize {
        self.ensemble.dim()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let pos = self.ensemble.positions.as_slice().expect("standard layout");
        let d = self.dim();
        let mut acc = 0.0;
        for (p, &w) in pos.chunks(d).zip(&self.ensemble.weights) {
            let mut q = 0.0;
            for k in 0..d {
                let r = (x[k] - p[k]) / self.bandwidth[k];
                q += r * r;
            }
            if q < 1400.0 {
                acc += w * (-0.5 * q).exp();
            }
        }
        acc * self.log_norm.exp()
    }

    fn kind(&self) -> DensityKind {
        DensityKind::Kde
    }

    fn eval_rows(&self, points: ArrayView2<'_, f64>) -> Vec<f64> {
        let points = points.as_standard_layout();
        let d = self.dim();
        points
            .as_slice()
            .expect("standard layout")
            .par_chunks(d.max(1))
            .map(|x| self.eval(x))
            .collect()
    }
}

/// Indices chosen by systematic resampling with offset `u ∈ [0, 1)`.
pub fn systematic_resample(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut j = 0;
    for i in 0..n {
        let target = (i as f64 + u) / n as f64;
        while target > cum && j + 1 < n {
            j += 1;
            cum += weights[j];
        }
        out.push(j);
    }
    out
}

/// Equal-weight ensemble drawn systematically from `ensemble`.
pub fn resample(ensemble: &ParticleEnsemble, rng: &mut SimRng) -> ParticleEnsemble {
    let idx = systematic_resample(&ensemble.weights, rng.random::<f64>());
    let positions = ensemble.positions.select(ndarray::Axis(0), &idx);
    let n = idx.len();
    ParticleEnsemble {
        positions,
        weights: vec![1.0 / n as f64; n],
    }
}

/// Reweight by the Gaussian observation likelihood `N(y; x, σ² I)`.
pub fn observation_reweight(ensemble: &ParticleEnsemble, observation: &[f64], obs_sd: f64) -> Result<ParticleEnsemble> {
    if observation.len() != ensemble.dim() {
        return Err(Error::DimensionMismatch {
            expected: ensemble.dim(),
            got: observation.len(),
        });
    }
    let logs: Vec<f64> = ensemble
        .positions
        .rows()
        .into_iter()
        .zip(&ensemble.weights)
        .map(|(x, &w)| {
            let q: f64 = x.iter().zip(observation).map(|(a, b)| (a - b).powi(2)).sum();
            w.ln() - 0.5 * q / (obs_sd * obs_sd)
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateDensity { mass: 0.0 });
    }
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    ParticleEnsemble::weighted(ensemble.positions.clone(), weights)
}

#[derive(Debug, Clone)]
pub struct PfStep {
    pub predicted: ParticleEnsemble,
    pub weighted: ParticleEnsemble,
    pub resampled: ParticleEnsemble,
}

/// Propagate over `delta_t`, reweight by the observation, resample.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_pf_step(
    ensemble: &ParticleEnsemble,
    potential: &PotentialSpec,
    beta: f64,
    delta_t: f64,
    dt_sim: f64,
    observation: &[f64],
    obs_sd: f64,
    seed: u64,
) -> Result<PfStep> {
    let predicted = propagate(ensemble, potential, beta, delta_t, dt_sim, seed)?;
    let weighted = observation_reweight(&predicted, observation, obs_sd)?;
    // The resampling offset comes from a stream no particle uses.
    let mut rng = rng_stream(seed, u64::MAX);
    let resampled = resample(&weighted, &mut rng);
    Ok(PfStep {
        predicted,
        weighted,
        resampled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::free_energy::ou_propagate;
    use crate::model::{rng_from_seed, DiagGaussian, Grid};

    #[test]
    fn brownian_variance() {
        let start = DiagGaussian::new(vec![0.0], vec![0.0]).unwrap();
        let (beta, t, n) = (2.0, 0.5, 20_000);
        let ens = euler_maruyama_simulate(&start, &PotentialSpec::Flat { dim: 1 }, beta, t, 1e-2, n, 3).unwrap();
        let v = ens.variance()[0];
        let expected = 2.0 * t / beta;
        // Standard error of a sample variance of a Gaussian.
        let se = expected * (2.0 / n as f64).sqrt();
        assert!((v - expected).abs() < 3.0 * se, "{v} vs {expected}");
    }

    #[test]
    fn ou_moments() {
        let start = DiagGaussian::isotropic(vec![1.0, -0.5], 0.1).unwrap();
        let pot = PotentialSpec::quadratic(vec![1.0, 0.5], vec![0.0, 0.3]).unwrap();
        let n = 100_000;
        let ens = euler_maruyama_simulate(&start, &pot, 1.0, 0.5, 1e-3, n, 7).unwrap();
        let exact = ou_propagate(&[1.0, 0.5], &[0.0, 0.3], 1.0, &[1.0, -0.5], &[0.01, 0.01], 0.5).unwrap();
        let m = ens.mean();
        let v = ens.variance();
        for k in 0..2 {
            let se = (exact.var[k] / n as f64).sqrt();
            // Allow for the O(dt) bias as well as sampling noise.
            assert!((m[k] - exact.mean[k]).abs() < 3.0 * se + 2e-3, "{k}: {} vs {}", m[k], exact.mean[k]);
            assert!((v[k] - exact.var[k]).abs() < 0.02 * exact.var[k] + 1e-3);
        }
    }

    #[test]
    fn smaller_dt_moves_mean_towards_exact() {
        let start = DiagGaussian::new(vec![2.0], vec![0.0]).unwrap();
        let pot = PotentialSpec::quadratic(vec![1.0], vec![0.0]).unwrap();
        let exact = ou_propagate(&[1.0], &[0.0], 1.0, &[2.0], &[0.0], 0.5).unwrap().mean[0];
        let err = |dt: f64| {
            let e = euler_maruyama_simulate(&start, &pot, 1.0, 0.5, dt, 40_000, 5).unwrap();
            (e.mean()[0] - exact).abs()
        };
        assert!(err(0.05) > err(0.025));
    }

    #[test]
    fn kde_mass_and_mode() {
        let start = DiagGaussian::isotropic(vec![0.0], 1.0).unwrap();
        let ens = euler_maruyama_simulate(&start, &PotentialSpec::Flat { dim: 1 }, 1.0, 0.0, 1e-3, 5000, 1).unwrap();
        let kde = kde_density(&ens, &BandwidthRule::Scott).unwrap();
        let grid = Grid::line(-10.0, 10.0, 4001).unwrap();
        let vals = kde.eval_rows(grid.nodes().view());
        assert!((grid.integrate(&vals) - 1.0).abs() < 1e-3);
        let (imax, _) = vals.iter().enumerate().fold((0, 0.0), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
        assert!(grid.node(imax)[0].abs() < 0.2);
    }

    #[test]
    fn kde_of_stationary_samples() {
        let pot = PotentialSpec::quadratic(vec![1.0], vec![0.0]).unwrap();
        let gibbs = DiagGaussian::isotropic(vec![0.0], 0.5f64.sqrt()).unwrap();
        let ens = euler_maruyama_simulate(&gibbs, &pot, 1.0, 0.0, 1e-3, 100_000, 2).unwrap();
        let kde = kde_density(&ens, &BandwidthRule::Scott).unwrap();
        let grid = Grid::line(-4.0, 4.0, 400).unwrap();
        let kl = crate::metrics::symmetric_kl_on_grid(&kde, &gibbs, grid.nodes().view()).unwrap();
        assert!(kl <= 0.01, "{kl}");
    }

    #[test]
    fn zero_spread_rejected() {
        let ens = ParticleEnsemble::uniform(Array2::zeros((10, 1))).unwrap();
        assert!(kde_density(&ens, &BandwidthRule::Scott).is_err());
    }

    #[test]
    fn resampling_preserves_mean_on_average() {
        let mut rng = rng_from_seed(12);
        let n = 200;
        let pos = Array2::from_shape_fn((n, 1), |(i, _)| (i as f64 / 20.0).sin() * 3.0);
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
        let ens = ParticleEnsemble::weighted(pos, w).unwrap();
        let target = ens.mean()[0];
        let means: Vec<f64> = (0..200).map(|_| resample(&ens, &mut rng).mean()[0]).collect();
        let mm = means.iter().sum::<f64>() / 200.0;
        let sd = (means.iter().map(|m| (m - mm).powi(2)).sum::<f64>() / 199.0).sqrt();
        assert!((mm - target).abs() <= 3.0 * sd / 200f64.sqrt() + 1e-12, "{mm} vs {target}");
    }

    #[test]
    fn systematic_indices() {
        assert_eq!(systematic_resample(&[0.5, 0.0, 0.5], 0.6), vec![0, 2, 2]);
        assert_eq!(systematic_resample(&[1.0, 0.0], 0.99), vec![0, 0]);
    }

    #[test]
    fn far_observation_favours_nearest() {
        let pos = Array2::from_shape_vec((4, 1), vec![-1.0, 0.0, 1.0, 2.0]).unwrap();
        let ens = ParticleEnsemble::uniform(pos).unwrap();
        let w = observation_reweight(&ens, &[30.0], 1.0).unwrap();
        assert!(w.weights[3] > 0.999_999);
    }

    #[test]
    fn no_observation_step_equals_simulation() {
        let start = DiagGaussian::isotropic(vec![0.0], 0.3).unwrap();
        let pot = PotentialSpec::SineWell;
        let direct = euler_maruyama_simulate(&start, &pot, 1.0, 0.7, 1e-3, 64, 9).unwrap();
        let init = euler_maruyama_simulate(&start, &pot, 1.0, 0.0, 1e-3, 64, 9).unwrap();
        let later = propagate(&init, &pot, 1.0, 0.7, 1e-3, 9).unwrap();
        assert_eq!(later, direct);
        assert!((later.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
