//! Continuous-discrete filtering: a latent diffusion observed with Gaussian
//! noise at discrete times, filtered by alternating a predict step (any of
//! the propagation methods) with a Bayes update.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baselines::chang_cooper::{chang_cooper_evolve, GridSolverConfig};
use crate::baselines::gaussian::{
    ekf_predict, gaussian_sum_predict, gaussian_sum_update, kalman_update, ukf_predict,
    FilterFlags, GaussianState, GaussianSum, UkfParams,
};
use crate::baselines::particles::{
    bootstrap_pf_step, euler_maruyama_simulate, kde_density, BandwidthRule, ParticleEnsemble,
};
use crate::error::{Error, Result};
use crate::flow::{evolve_with, EvolveOptions};
use crate::free_energy::{FreeEnergy, PotentialSpec};
use crate::model::{
    derive_seed, rng_stream, BasisMode, CenterPlacement, Density, DiagGaussian, Domain,
    FlowConfig, Grid, GridDensity, SharedDensity,
};
use crate::optimizer::SolveStatus;
use crate::regularizer::RegularizerKind;
use crate::rkhs::KernelSpec;

const TRUTH_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;
const INIT_STREAM: u64 = u64::MAX - 1;

/// Observations `y_k = x(t_k) + v_k`, `v_k ~ N(0, σ² I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSequence {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub obs_noise_sd: f64,
}

impl ObservationSequence {
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>, obs_noise_sd: f64) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::InvalidArgument("one value per observation time".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("observation times must increase".into()));
        }
        if !(obs_noise_sd >= 0.0) {
            return Err(Error::InvalidArgument("observation noise sd must be >= 0".into()));
        }
        Ok(Self {
            times,
            values,
            obs_noise_sd,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Latent states at time 0 and at every observation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

/// Euler–Maruyama truth from `x0` with observations every `delta_t`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_truth_and_observations(
    potential: &PotentialSpec,
    beta: f64,
    x0: &[f64],
    n_obs: usize,
    delta_t: f64,
    obs_noise_sd: f64,
    dt: f64,
    seed: u64,
) -> Result<(Trajectory, ObservationSequence)> {
    if !(delta_t > 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidArgument("need delta_t > 0 and dt > 0".into()));
    }
    if x0.len() != potential.dim() {
        return Err(Error::DimensionMismatch {
            expected: potential.dim(),
            got: x0.len(),
        });
    }
    let d = x0.len();
    let steps = (delta_t / dt).round().max(1.0) as usize;
    let h = delta_t / steps as f64;
    let noise = (2.0 * h / beta).sqrt();
    let mut path_rng = rng_stream(seed, TRUTH_STREAM);
    let mut obs_rng = rng_stream(seed, NOISE_STREAM);
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; d];
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![x.clone()],
    };
    let mut times = Vec::with_capacity(n_obs);
    let mut values = Vec::with_capacity(n_obs);
    for k in 1..=n_obs {
        for _ in 0..steps {
            potential.gradient(&x, &mut grad);
            for (xi, gi) in x.iter_mut().zip(&grad) {
                let z: f64 = path_rng.sample(StandardNormal);
                *xi += -gi * h + noise * z;
            }
        }
        let t = k as f64 * delta_t;
        traj.times.push(t);
        traj.states.push(x.clone());
        let y: Vec<f64> = x
            .iter()
            .map(|xi| {
                let z: f64 = obs_rng.sample(StandardNormal);
                xi + obs_noise_sd * z
            })
            .collect();
        times.push(t);
        values.push(y);
    }
    Ok((traj, ObservationSequence::new(times, values, obs_noise_sd)?))
}

fn log_likelihood(x: &[f64], observation: &[f64], sd: f64) -> f64 {
    if sd.is_infinite() {
        return 0.0;
    }
    -0.5 * x
        .iter()
        .zip(observation)
        .map(|(a, b)| ((a - b) / sd).powi(2))
        .sum::<f64>()
}

/// `prior · N(y; x, σ²)` sampled on `grid` and normalized by quadrature.
/// An infinite `obs_noise_sd` leaves the prior unchanged up to normalization.
pub fn bayes_update(prior: &dyn Density, observation: &[f64], obs_noise_sd: f64, grid: &Grid) -> Result<GridDensity> {
    if observation.len() != grid.dim() || prior.dim() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            got: observation.len(),
        });
    }
    if !(obs_noise_sd > 0.0) {
        return Err(Error::InvalidArgument("bayes_update needs obs_noise_sd > 0".into()));
    }
    let nodes = grid.nodes();
    let prior_vals = prior.eval_rows(nodes.view());
    let log_lik: Vec<f64> = nodes
        .rows()
        .into_iter()
        .map(|r| log_likelihood(&r.to_vec(), observation, obs_noise_sd))
        .collect();
    // Shift by the largest log-likelihood where the prior is positive.
    let shift = log_lik
        .iter()
        .zip(&prior_vals)
        .filter(|(_, &p)| p > 0.0)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(Error::DegenerateDensity { mass: 0.0 });
    }
    let vals: Vec<f64> = prior_vals
        .iter()
        .zip(&log_lik)
        .map(|(p, l)| p * (l - shift).exp())
        .collect();
    let mass = grid.integrate(&vals);
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::DegenerateDensity { mass });
    }
    GridDensity::new(grid.clone(), vals.into_iter().map(|v| v / mass).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMethod {
    Wgf,
    ExactGrid,
    Ekf,
    Ukf,
    Gsf,
    BootstrapPf,
}

impl FilterMethod {
    pub const ALL: [FilterMethod; 6] = [
        FilterMethod::Wgf,
        FilterMethod::ExactGrid,
        FilterMethod::Ekf,
        FilterMethod::Ukf,
        FilterMethod::Gsf,
        FilterMethod::BootstrapPf,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FilterMethod::Wgf => "wgf",
            FilterMethod::ExactGrid => "exact-grid",
            FilterMethod::Ekf => "ekf",
            FilterMethod::Ukf => "ukf",
            FilterMethod::Gsf => "gsf",
            FilterMethod::BootstrapPf => "bootstrap-pf",
        }
    }
}

impl fmt::Display for FilterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown filter method {s:?}")))
    }
}

/// The latent diffusion and its observation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterModel {
    pub potential: PotentialSpec,
    pub beta: f64,
    pub obs_noise_sd: f64,
    /// Initial density of the grid, wgf and particle methods.
    pub initial: DiagGaussian,
}

impl FilterModel {
    /// `w(x) = sin(2πx)/π + x²/4`, `β = 1`, `σ = 1`, start `N(0, 0.01²)`.
    pub fn sine() -> Self {
        Self {
            potential: PotentialSpec::SineWell,
            beta: 1.0,
            obs_noise_sd: 1.0,
            initial: DiagGaussian::isotropic(vec![0.0], 1e-2).expect("valid"),
        }
    }
}

/// Initial state of the EKF and UKF: mean drawn from `N(0, mean_sd²)`,
/// covariance `var · I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianInit {
    pub mean_sd: f64,
    pub var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsfSettings {
    pub components: usize,
    /// Component means are drawn from `N(0, mean_sd²)`.
    pub mean_sd: f64,
    pub var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfSettings {
    pub particles: usize,
    pub dt_sim: f64,
    /// Fixed KDE bandwidth; Scott's rule when absent.
    #[serde(default)]
    pub bandwidth: Option<f64>,
}

/// Per-method settings of a filtering run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSettings {
    /// Grid of the exact solver; wgf posteriors live on its nodes too.
    pub grid: GridSolverConfig,
    pub wgf: FlowConfig,
    /// Sampling box of the wgf steps; the grid interval when absent.
    #[serde(default)]
    pub wgf_domain: Option<Domain>,
    pub gaussian_init: GaussianInit,
    pub ukf: UkfParams,
    pub gsf: GsfSettings,
    pub pf: PfSettings,
}

impl FilterSettings {
    /// Settings of the sine-potential benchmark.
    pub fn sine_defaults() -> Self {
        let mut wgf = FlowConfig::new(1e-6, 0.25, 10_000, KernelSpec::gaussian(0.1), RegularizerKind::L2);
        wgf.m_substeps = 4;
        wgf.basis = BasisMode::Fixed {
            count: 161,
            placement: CenterPlacement::Lattice,
        };
        wgf.gamma_continuation = vec![1e-2, 1e-3, 1e-4, 1e-5];
        wgf.continuation_iters = 60;
        wgf.max_iter = 120;
        Self {
            grid: GridSolverConfig {
                n_nodes: 1000,
                interval: (-4.0, 4.0),
                dt: 1e-3,
            },
            wgf,
            wgf_domain: None,
            gaussian_init: GaussianInit {
                mean_sd: 0.1,
                var: 1e-4,
            },
            ukf: UkfParams::default(),
            gsf: GsfSettings {
                components: 8,
                mean_sd: 1.0,
                var: 1e-4,
            },
            pf: PfSettings {
                particles: 1000,
                dt_sim: 1e-3,
                bandwidth: None,
            },
        }
    }

    pub fn wgf_domain(&self) -> Result<Domain> {
        match &self.wgf_domain {
            Some(d) => Ok(d.clone()),
            None => Domain::interval(self.grid.interval.0, self.grid.interval.1),
        }
    }
}

/// Outcome of the optimizer over one wgf predict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowSolveSummary {
    pub substeps: usize,
    pub total_iterations: usize,
    pub max_grad_norm: f64,
    pub all_converged: bool,
    pub any_stalled: bool,
}

/// What happened at one observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    /// The predictive density was evolved from `predicted_from` to
    /// `predicted_to`; the update used the observation at `observed_at`.
    pub predicted_from: f64,
    pub predicted_to: f64,
    pub observed_at: f64,
    pub posterior_mean: Vec<f64>,
    /// Monte Carlo standard error of `posterior_mean` (particle filter).
    pub mean_std_error: Option<Vec<f64>>,
    pub flags: FilterFlags,
    pub solve: Option<FlowSolveSummary>,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFailure {
    pub index: usize,
    pub message: String,
}

/// One filtering pass: a posterior per processed observation.
#[derive(Debug, Clone)]
pub struct FilterRun {
    pub method: FilterMethod,
    pub posteriors: Vec<SharedDensity>,
    pub steps: Vec<StepRecord>,
    /// Set when a step failed; later observations were not processed.
    pub failure: Option<StepFailure>,
}

impl FilterRun {
    pub fn method_name(&self) -> &'static str {
        self.method.name()
    }

    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }
}

fn grid_mean(rho: &GridDensity) -> Vec<f64> {
    let grid = rho.grid();
    let nodes = grid.nodes();
    let w = grid.weights();
    let vals = rho.values();
    let mass: f64 = vals.iter().zip(&w).map(|(v, w)| v * w).sum();
    (0..grid.dim())
        .map(|k| {
            nodes
                .column(k)
                .iter()
                .zip(vals)
                .zip(&w)
                .map(|((x, v), w)| x * v * w)
                .sum::<f64>()
                / mass
        })
        .collect()
}

fn weighted_mean_and_se(ens: &ParticleEnsemble) -> (Vec<f64>, Vec<f64>) {
    let mean = ens.mean();
    let se = (0..ens.dim())
        .map(|k| {
            ens.positions
                .column(k)
                .iter()
                .zip(&ens.weights)
                .map(|(x, w)| (w * (x - mean[k])).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    (mean, se)
}

/// Per-method state carried between observations.
enum State {
    Density(SharedDensity),
    Gaussian(GaussianState),
    Mixture(GaussianSum),
    Particles(ParticleEnsemble),
}

struct Outcome {
    state: State,
    posterior: SharedDensity,
    mean: Vec<f64>,
    se: Option<Vec<f64>>,
    flags: FilterFlags,
    solve: Option<FlowSolveSummary>,
}

fn initial_state(method: FilterMethod, model: &FilterModel, settings: &FilterSettings, seed: u64) -> Result<State> {
    let d = model.potential.dim();
    let mut rng = rng_stream(seed, INIT_STREAM);
    Ok(match method {
        FilterMethod::Wgf | FilterMethod::ExactGrid => State::Density(Arc::new(model.initial.clone())),
        FilterMethod::Ekf | FilterMethod::Ukf => {
            let g = settings.gaussian_init;
            let mean: Vec<f64> = (0..d)
                .map(|_| g.mean_sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            State::Gaussian(GaussianState::isotropic(mean, g.var)?)
        }
        FilterMethod::Gsf => {
            let g = &settings.gsf;
            if g.components == 0 {
                return Err(Error::InvalidArgument("GSF needs at least one component".into()));
            }
            let comps = (0..g.components)
                .map(|_| {
                    let mean: Vec<f64> = (0..d)
                        .map(|_| g.mean_sd * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    GaussianState::isotropic(mean, g.var)
                })
                .collect::<Result<Vec<_>>>()?;
            let k = comps.len();
            State::Mixture(GaussianSum::new(vec![1.0 / k as f64; k], comps)?)
        }
        FilterMethod::BootstrapPf => State::Particles(euler_maruyama_simulate(
            &model.initial,
            &model.potential,
            model.beta,
            0.0,
            settings.pf.dt_sim,
            settings.pf.particles,
            derive_seed(seed, INIT_STREAM),
        )?),
    })
}

struct Context<'a> {
    model: &'a FilterModel,
    settings: &'a FilterSettings,
    grid: Grid,
    free_energy: FreeEnergy,
    domain: Domain,
    warm: Option<Vec<f64>>,
}

fn advance(ctx: &mut Context<'_>, method: FilterMethod, state: State, delta_t: f64, y: &[f64], seed: u64) -> Result<Outcome> {
    let model = ctx.model;
    let sd = model.obs_noise_sd;
    let mut flags = FilterFlags::default();
    match (method, state) {
        (FilterMethod::ExactGrid, State::Density(prior)) => {
            let pred = chang_cooper_evolve(prior.as_ref(), &model.potential, model.beta, delta_t, &ctx.settings.grid)?;
            let post = bayes_update(&pred, y, sd, &ctx.grid)?;
            let mean = grid_mean(&post);
            let post: SharedDensity = Arc::new(post);
            Ok(Outcome {
                state: State::Density(post.clone()),
                posterior: post,
                mean,
                se: None,
                flags,
                solve: None,
            })
        }
        (FilterMethod::Wgf, State::Density(prior)) => {
            let opts = EvolveOptions {
                proposals: None,
                initial_coefficients: ctx.warm.take(),
            };
            let steps = evolve_with(prior, &ctx.domain, &ctx.free_energy, delta_t, &ctx.settings.wgf, seed, &opts)?;
            let last = steps.last().expect("at least one substep");
            let mut warm = last.g_star.coefficients.to_vec();
            warm.extend(last.h_star.coefficients.iter());
            ctx.warm = Some(warm);
            let solve = FlowSolveSummary {
                substeps: steps.len(),
                total_iterations: steps
                    .iter()
                    .map(|s| s.solve_report.iterations + s.diagnostics.stage_iterations.iter().sum::<usize>())
                    .sum(),
                max_grad_norm: steps
                    .iter()
                    .map(|s| s.solve_report.grad_norm)
                    .fold(0.0, f64::max),
                all_converged: steps.iter().all(|s| s.solve_report.converged),
                any_stalled: steps
                    .iter()
                    .any(|s| s.solve_report.status == SolveStatus::Stalled),
            };
            let post = bayes_update(last.output_density.as_ref(), y, sd, &ctx.grid)?;
            let mean = grid_mean(&post);
            let post: SharedDensity = Arc::new(post);
            Ok(Outcome {
                state: State::Density(post.clone()),
                posterior: post,
                mean,
                se: None,
                flags,
                solve: Some(solve),
            })
        }
        (FilterMethod::Ekf | FilterMethod::Ukf, State::Gaussian(prior)) => {
            let (pred, f) = if method == FilterMethod::Ekf {
                ekf_predict(&prior, &model.potential, model.beta, delta_t)?
            } else {
                ukf_predict(&prior, &model.potential, model.beta, delta_t, &ctx.settings.ukf)?
            };
            let (post, _) = kalman_update(&pred, y, sd)?;
            let mean = post.mean.iter().copied().collect();
            Ok(Outcome {
                posterior: Arc::new(post.clone()),
                state: State::Gaussian(post),
                mean,
                se: None,
                flags: f,
                solve: None,
            })
        }
        (FilterMethod::Gsf, State::Mixture(prior)) => {
            let (pred, f) = gaussian_sum_predict(&prior, &model.potential, model.beta, delta_t)?;
            let (post, reset) = gaussian_sum_update(&pred, y, sd)?;
            flags.covariance_repaired = f.covariance_repaired;
            flags.weights_reset = reset;
            Ok(Outcome {
                mean: post.mean(),
                posterior: Arc::new(post.clone()),
                state: State::Mixture(post),
                se: None,
                flags,
                solve: None,
            })
        }
        (FilterMethod::BootstrapPf, State::Particles(ens)) => {
            let pf = &ctx.settings.pf;
            let step = bootstrap_pf_step(&ens, &model.potential, model.beta, delta_t, pf.dt_sim, y, sd, seed)?;
            let rule = match pf.bandwidth {
                Some(h) => BandwidthRule::Fixed(vec![h; ens.dim()]),
                None => BandwidthRule::Scott,
            };
            let kde = kde_density(&step.weighted, &rule)?;
            let (mean, se) = weighted_mean_and_se(&step.weighted);
            Ok(Outcome {
                state: State::Particles(step.resampled),
                posterior: Arc::new(kde),
                mean,
                se: Some(se),
                flags,
                solve: None,
            })
        }
        _ => unreachable!("state always matches its method"),
    }
}

/// Filter `obs` with `method`, starting at time 0. A failing step ends the
/// run; the posteriors computed so far are kept.
pub fn run_filter(
    method: FilterMethod,
    obs: &ObservationSequence,
    model: &FilterModel,
    settings: &FilterSettings,
    seed: u64,
) -> Result<FilterRun> {
    settings.grid.validate()?;
    if obs.values.iter().any(|v| v.len() != model.potential.dim()) {
        return Err(Error::DimensionMismatch {
            expected: model.potential.dim(),
            got: obs.values.first().map_or(0, |v| v.len()),
        });
    }
    if obs.times.first().is_some_and(|&t| !(t > 0.0)) {
        return Err(Error::InvalidArgument("observations must come after time 0".into()));
    }
    let grid_methods = matches!(method, FilterMethod::Wgf | FilterMethod::ExactGrid);
    if grid_methods && model.potential.dim() != 1 {
        return Err(Error::InvalidArgument(format!("{method} filtering is 1-D only")));
    }
    let mut ctx = Context {
        model,
        settings,
        grid: settings.grid.grid()?,
        free_energy: FreeEnergy::new(model.potential.clone(), model.beta)?,
        domain: settings.wgf_domain()?,
        warm: None,
    };
    let mut run = FilterRun {
        method,
        posteriors: Vec::with_capacity(obs.len()),
        steps: Vec::with_capacity(obs.len()),
        failure: None,
    };
    let mut state = initial_state(method, model, settings, seed)?;
    let mut t_prev = 0.0;
    for (k, (&t, y)) in obs.times.iter().zip(&obs.values).enumerate() {
        let start = Instant::now();
        match advance(&mut ctx, method, state, t - t_prev, y, derive_seed(seed, k as u64)) {
            Ok(out) => {
                run.steps.push(StepRecord {
                    index: k,
                    predicted_from: t_prev,
                    predicted_to: t,
                    observed_at: t,
                    posterior_mean: out.mean,
                    mean_std_error: out.se,
                    flags: out.flags,
                    solve: out.solve,
                    wall_time: start.elapsed().as_secs_f64(),
                });
                run.posteriors.push(out.posterior);
                state = out.state;
            }
            Err(e) => {
                run.failure = Some(StepFailure {
                    index: k,
                    message: e.to_string(),
                });
                break;
            }
        }
        t_prev = t;
    }
    Ok(run)
}

/// Fitted symmetric KL of each posterior of `run` against the matching
/// posterior of `reference`, on `nodes`.
pub fn per_step_kl(run: &FilterRun, reference: &FilterRun, nodes: &Array2<f64>) -> Result<Vec<f64>> {
    run.posteriors
        .iter()
        .zip(&reference.posteriors)
        .map(|(p, r)| Ok(crate::metrics::fit_scale_then_kl(p.as_ref(), r.as_ref(), nodes.view())?.symmetric_kl))
        .collect()
}

/// Strict interior local maxima of a 1-D grid density, ignoring bumps
/// below `rel_floor` times the peak.
pub fn local_maxima(values: &[f64], rel_floor: f64) -> usize {
    let peak = values.iter().cloned().fold(0.0, f64::max);
    let floor = rel_floor * peak;
    values
        .windows(3)
        .filter(|w| w[1] > w[0] && w[1] >= w[2] && w[1] > floor)
        .count()
}
