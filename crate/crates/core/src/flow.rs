//! One regularized proximal step of the gradient flow, and `m` of them.
//!
//! A step with time step `tau` solves the dual of
//! `W_gamma(mu, nu) + 2 tau f(mu)` and recovers
//! `mu(x) ∝ exp(beta(-g(x) / (2 tau) - w(x)))`.

use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dual::{Basis, DualDiagnostics, DualObjectiveInstance, RkhsDensity};
use crate::error::{Error, Result};
use crate::free_energy::FreeEnergy;
use crate::model::{
    derive_seed, pairwise_sum, rng_from_seed, sample_pairs, sample_pairs_from, BasisMode,
    CenterPlacement, DiagGaussian, Domain, FlowConfig, Grid, ProposalSpec, SamplePairSet,
    Sampler, SharedDensity, SolverKind, UniformDensity,
};
use crate::optimizer::{maximize, maximize_newton, LbfgsConfig, NewtonConfig, SolveReport};
use crate::regularizer::Regularizer;
use crate::rkhs::DualPotential;

/// Stream indices for seeds derived from a step seed.
const SAMPLE_STREAM: u64 = 0;
const CENTER_STREAM: u64 = 1;
const QUADRATURE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub dual: DualDiagnostics,
    pub g_norm: f64,
    pub h_norm: f64,
    pub wall_time: f64,
    pub seed: u64,
    /// Iterations spent in each continuation stage.
    pub stage_iterations: Vec<usize>,
}

/// Everything produced by one proximal step.
#[derive(Debug, Clone)]
pub struct FlowStep {
    pub input_density: SharedDensity,
    pub samples: SamplePairSet,
    pub g_star: DualPotential,
    pub h_star: DualPotential,
    /// Recovered density, already multiplied by `1 / normalization` when
    /// normalization is enabled.
    pub output_density: Arc<RkhsDensity>,
    /// Quadrature mass of the unnormalized recovered density.
    pub normalization: f64,
    pub solve_report: SolveReport,
    pub diagnostics: StepDiagnostics,
}

/// Per-step hooks for [`evolve_with`].
#[derive(Default)]
pub struct EvolveOptions<'a> {
    /// Gaussian `(x, y)` proposals for substep `k`, overriding
    /// `config.proposal`. Receives the substep index and its input density.
    #[allow(clippy::type_complexity)]
    pub proposals: Option<&'a (dyn Fn(usize, &SharedDensity) -> Result<(DiagGaussian, DiagGaussian)> + Sync)>,
    /// Coefficients to start the first substep from.
    pub initial_coefficients: Option<Vec<f64>>,
}

/// Kernel centres for a fixed basis.
pub fn place_centers(domain: &Domain, count: usize, placement: CenterPlacement, samples: Option<&Array2<f64>>, seed: u64) -> Result<Array2<f64>> {
    let d = domain.dim();
    match placement {
        CenterPlacement::Random => {
            let mut rng = rng_from_seed(seed);
            let uni = UniformDensity::new(domain.clone());
            let mut out = Array2::zeros((count, d));
            for i in 0..count {
                let x = uni.sample(&mut rng);
                for k in 0..d {
                    out[[i, k]] = x[k];
                }
            }
            Ok(out)
        }
        CenterPlacement::Lattice => {
            let per_axis = (count as f64).powf(1.0 / d as f64).round().max(1.0) as usize;
            if per_axis == 1 {
                let c = domain.center();
                return Ok(Array2::from_shape_vec((1, d), c).expect("shape"));
            }
            Ok(Grid::over(domain, per_axis)?.nodes())
        }
        CenterPlacement::Samples => {
            let xs = samples.ok_or_else(|| {
                Error::InvalidArgument("sample placement needs the step's samples".into())
            })?;
            if count > xs.nrows() {
                return Err(Error::InvalidArgument(format!(
                    "asked for {count} centres from {} samples",
                    xs.nrows()
                )));
            }
            let mut idx: Vec<usize> = (0..xs.nrows()).collect();
            let mut rng = rng_from_seed(seed);
            for i in 0..count {
                let j = rng.random_range(i..idx.len());
                idx.swap(i, j);
            }
            Ok(xs.select(ndarray::Axis(0), &idx[..count]))
        }
    }
}

fn draw_samples(
    domain: &Domain,
    config: &FlowConfig,
    proposals: Option<(DiagGaussian, DiagGaussian)>,
    seed: u64,
) -> Result<(SamplePairSet, Option<DiagGaussian>)> {
    let proposals = proposals.or(match &config.proposal {
        ProposalSpec::Uniform => None,
        ProposalSpec::Gaussian { x, y } => Some((x.clone(), y.clone())),
    });
    match proposals {
        None => Ok((sample_pairs(domain, config.n_samples, seed)?, None)),
        Some((x, y)) => {
            if x.var.iter().chain(&y.var).any(|&v| v <= 0.0) {
                return Err(Error::InvalidArgument(
                    "Gaussian proposals need positive variances".into(),
                ));
            }
            let mu0: Arc<dyn Sampler> = Arc::new(x.clone());
            let nu0: Arc<dyn Sampler> = Arc::new(y);
            Ok((sample_pairs_from(mu0, nu0, config.n_samples, seed)?, Some(x)))
        }
    }
}

/// Mass of `rho` over the domain: tensor trapezoid for `d <= 2`, Monte
/// Carlo otherwise (importance-sampled from `proposal` when given).
pub fn quadrature_mass(
    rho: &dyn crate::model::Density,
    domain: &Domain,
    config: &FlowConfig,
    proposal: Option<&DiagGaussian>,
    seed: u64,
) -> Result<f64> {
    let d = domain.dim();
    if d <= 2 {
        let n = config.quadrature_nodes.unwrap_or(if d == 1 { 256 } else { 64 });
        let grid = Grid::over(domain, n)?;
        let vals = rho.eval_rows(grid.nodes().view());
        return Ok(grid.integrate(&vals));
    }
    let n = config.mc_quadrature_points.max(1);
    let mut rng = rng_from_seed(seed);
    let mut pts = Array2::zeros((n, d));
    let mut inv_q = vec![0.0; n];
    match proposal {
        Some(q) => {
            // Widen the proposal so its tails dominate the target's.
            let wide = DiagGaussian::new(q.mean.clone(), q.var.iter().map(|v| 2.0 * v).collect())?;
            for i in 0..n {
                let x = wide.sample(&mut rng);
                inv_q[i] = (-wide.ln_eval(&x)).exp();
                for k in 0..d {
                    pts[[i, k]] = x[k];
                }
            }
        }
        None => {
            let uni = UniformDensity::new(domain.clone());
            for i in 0..n {
                let x = uni.sample(&mut rng);
                inv_q[i] = domain.volume();
                for k in 0..d {
                    pts[[i, k]] = x[k];
                }
            }
        }
    }
    let vals = rho.eval_rows(pts.view());
    let terms: Vec<f64> = vals.iter().zip(&inv_q).map(|(v, w)| v * w).collect();
    Ok(pairwise_sum(&terms) / n as f64)
}

/// One proximal step from `nu` with the step's own sample and centre draws.
pub fn gradient_step(
    nu: SharedDensity,
    domain: &Domain,
    free_energy: &FreeEnergy,
    config: &FlowConfig,
    seed: u64,
) -> Result<FlowStep> {
    step_inner(nu, domain, free_energy, config, seed, None, None, None)
}

#[allow(clippy::too_many_arguments)]
fn solve_dual(
    instance: &DualObjectiveInstance,
    x0: Vec<f64>,
    config: &FlowConfig,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveReport)> {
    let objective = |z: &[f64]| instance.value_and_gradient_joint(z);
    match config.solver {
        SolverKind::Lbfgs => maximize(
            objective,
            x0,
            &LbfgsConfig {
                tol: config.optimizer_tol,
                max_iter,
                memory: config.lbfgs_memory,
            },
        ),
        SolverKind::Newton => maximize_newton(
            objective,
            |z: &[f64]| instance.hessian_joint(z),
            x0,
            &NewtonConfig {
                tol: config.optimizer_tol,
                max_iter,
            },
        ),
    }
}

fn step_inner(
    nu: SharedDensity,
    domain: &Domain,
    free_energy: &FreeEnergy,
    config: &FlowConfig,
    seed: u64,
    fixed_centers: Option<&Array2<f64>>,
    proposals: Option<(DiagGaussian, DiagGaussian)>,
    warm: Option<&[f64]>,
) -> Result<FlowStep> {
    config.validate()?;
    let start = Instant::now();
    if nu.dim() != domain.dim() || free_energy.dim() != domain.dim() {
        return Err(Error::DimensionMismatch {
            expected: domain.dim(),
            got: nu.dim(),
        });
    }
    let (samples, x_proposal) =
        draw_samples(domain, config, proposals, derive_seed(seed, SAMPLE_STREAM))?;
    let (g_support, h_support) = match (&config.basis, fixed_centers) {
        (BasisMode::Representer, _) => (samples.xs.clone(), samples.ys.clone()),
        (BasisMode::Fixed { .. }, Some(c)) => (c.clone(), c.clone()),
        (BasisMode::Fixed { count, placement }, None) => {
            let c = place_centers(
                domain,
                *count,
                *placement,
                Some(&samples.xs),
                derive_seed(seed, CENTER_STREAM),
            )?;
            (c.clone(), c)
        }
    };
    let g_basis = Basis {
        kernel: config.kernel,
        support: g_support,
    };
    let h_basis = Basis {
        kernel: config.kernel,
        support: h_support,
    };
    let mut instance = DualObjectiveInstance::new(
        &samples,
        nu.as_ref(),
        free_energy.clone(),
        Regularizer::from_kind(config.regularizer),
        config.gamma,
        2.0 * config.tau,
        g_basis.clone(),
        h_basis.clone(),
        config.gram_cap_bytes,
    )?;
    let p = instance.g_len() + instance.h_len();
    let mut x = match warm {
        Some(w) if w.len() == p => w.to_vec(),
        _ => vec![0.0; p],
    };
    // Continuation stages at larger gamma, each warm-starting the next.
    let mut stage_iterations = Vec::with_capacity(config.gamma_continuation.len());
    for &gamma in &config.gamma_continuation {
        instance.set_gamma(gamma)?;
        let (z, report) = solve_dual(&instance, x, config, config.continuation_iters)?;
        if report.failed() {
            return Err(Error::Optimizer(format!(
                "continuation stage at gamma {gamma:e} failed after {} iterations",
                report.iterations
            )));
        }
        stage_iterations.push(report.iterations);
        x = z;
    }
    instance.set_gamma(config.gamma)?;
    let (z, report) = solve_dual(&instance, x, config, config.max_iter)?;
    let (ag, ah) = z.split_at(instance.g_len());
    let dual_diag = instance.objective_and_gradient(ag, ah)?.diagnostics;
    let g_star = g_basis.potential(ag)?;
    let h_star = h_basis.potential(ah)?;
    let raw = instance.recover_density(g_star.clone())?;
    let mass = quadrature_mass(
        &raw,
        domain,
        config,
        x_proposal.as_ref(),
        derive_seed(seed, QUADRATURE_STREAM),
    )?;
    if !(mass >= 1e-12) || !mass.is_finite() {
        return Err(Error::DegenerateDensity { mass });
    }
    let output = if config.normalize {
        raw.with_scale(1.0 / mass)
    } else {
        raw
    };
    Ok(FlowStep {
        input_density: nu,
        samples,
        diagnostics: StepDiagnostics {
            dual: dual_diag,
            g_norm: g_star.rkhs_norm(),
            h_norm: h_star.rkhs_norm(),
            wall_time: start.elapsed().as_secs_f64(),
            seed,
            stage_iterations,
        },
        g_star,
        h_star,
        output_density: Arc::new(output),
        normalization: mass,
        solve_report: report,
    })
}

/// `config.m_substeps` proximal steps with time step `delta_t / m`.
pub fn evolve(
    rho0: SharedDensity,
    domain: &Domain,
    free_energy: &FreeEnergy,
    delta_t: f64,
    config: &FlowConfig,
    seed: u64,
) -> Result<Vec<FlowStep>> {
    evolve_with(rho0, domain, free_energy, delta_t, config, seed, &EvolveOptions::default())
}

pub fn evolve_with(
    rho0: SharedDensity,
    domain: &Domain,
    free_energy: &FreeEnergy,
    delta_t: f64,
    config: &FlowConfig,
    seed: u64,
    options: &EvolveOptions<'_>,
) -> Result<Vec<FlowStep>> {
    if !(delta_t > 0.0 && delta_t.is_finite()) {
        return Err(Error::InvalidArgument(format!("delta_t must be > 0, got {delta_t}")));
    }
    config.validate()?;
    let m = config.m_substeps;
    let step_config = FlowConfig {
        tau: delta_t / m as f64,
        ..config.clone()
    };
    // Random and lattice centres are shared by all substeps so that warm
    // starts carry over.
    let centers = match &config.basis {
        BasisMode::Fixed { count, placement } if *placement != CenterPlacement::Samples => Some(
            place_centers(domain, *count, *placement, None, derive_seed(seed, u64::MAX))?,
        ),
        _ => None,
    };
    let mut steps: Vec<FlowStep> = Vec::with_capacity(m);
    let mut nu = rho0;
    let mut warm: Option<Vec<f64>> = options.initial_coefficients.clone();
    for k in 0..m {
        let proposals = match options.proposals {
            Some(f) => Some(f(k, &nu).map_err(|e| Error::Step {
                step: k,
                source: Box::new(e),
            })?),
            None => None,
        };
        let use_warm = config.warm_start && centers.is_some();
        let step = step_inner(
            nu.clone(),
            domain,
            free_energy,
            &step_config,
            derive_seed(seed, k as u64),
            centers.as_ref(),
            proposals,
            if use_warm { warm.as_deref() } else { None },
        )
        .map_err(|e| Error::Step {
            step: k,
            source: Box::new(e),
        })?;
        let mut coeffs = step.g_star.coefficients.to_vec();
        coeffs.extend(step.h_star.coefficients.iter());
        warm = Some(coeffs);
        nu = step.output_density.clone();
        steps.push(step);
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::free_energy::PotentialSpec;
    use crate::model::Density;
    use crate::regularizer::RegularizerKind;
    use crate::rkhs::KernelSpec;

    fn ou() -> FreeEnergy {
        FreeEnergy::new(PotentialSpec::quadratic(vec![1.0], vec![0.0]).unwrap(), 1.0).unwrap()
    }

    fn small_config() -> FlowConfig {
        let mut c = FlowConfig::new(
            1e-2,
            0.05,
            2000,
            KernelSpec::gaussian(0.3),
            RegularizerKind::Entropy,
        );
        c.basis = BasisMode::Fixed {
            count: 25,
            placement: CenterPlacement::Lattice,
        };
        c.optimizer_tol = 1e-7;
        c
    }

    #[test]
    fn step_output_is_normalized_and_positive() {
        let domain = Domain::interval(-3.0, 3.0).unwrap();
        let nu: SharedDensity = Arc::new(DiagGaussian::isotropic(vec![0.5], 0.5).unwrap());
        let step = gradient_step(nu, &domain, &ou(), &small_config(), 3).unwrap();
        let grid = Grid::over(&domain, 512).unwrap();
        let vals = step.output_density.eval_rows(grid.nodes().view());
        assert!(vals.iter().all(|&v| v > 0.0));
        assert!((grid.integrate(&vals) - 1.0).abs() < 1e-3);
        assert!(step.normalization > 0.0);
    }

    #[test]
    fn step_is_deterministic() {
        let domain = Domain::interval(-3.0, 3.0).unwrap();
        let nu: SharedDensity = Arc::new(DiagGaussian::isotropic(vec![0.5], 0.5).unwrap());
        let a = gradient_step(nu.clone(), &domain, &ou(), &small_config(), 11).unwrap();
        let b = gradient_step(nu, &domain, &ou(), &small_config(), 11).unwrap();
        assert_eq!(a.g_star.coefficients, b.g_star.coefficients);
        assert_eq!(a.h_star.coefficients, b.h_star.coefficients);
        assert_eq!(a.normalization, b.normalization);
        assert_eq!(a.samples.xs, b.samples.xs);
    }

    #[test]
    fn single_substep_evolve_is_gradient_step() {
        let domain = Domain::interval(-3.0, 3.0).unwrap();
        let nu: SharedDensity = Arc::new(DiagGaussian::isotropic(vec![0.0], 0.6).unwrap());
        let mut cfg = small_config();
        cfg.basis = BasisMode::Representer;
        cfg.n_samples = 300;
        let steps = evolve(nu.clone(), &domain, &ou(), cfg.tau, &cfg, 5).unwrap();
        assert_eq!(steps.len(), 1);
        let one = gradient_step(nu, &domain, &ou(), &cfg, derive_seed(5, 0)).unwrap();
        assert_eq!(steps[0].g_star.coefficients, one.g_star.coefficients);
    }

    #[test]
    fn lattice_centres_span_domain() {
        let domain = Domain::new(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap();
        let c = place_centers(&domain, 9, CenterPlacement::Lattice, None, 0).unwrap();
        assert_eq!(c.nrows(), 9);
        assert_eq!(c.row(0).to_vec(), vec![-1.0, 0.0]);
        assert_eq!(c.row(8).to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn mc_quadrature_of_gaussian() {
        let domain = Domain::cube(3, -4.0, 4.0).unwrap();
        let g = DiagGaussian::isotropic(vec![0.2, -0.1, 0.0], 0.7).unwrap();
        let mut cfg = small_config();
        cfg.mc_quadrature_points = 50_000;
        let uniform = quadrature_mass(&g, &domain, &cfg, None, 1).unwrap();
        let is = quadrature_mass(&g, &domain, &cfg, Some(&g), 1).unwrap();
        assert!((uniform - 1.0).abs() < 0.05, "{uniform}");
        assert!((is - 1.0).abs() < 0.01, "{is}");
    }
}
