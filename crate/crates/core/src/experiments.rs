//! Experiment drivers: the bimodal OU flow against a grid solver, accuracy
//! of OU predictions as dimension grows, and sine-potential filtering.
//!
//! Every driver takes defaults, applies a JSON merge patch, runs, and
//! writes CSV tables and a JSON summary into the output directory. Each
//! artifact carries the resolved configuration.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::baselines::chang_cooper::{chang_cooper_snapshots, GridSolverConfig};
use crate::baselines::gaussian::{ekf_predict, GaussianState};
use crate::baselines::particles::{euler_maruyama_simulate, kde_density, BandwidthRule};
use crate::error::{Error, Result};
use crate::filtering::{
    per_step_kl, run_filter, simulate_truth_and_observations, FilterMethod, FilterModel,
    FilterRun, FilterSettings,
};
use crate::flow::{evolve, evolve_with, EvolveOptions, FlowStep};
use crate::free_energy::{ou_propagate, FreeEnergy, PotentialSpec};
use crate::metrics::{fit_scale_then_kl, monte_carlo_symmetric_kl};
use crate::model::{
    derive_seed, rng_stream, BasisMode, CenterPlacement, Density, DiagGaussian, Domain,
    FlowConfig, GaussianMixture, Grid, SharedDensity, SolverKind, RNG_NAME,
};
use crate::regularizer::RegularizerKind;
use crate::rkhs::KernelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentName {
    Fig1OuBimodal,
    OuDimensionScaling,
    SineFiltering,
}

/// Which experiment to run, with a merge patch onto its defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: ExperimentName,
    #[serde(default)]
    pub overrides: Value,
    pub output_dir: PathBuf,
}

/// RFC 7386 merge patch: objects merge key by key, `null` deletes, any
/// other value replaces.
pub fn merge_patch(target: &mut Value, patch: &Value) {
    match patch {
        Value::Object(entries) => {
            if !target.is_object() {
                *target = Value::Object(Default::default());
            }
            let map = target.as_object_mut().expect("object");
            for (k, v) in entries {
                if v.is_null() {
                    map.remove(k);
                } else {
                    merge_patch(map.entry(k.clone()).or_insert(Value::Null), v);
                }
            }
        }
        other => *target = other.clone(),
    }
}

/// `defaults` with `overrides` merged in.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, overrides: &Value) -> Result<T> {
    let mut v = serde_json::to_value(defaults)?;
    if !overrides.is_null() {
        merge_patch(&mut v, overrides);
    }
    Ok(serde_json::from_value(v)?)
}

fn header_line<T: Serialize>(config: &T) -> Result<String> {
    Ok(format!("# rng: {RNG_NAME}; config: {}\n", serde_json::to_string(config)?))
}

/// Write a CSV table preceded by a `#` line holding the configuration.
fn write_table<T: Serialize>(path: &Path, config: &T, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(header_line(config)?.as_bytes())?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn num(x: f64) -> String {
    format!("{x:e}")
}

/// Median and the `q` and `1 - q` quantiles (linear interpolation).
pub fn quantile_summary(values: &[f64], q: f64) -> Option<(f64, f64, f64)> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let at = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    };
    Some((at(0.5), at(q), at(1.0 - q)))
}

fn substeps_for(t: f64, tau: f64) -> Result<usize> {
    let m = (t / tau).round();
    if !(m >= 1.0) || ((m * tau) - t).abs() > 1e-9 * t.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "time {t} is not a positive multiple of tau {tau}"
        )));
    }
    Ok(m as usize)
}

fn step_diagnostics(steps: &[FlowStep]) -> Value {
    Value::Array(
        steps
            .iter()
            .enumerate()
            .map(|(k, s)| {
                json!({
                    "step": k,
                    "status": format!("{:?}", s.solve_report.status),
                    "iterations": s.solve_report.iterations,
                    "stage_iterations": s.diagnostics.stage_iterations,
                    "grad_norm": s.solve_report.grad_norm,
                    "dual_value": s.solve_report.final_value,
                    "normalization": s.normalization,
                    "clamp_active_fraction": s.diagnostics.dual.clamp_active_fraction,
                    "exp_clamps": s.diagnostics.dual.exp_clamps,
                })
            })
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// Bimodal OU

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Config {
    pub seed: u64,
    pub potential: PotentialSpec,
    pub beta: f64,
    pub initial: GaussianMixture,
    pub domain: Domain,
    pub flow: FlowConfig,
    pub snapshots: Vec<f64>,
    /// Reference solver; its nodes are also the comparison grid.
    pub grid: GridSolverConfig,
}

impl Fig1Config {
    pub fn defaults() -> Self {
        let mut flow = FlowConfig::new(1e-2, 1e-2, 30_000, KernelSpec::gaussian(5e-2), RegularizerKind::Entropy);
        flow.basis = BasisMode::Fixed {
            count: 40,
            placement: CenterPlacement::Random,
        };
        Self {
            seed: 0,
            potential: PotentialSpec::QuadraticOu {
                a: vec![1.0],
                b: vec![0.0],
            },
            beta: 1.0,
            initial: GaussianMixture::new(
                vec![0.5, 0.5],
                vec![
                    DiagGaussian::isotropic(vec![-1.0], 1.0).expect("valid"),
                    DiagGaussian::isotropic(vec![1.0], 1.0).expect("valid"),
                ],
            )
            .expect("valid"),
            domain: Domain::interval(-3.0, 3.0).expect("valid"),
            flow,
            snapshots: vec![0.05, 0.2, 0.5],
            grid: GridSolverConfig {
                n_nodes: 400,
                interval: (-3.0, 3.0),
                dt: 1e-4,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotResult {
    pub t: f64,
    pub symmetric_kl: f64,
    pub fitted_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Result {
    pub config: Fig1Config,
    pub snapshots: Vec<SnapshotResult>,
}

pub fn run_fig1(config: &Fig1Config, output_dir: Option<&Path>) -> Result<Fig1Result> {
    let start = Instant::now();
    let mut times = config.snapshots.clone();
    times.sort_by(f64::total_cmp);
    let last = *times
        .last()
        .ok_or_else(|| Error::InvalidArgument("no snapshot times".into()))?;
    let tau = config.flow.tau;
    let m = substeps_for(last, tau)?;
    let indices = times
        .iter()
        .map(|&t| substeps_for(t, tau).map(|k| k - 1))
        .collect::<Result<Vec<_>>>()?;
    let fe = FreeEnergy::new(config.potential.clone(), config.beta)?;
    let flow = FlowConfig {
        m_substeps: m,
        ..config.flow.clone()
    };
    let rho0: SharedDensity = std::sync::Arc::new(config.initial.clone());
    let steps = evolve(rho0, &config.domain, &fe, last, &flow, config.seed)?;
    let truth = chang_cooper_snapshots(&config.initial, &config.potential, config.beta, &times, &config.grid)?;
    let grid = config.grid.grid()?;
    let nodes = grid.nodes();
    let mut snapshots = Vec::with_capacity(times.len());
    for ((&t, &k), exact) in times.iter().zip(&indices).zip(&truth) {
        let cmp = fit_scale_then_kl(steps[k].output_density.as_ref(), exact, nodes.view())?;
        if let Some(dir) = output_dir {
            let est = steps[k].output_density.eval_rows(nodes.view());
            let rows: Vec<Vec<String>> = (0..grid.len())
                .map(|j| vec![num(nodes[[j, 0]]), num(est[j]), num(exact.values()[j])])
                .collect();
            write_table(&dir.join(format!("fig1_t{t}.csv")), config, &["x", "wgf", "exact"], &rows)?;
        }
        snapshots.push(SnapshotResult {
            t,
            symmetric_kl: cmp.symmetric_kl,
            fitted_scale: cmp.fitted_scale,
        });
    }
    let result = Fig1Result {
        config: config.clone(),
        snapshots,
    };
    if let Some(dir) = output_dir {
        write_json(
            &dir.join("fig1_summary.json"),
            &json!({
                "config": config,
                "rng": RNG_NAME,
                "snapshots": result.snapshots,
                "steps": step_diagnostics(&steps),
                "wall_time": start.elapsed().as_secs_f64(),
            }),
        )?;
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// OU dimension scaling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuScalingConfig {
    pub seed: u64,
    pub dims: Vec<usize>,
    pub replicates: usize,
    pub beta: f64,
    pub delta_t: f64,
    /// Standard deviation of the Gaussian standing in for the initial
    /// point mass at the origin.
    pub init_sd: f64,
    /// Diagonal of `A` is Gamma(shape, scale).
    pub a_shape: f64,
    pub a_scale: f64,
    /// `b ~ N(0, b_sd² I)`.
    pub b_sd: f64,
    /// Flow settings; a fixed basis of `count = 0` is sized to the space
    /// of cubic polynomials, `C(d + 3, 3)`.
    pub flow: FlowConfig,
    /// Sample proposals are the linearized Gaussian moments with variances
    /// multiplied by this.
    pub proposal_widening: f64,
    /// Half-width of the sampling box, in standard deviations of the widest
    /// proposal.
    pub box_sds: f64,
    pub particle_counts: Vec<usize>,
    pub dt_sim: f64,
    pub kl_points: usize,
    pub fit_scale: bool,
}

impl OuScalingConfig {
    pub fn defaults() -> Self {
        let mut flow = FlowConfig::new(1e-6, 0.2, 20_000, KernelSpec::polynomial(3, 1.0), RegularizerKind::L2);
        flow.basis = BasisMode::Fixed {
            count: 0,
            placement: CenterPlacement::Samples,
        };
        flow.gamma_continuation = vec![1e-2, 1e-3, 1e-4, 1e-5];
        flow.solver = SolverKind::Newton;
        flow.continuation_iters = 40;
        flow.max_iter = 100;
        Self {
            seed: 0,
            dims: vec![1, 2, 3, 4, 5],
            replicates: 5,
            beta: 1.0,
            delta_t: 1.0,
            init_sd: 1e-3,
            a_shape: 2.0,
            a_scale: 0.5,
            b_sd: 0.5,
            flow,
            proposal_widening: 1.0,
            box_sds: 6.0,
            particle_counts: vec![1000, 10_000],
            dt_sim: 1e-3,
            kl_points: 40_000,
            fit_scale: true,
        }
    }
}

/// Drift and offset of one random OU problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuProblem {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

pub fn draw_ou_problem(config: &OuScalingConfig, d: usize, seed: u64) -> Result<OuProblem> {
    let gamma = Gamma::new(config.a_shape, config.a_scale)
        .map_err(|e| Error::InvalidArgument(format!("gamma distribution: {e}")))?;
    let mut rng = rng_stream(seed, 0);
    let a = (0..d).map(|_| gamma.sample(&mut rng)).collect();
    let b = (0..d)
        .map(|_| config.b_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(OuProblem { a, b })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuReplicate {
    pub dim: usize,
    pub replicate: usize,
    pub method: String,
    pub symmetric_kl: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuSummaryRow {
    pub dim: usize,
    pub method: String,
    pub median: f64,
    pub lower_95: f64,
    pub upper_95: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuScalingResult {
    pub config: OuScalingConfig,
    pub replicates: Vec<OuReplicate>,
    pub summary: Vec<OuSummaryRow>,
    pub failures: Vec<String>,
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

fn widened(s: &GaussianState, factor: f64) -> Result<DiagGaussian> {
    DiagGaussian::new(
        s.mean.iter().copied().collect(),
        (0..s.dim()).map(|k| factor * s.cov[(k, k)]).collect(),
    )
}

/// One replicate at dimension `d`: the wgf estimate and each particle
/// baseline scored against the closed form.
pub fn ou_replicate(config: &OuScalingConfig, d: usize, rep: usize) -> Result<Vec<OuReplicate>> {
    let seed = derive_seed(derive_seed(config.seed, d as u64), rep as u64);
    let problem = draw_ou_problem(config, d, seed)?;
    let potential = PotentialSpec::quadratic(problem.a.clone(), problem.b.clone())?;
    let fe = FreeEnergy::new(potential.clone(), config.beta)?;
    let init_var = config.init_sd * config.init_sd;
    let zeros = vec![0.0; d];
    let exact = ou_propagate(&problem.a, &problem.b, config.beta, &zeros, &vec![init_var; d], config.delta_t)?;
    let rho0 = DiagGaussian::new(zeros.clone(), vec![init_var; d])?;
    let m = substeps_for(config.delta_t, config.flow.tau)?;
    let tau = config.delta_t / m as f64;

    // Linearized moments at every substep boundary.
    let mut moments = vec![GaussianState::isotropic(zeros.clone(), init_var)?];
    for k in 0..m {
        moments.push(ekf_predict(&moments[k], &potential, config.beta, tau)?.0);
    }
    let proposals: Vec<(DiagGaussian, DiagGaussian)> = (0..m)
        .map(|k| {
            Ok((
                widened(&moments[k + 1], config.proposal_widening)?,
                widened(&moments[k], config.proposal_widening)?,
            ))
        })
        .collect::<Result<_>>()?;
    let mut lower = vec![f64::INFINITY; d];
    let mut upper = vec![f64::NEG_INFINITY; d];
    for s in &moments {
        for k in 0..d {
            let half = config.box_sds * (config.proposal_widening * s.cov[(k, k)]).sqrt();
            lower[k] = lower[k].min(s.mean[k] - half);
            upper[k] = upper[k].max(s.mean[k] + half);
        }
    }
    let domain = Domain::new(lower, upper)?;
    let mut flow = FlowConfig {
        m_substeps: m,
        ..config.flow.clone()
    };
    if let BasisMode::Fixed { count: 0, placement } = flow.basis {
        flow.basis = BasisMode::Fixed {
            count: binomial(d + 3, 3),
            placement,
        };
    }
    let hook = |k: usize, _nu: &SharedDensity| Ok(proposals[k].clone());
    let opts = EvolveOptions {
        proposals: Some(&hook),
        initial_coefficients: None,
    };
    let mut out = Vec::new();
    let steps = evolve_with(
        std::sync::Arc::new(rho0.clone()),
        &domain,
        &fe,
        config.delta_t,
        &flow,
        derive_seed(seed, 1),
        &opts,
    )?;
    let est = steps.last().expect("m >= 1").output_density.clone();
    let kl = monte_carlo_symmetric_kl(est.as_ref(), &exact, config.kl_points, derive_seed(seed, 2), config.fit_scale)?;
    out.push(OuReplicate {
        dim: d,
        replicate: rep,
        method: "wgf".into(),
        symmetric_kl: kl.symmetric_kl,
        std_error: kl.std_error,
    });
    for (j, &n) in config.particle_counts.iter().enumerate() {
        let ens = euler_maruyama_simulate(&rho0, &potential, config.beta, config.delta_t, config.dt_sim, n, derive_seed(seed, 10 + j as u64))?;
        let kde = kde_density(&ens, &BandwidthRule::Scott)?;
        let kl = monte_carlo_symmetric_kl(&kde, &exact, config.kl_points, derive_seed(seed, 2), config.fit_scale)?;
        out.push(OuReplicate {
            dim: d,
            replicate: rep,
            method: format!("particles-{n}"),
            symmetric_kl: kl.symmetric_kl,
            std_error: kl.std_error,
        });
    }
    Ok(out)
}

pub fn run_ou_scaling(config: &OuScalingConfig, output_dir: Option<&Path>) -> Result<OuScalingResult> {
    let start = Instant::now();
    let jobs: Vec<(usize, usize)> = config
        .dims
        .iter()
        .flat_map(|&d| (0..config.replicates).map(move |r| (d, r)))
        .collect();
    let outcomes: Vec<Result<Vec<OuReplicate>>> = jobs
        .par_iter()
        .map(|&(d, r)| ou_replicate(config, d, r))
        .collect();
    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    for ((d, r), o) in jobs.iter().zip(outcomes) {
        match o {
            Ok(v) => replicates.extend(v),
            Err(e) => failures.push(format!("d={d} replicate={r}: {e}")),
        }
    }
    let mut methods = vec!["wgf".to_string()];
    methods.extend(config.particle_counts.iter().map(|n| format!("particles-{n}")));
    let mut summary = Vec::new();
    for &d in &config.dims {
        for m in &methods {
            let vals: Vec<f64> = replicates
                .iter()
                .filter(|r| r.dim == d && &r.method == m)
                .map(|r| r.symmetric_kl)
                .collect();
            if let Some((median, lo, hi)) = quantile_summary(&vals, 0.025) {
                summary.push(OuSummaryRow {
                    dim: d,
                    method: m.clone(),
                    median,
                    lower_95: lo,
                    upper_95: hi,
                    replicates: vals.len(),
                });
            }
        }
    }
    let result = OuScalingResult {
        config: config.clone(),
        replicates,
        summary,
        failures,
    };
    if let Some(dir) = output_dir {
        let rows: Vec<Vec<String>> = result
            .replicates
            .iter()
            .map(|r| vec![r.dim.to_string(), r.replicate.to_string(), r.method.clone(), num(r.symmetric_kl), num(r.std_error)])
            .collect();
        write_table(&dir.join("ou_scaling_replicates.csv"), config, &["dim", "replicate", "method", "symmetric_kl", "std_error"], &rows)?;
        let rows: Vec<Vec<String>> = result
            .summary
            .iter()
            .map(|r| vec![r.dim.to_string(), r.method.clone(), num(r.median), num(r.lower_95), num(r.upper_95), r.replicates.to_string()])
            .collect();
        write_table(&dir.join("ou_scaling_summary.csv"), config, &["dim", "method", "median", "lower_95", "upper_95", "replicates"], &rows)?;
        write_json(
            &dir.join("ou_scaling_summary.json"),
            &json!({
                "config": config,
                "rng": RNG_NAME,
                "summary": result.summary,
                "failures": result.failures,
                "wall_time": start.elapsed().as_secs_f64(),
            }),
        )?;
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// Sine filtering

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SineFilteringConfig {
    pub seed: u64,
    pub n_runs: usize,
    pub n_obs: usize,
    pub delta_t: f64,
    /// Euler–Maruyama step of the simulated truth.
    pub sim_dt: f64,
    pub x0: Vec<f64>,
    pub model: FilterModel,
    pub settings: FilterSettings,
    /// Methods scored against `exact-grid`, which always runs.
    pub methods: Vec<FilterMethod>,
    /// Run whose posteriors are dumped at `dump_steps` (1-based).
    pub illustrative_run: usize,
    pub dump_steps: Vec<usize>,
}

impl SineFilteringConfig {
    pub fn defaults() -> Self {
        Self {
            seed: 0,
            n_runs: 20,
            n_obs: 20,
            delta_t: 1.0,
            sim_dt: 1e-3,
            x0: vec![0.0],
            model: FilterModel::sine(),
            settings: FilterSettings::sine_defaults(),
            methods: vec![
                FilterMethod::Wgf,
                FilterMethod::Ekf,
                FilterMethod::Ukf,
                FilterMethod::Gsf,
                FilterMethod::BootstrapPf,
            ],
            illustrative_run: 0,
            dump_steps: (1..=8).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: FilterMethod,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub steps_scored: usize,
    pub failed_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlRecord {
    pub run: usize,
    pub step: usize,
    pub method: FilterMethod,
    pub symmetric_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SineFilteringResult {
    pub config: SineFilteringConfig,
    pub records: Vec<KlRecord>,
    pub summary: Vec<MethodSummary>,
    /// Failure messages, `run/method: message`.
    pub failures: Vec<String>,
    /// Fraction of exact-grid posteriors with at least two modes.
    pub multimodal_fraction: f64,
}

struct RunOutcome {
    records: Vec<KlRecord>,
    failures: Vec<String>,
    runs: Vec<FilterRun>,
    multimodal: (usize, usize),
    wall: Vec<(FilterMethod, f64)>,
}

fn sine_run(config: &SineFilteringConfig, r: usize, keep: bool) -> Result<RunOutcome> {
    let seed = derive_seed(config.seed, r as u64);
    let model = &config.model;
    let (_, obs) = simulate_truth_and_observations(
        &model.potential,
        model.beta,
        &config.x0,
        config.n_obs,
        config.delta_t,
        model.obs_noise_sd,
        config.sim_dt,
        seed,
    )?;
    let exact = run_filter(FilterMethod::ExactGrid, &obs, model, &config.settings, seed)?;
    let mut failures = Vec::new();
    if let Some(f) = &exact.failure {
        failures.push(format!("run {r}/exact-grid step {}: {}", f.index, f.message));
    }
    let grid = config.settings.grid.grid()?;
    let nodes = grid.nodes();
    let multimodal = exact
        .posteriors
        .iter()
        .filter(|p| crate::filtering::local_maxima(&p.eval_rows(nodes.view()), 1e-3) >= 2)
        .count();
    let mut records = Vec::new();
    let mut runs = Vec::new();
    let mut wall = Vec::new();
    for &method in config.methods.iter().filter(|m| **m != FilterMethod::ExactGrid) {
        let t0 = Instant::now();
        let run = run_filter(method, &obs, model, &config.settings, seed)?;
        wall.push((method, t0.elapsed().as_secs_f64()));
        if let Some(f) = &run.failure {
            failures.push(format!("run {r}/{method} step {}: {}", f.index, f.message));
        }
        for (k, kl) in per_step_kl(&run, &exact, &nodes)?.into_iter().enumerate() {
            records.push(KlRecord {
                run: r,
                step: k + 1,
                method,
                symmetric_kl: kl,
            });
        }
        if keep {
            runs.push(run);
        }
    }
    let n_post = exact.posteriors.len();
    if keep {
        runs.insert(0, exact);
    }
    Ok(RunOutcome {
        records,
        failures,
        runs,
        multimodal: (multimodal, n_post),
        wall,
    })
}

pub fn run_sine_filtering(config: &SineFilteringConfig, output_dir: Option<&Path>) -> Result<SineFilteringResult> {
    let start = Instant::now();
    let outcomes: Vec<Result<RunOutcome>> = (0..config.n_runs)
        .into_par_iter()
        .map(|r| sine_run(config, r, output_dir.is_some() && r == config.illustrative_run))
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut illustrative = None;
    let mut modes = (0usize, 0usize);
    let mut wall: Vec<(FilterMethod, f64)> = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => {
                records.extend(o.records);
                failures.extend(o.failures);
                modes.0 += o.multimodal.0;
                modes.1 += o.multimodal.1;
                for (m, t) in o.wall {
                    match wall.iter_mut().find(|(x, _)| *x == m) {
                        Some(e) => e.1 += t,
                        None => wall.push((m, t)),
                    }
                }
                if !o.runs.is_empty() {
                    illustrative = Some(o.runs);
                }
            }
            Err(e) => failures.push(format!("run {r}: {e}")),
        }
    }
    let summary = config
        .methods
        .iter()
        .filter(|m| **m != FilterMethod::ExactGrid)
        .filter_map(|&method| {
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| r.method == method)
                .map(|r| r.symmetric_kl)
                .collect();
            let failed_runs = failures
                .iter()
                .filter(|f| f.contains(&format!("/{method} ")))
                .count();
            quantile_summary(&vals, 0.25).map(|(median, q25, q75)| MethodSummary {
                method,
                median,
                q25,
                q75,
                steps_scored: vals.len(),
                failed_runs,
            })
        })
        .collect();
    let result = SineFilteringResult {
        config: config.clone(),
        records,
        summary,
        failures,
        multimodal_fraction: if modes.1 > 0 {
            modes.0 as f64 / modes.1 as f64
        } else {
            0.0
        },
    };
    if let Some(dir) = output_dir {
        let rows: Vec<Vec<String>> = result
            .records
            .iter()
            .map(|r| vec![r.run.to_string(), r.step.to_string(), r.method.to_string(), num(r.symmetric_kl)])
            .collect();
        write_table(&dir.join("filter_kl.csv"), config, &["run", "step", "method", "symmetric_kl"], &rows)?;
        if let Some(runs) = illustrative {
            let grid = config.settings.grid.grid()?;
            let nodes = grid.nodes();
            let mut header = vec!["x"];
            header.extend(runs.iter().map(|r| r.method_name()));
            for &s in &config.dump_steps {
                if s == 0 || runs.iter().any(|r| r.posteriors.len() < s) {
                    continue;
                }
                let cols: Vec<Vec<f64>> = runs.iter().map(|r| r.posteriors[s - 1].eval_rows(nodes.view())).collect();
                let rows: Vec<Vec<String>> = (0..grid.len())
                    .map(|j| {
                        let mut row = vec![num(nodes[[j, 0]])];
                        row.extend(cols.iter().map(|c| num(c[j])));
                        row
                    })
                    .collect();
                write_table(&dir.join(format!("filter_posteriors_t{s}.csv")), config, &header, &rows)?;
            }
        }
        write_json(
            &dir.join("filter_summary.json"),
            &json!({
                "config": config,
                "rng": RNG_NAME,
                "summary": result.summary,
                "failures": result.failures,
                "multimodal_fraction": result.multimodal_fraction,
                "method_wall_time": wall.iter().map(|(m, t)| (m.to_string(), json!(t))).collect::<serde_json::Map<_, _>>(),
                "wall_time": start.elapsed().as_secs_f64(),
            }),
        )?;
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// Generic flow runs

/// A flow from a Gaussian mixture, dumped at snapshot times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRunConfig {
    pub seed: u64,
    pub domain: Domain,
    pub potential: PotentialSpec,
    pub beta: f64,
    pub initial: GaussianMixture,
    /// `tau` is the step; `m_substeps` is derived from the last snapshot.
    pub flow: FlowConfig,
    pub snapshots: Vec<f64>,
    /// Dump grid nodes per axis (1-D and 2-D only).
    pub grid_nodes: usize,
}

impl FlowRunConfig {
    pub fn defaults() -> Self {
        let f = Fig1Config::defaults();
        Self {
            seed: f.seed,
            domain: f.domain,
            potential: f.potential,
            beta: f.beta,
            initial: f.initial,
            flow: f.flow,
            snapshots: f.snapshots,
            grid_nodes: 400,
        }
    }
}

pub fn run_flow(config: &FlowRunConfig, output_dir: &Path) -> Result<Vec<FlowStep>> {
    let start = Instant::now();
    let mut times = config.snapshots.clone();
    times.sort_by(f64::total_cmp);
    let last = *times
        .last()
        .ok_or_else(|| Error::InvalidArgument("no snapshot times".into()))?;
    let m = substeps_for(last, config.flow.tau)?;
    let fe = FreeEnergy::new(config.potential.clone(), config.beta)?;
    let flow = FlowConfig {
        m_substeps: m,
        ..config.flow.clone()
    };
    let steps = evolve(std::sync::Arc::new(config.initial.clone()), &config.domain, &fe, last, &flow, config.seed)?;
    if config.domain.dim() <= 2 {
        let grid = Grid::over(&config.domain, config.grid_nodes)?;
        let nodes = grid.nodes();
        for &t in &times {
            let k = substeps_for(t, config.flow.tau)? - 1;
            let vals = steps[k].output_density.eval_rows(nodes.view());
            let rows: Vec<Vec<String>> = (0..grid.len())
                .map(|j| {
                    let mut r: Vec<String> = nodes.row(j).iter().map(|&x| num(x)).collect();
                    r.push(num(vals[j]));
                    r
                })
                .collect();
            let mut header: Vec<String> = (0..grid.dim()).map(|i| format!("x{i}")).collect();
            header.push("density".into());
            let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
            write_table(&output_dir.join(format!("flow_t{t}.csv")), config, &header, &rows)?;
        }
    }
    write_json(
        &output_dir.join("flow_summary.json"),
        &json!({
            "config": config,
            "rng": RNG_NAME,
            "steps": step_diagnostics(&steps),
            "wall_time": start.elapsed().as_secs_f64(),
        }),
    )?;
    Ok(steps)
}

/// Create `dir` if needed.
pub fn prepare_output_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Overrides that move desk-scale defaults to the published scale.
pub fn paper_scale_overrides(name: ExperimentName) -> Value {
    match name {
        ExperimentName::Fig1OuBimodal => json!({}),
        ExperimentName::OuDimensionScaling => json!({
            "dims": [1, 2, 3, 4, 5, 6, 7, 8, 9, 10],
            "replicates": 20,
        }),
        ExperimentName::SineFiltering => json!({ "n_runs": 100 }),
    }
}

/// Resolve and run an experiment, writing its artifacts.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Value> {
    prepare_output_dir(&spec.output_dir)?;
    let dir = Some(spec.output_dir.as_path());
    Ok(match spec.name {
        ExperimentName::Fig1OuBimodal => {
            let c = resolve(&Fig1Config::defaults(), &spec.overrides)?;
            serde_json::to_value(run_fig1(&c, dir)?.snapshots)?
        }
        ExperimentName::OuDimensionScaling => {
            let c = resolve(&OuScalingConfig::defaults(), &spec.overrides)?;
            let r = run_ou_scaling(&c, dir)?;
            json!({ "summary": r.summary, "failures": r.failures })
        }
        ExperimentName::SineFiltering => {
            let c = resolve(&SineFilteringConfig::defaults(), &spec.overrides)?;
            let r = run_sine_filtering(&c, dir)?;
            json!({ "summary": r.summary, "failures": r.failures })
        }
    })
}
