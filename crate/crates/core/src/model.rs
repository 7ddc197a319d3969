//! Shared domain types: boxes, densities, tensor grids, sample pairs and
//! the flow configuration.
//!
//! The reference measure everywhere is Lebesgue measure on an axis-aligned
//! box. Densities are evaluated pointwise and shared as `Arc<dyn Density>`.

use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regularizer::RegularizerKind;
use crate::rkhs::KernelSpec;

/// Generator used for every random draw in the crate.
pub type SimRng = rand_chacha::ChaCha8Rng;

/// Name of [`SimRng`], recorded in run metadata.
pub const RNG_NAME: &str = "chacha8";

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded by `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derive a child seed deterministically (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Axis-aligned box `[lower, upper]` in `R^dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(Error::InvalidDomain("zero dimensions".into()));
        }
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (i, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidDomain(format!(
                    "axis {i}: lower {lo} must be below upper {hi}"
                )));
            }
        }
        let domain = Self { lower, upper };
        let volume = domain.volume();
        if !(volume > 0.0 && volume.is_finite()) {
            return Err(Error::InvalidDomain(format!("volume {volume}")));
        }
        Ok(domain)
    }

    /// The cube `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo], vec![hi])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn volume(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| hi - lo)
            .product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
    }

    /// Midpoint of the box.
    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityKind {
    ClosedForm,
    Grid,
    RkhsImplied,
    Kde,
    Mixture,
}

/// A pointwise-evaluable density with respect to Lebesgue measure.
pub trait Density: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn eval(&self, x: &[f64]) -> f64;

    fn kind(&self) -> DensityKind;

    /// Evaluate at every row of `points`.
    fn eval_rows(&self, points: ArrayView2<'_, f64>) -> Vec<f64> {
        points
            .rows()
            .into_iter()
            .map(|row| match row.as_slice() {
                Some(s) => self.eval(s),
                None => self.eval(&row.to_vec()),
            })
            .collect()
    }
}

pub type SharedDensity = Arc<dyn Density>;

/// A density that can also draw samples from itself.
pub trait Sampler: Density {
    fn sample(&self, rng: &mut SimRng) -> Vec<f64>;
}

/// Uniform density `1 / volume` on a [`Domain`].
#[derive(Debug, Clone)]
pub struct UniformDensity {
    domain: Domain,
    value: f64,
}

impl UniformDensity {
    pub fn new(domain: Domain) -> Self {
        let value = 1.0 / domain.volume();
        Self { domain, value }
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }
}

impl Density for UniformDensity {
    fn dim(&self) -> usize {
        self.domain.dim()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        if self.domain.contains(x) {
            self.value
        } else {
            0.0
        }
    }

    fn kind(&self) -> DensityKind {
        DensityKind::ClosedForm
    }
}

impl Sampler for UniformDensity {
    fn sample(&self, rng: &mut SimRng) -> Vec<f64> {
        self.domain
            .lower
            .iter()
            .zip(&self.domain.upper)
            .map(|(&lo, &hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect()
    }
}

/// Gaussian with diagonal covariance. A zero variance on any axis gives the
/// point-mass limit: `eval` is 0 everywhere except exactly at the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: var.len(),
            });
        }
        if var.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("variances must be finite and >= 0".into()));
        }
        Ok(Self { mean, var })
    }

    pub fn isotropic(mean: Vec<f64>, sd: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, vec![sd * sd; d])
    }

    pub fn ln_eval(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((&xi, &m), &v) in x.iter().zip(&self.mean).zip(&self.var) {
            if v == 0.0 {
                if xi != m {
                    return f64::NEG_INFINITY;
                }
                continue;
            }
            let r = xi - m;
            acc -= 0.5 * (r * r / v + (2.0 * PI * v).ln());
        }
        acc
    }
}

impl Density for DiagGaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        if self.var.contains(&0.0) {
            return if x == self.mean.as_slice() {
                f64::INFINITY
            } else {
                0.0
            };
        }
        self.ln_eval(x).exp()
    }

    fn kind(&self) -> DensityKind {
        DensityKind::ClosedForm
    }
}

impl Sampler for DiagGaussian {
    fn sample(&self, rng: &mut SimRng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.var)
            .map(|(&m, &v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * z
            })
            .collect()
    }
}

/// Finite mixture of diagonal Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    components: Vec<DiagGaussian>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<DiagGaussian>) -> Result<Self> {
        if weights.len() != components.len() || weights.is_empty() {
            return Err(Error::InvalidArgument(
                "mixture needs one weight per component".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidArgument("mixture weights must be >= 0".into()));
        }
        let dim = components[0].dim();
        if components.iter().any(|c| c.dim() != dim) {
            return Err(Error::InvalidArgument("mixed component dimensions".into()));
        }
        Ok(Self {
            weights: weights.iter().map(|w| w / total).collect(),
            components,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[DiagGaussian] {
        &self.components
    }
}

impl Density for GaussianMixture {
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

impl Sampler for GaussianMixture {
    fn sample(&self, rng: &mut SimRng) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = k;
                break;
            }
        }
        self.components[pick].sample(rng)
    }
}

/// A density multiplied by a constant.
#[derive(Debug, Clone)]
pub struct ScaledDensity {
    pub inner: SharedDensity,
    pub scale: f64,
}

impl Density for ScaledDensity {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.scale * self.inner.eval(x)
    }

    fn kind(&self) -> DensityKind {
        self.inner.kind()
    }

    fn eval_rows(&self, points: ArrayView2<'_, f64>) -> Vec<f64> {
        let mut v = self.inner.eval_rows(points);
        v.iter_mut().for_each(|x| *x *= self.scale);
        v
    }
}

/// Regularly spaced nodes `lo, lo + h, ..., hi` along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl GridAxis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 || !(lo < hi) {
            return Err(Error::InvalidArgument(format!(
                "grid axis needs n >= 2 and lo < hi (n={n}, lo={lo}, hi={hi})"
            )));
        }
        Ok(Self { lo, hi, n })
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.hi
        } else {
            self.lo + i as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.node(i)).collect()
    }

    /// Trapezoid weight of node `i`.
    pub fn weight(&self, i: usize) -> f64 {
        let h = self.step();
        if i == 0 || i + 1 == self.n {
            0.5 * h
        } else {
            h
        }
    }
}

/// Tensor-product grid over a box; nodes are enumerated in row-major order
/// (last axis fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    axes: Vec<GridAxis>,
}

impl Grid {
    pub fn new(axes: Vec<GridAxis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidArgument("grid needs at least one axis".into()));
        }
        Ok(Self { axes })
    }

    pub fn line(lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new(vec![GridAxis::new(lo, hi, n)?])
    }

    /// `n` nodes per axis spanning `domain`.
    pub fn over(domain: &Domain, n: usize) -> Result<Self> {
        Self::new(
            domain
                .lower()
                .iter()
                .zip(domain.upper())
                .map(|(&lo, &hi)| GridAxis::new(lo, hi, n))
                .collect::<Result<_>>()?,
        )
    }

    pub fn axes(&self) -> &[GridAxis] {
        &self.axes
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn multi_index(&self, mut flat: usize, out: &mut [usize]) {
        for (k, axis) in self.axes.iter().enumerate().rev() {
            out[k] = flat % axis.n;
            flat /= axis.n;
        }
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let mut idx = vec![0; self.dim()];
        self.multi_index(flat, &mut idx);
        idx.iter().zip(&self.axes).map(|(&i, a)| a.node(i)).collect()
    }

    /// All nodes as an `len x dim` matrix.
    pub fn nodes(&self) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((self.len(), d));
        let mut idx = vec![0; d];
        for flat in 0..self.len() {
            self.multi_index(flat, &mut idx);
            for k in 0..d {
                out[[flat, k]] = self.axes[k].node(idx[k]);
            }
        }
        out
    }

    /// Tensor trapezoid weights, aligned with [`Grid::nodes`].
    pub fn weights(&self) -> Vec<f64> {
        let d = self.dim();
        let mut idx = vec![0; d];
        (0..self.len())
            .map(|flat| {
                self.multi_index(flat, &mut idx);
                idx.iter()
                    .zip(&self.axes)
                    .map(|(&i, a)| a.weight(i))
                    .product()
            })
            .collect()
    }

    /// Trapezoid integral of nodal values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        pairwise_sum_by(values.len(), {
            let w = self.weights();
            move |i| w[i] * values[i]
        })
    }

    /// Multilinear interpolation of nodal values; zero outside the grid.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        let d = self.dim();
        if x.len() != d {
            return 0.0;
        }
        let mut base = [0usize; 8];
        let mut frac = [0f64; 8];
        let mut base_v;
        let mut frac_v;
        let (base, frac): (&mut [usize], &mut [f64]) = if d <= 8 {
            (&mut base[..d], &mut frac[..d])
        } else {
            base_v = vec![0usize; d];
            frac_v = vec![0f64; d];
            (&mut base_v[..], &mut frac_v[..])
        };
        for (k, axis) in self.axes.iter().enumerate() {
            let v = x[k];
            if !(v >= axis.lo && v <= axis.hi) {
                return 0.0;
            }
            let s = (v - axis.lo) / axis.step();
            let mut i = s.floor() as usize;
            if i >= axis.n - 1 {
                i = axis.n - 2;
            }
            base[k] = i;
            frac[k] = (s - i as f64).clamp(0.0, 1.0);
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut flat = 0usize;
            for k in 0..d {
                let bit = (corner >> k) & 1;
                weight *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
                flat = flat * self.axes[k].n + base[k] + bit;
            }
            if weight != 0.0 {
                acc += weight * values[flat];
            }
        }
        acc
    }
}

/// Density given by nodal values on a tensor grid.
#[derive(Debug, Clone)]
pub struct GridDensity {
    grid: Grid,
    values: Vec<f64>,
}

impl GridDensity {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "grid density values must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { grid, values })
    }

    /// Sample `density` at the grid nodes.
    pub fn sample_from(density: &dyn Density, grid: &Grid) -> Result<Self> {
        let values = density.eval_rows(grid.nodes().view());
        Self::new(grid.clone(), values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mass(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    /// Rescale to unit trapezoid mass.
    pub fn normalized(&self) -> Result<Self> {
        let mass = self.mass();
        if !(mass > 1e-300) || !mass.is_finite() {
            return Err(Error::DegenerateDensity { mass });
        }
        Ok(Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v / mass).collect(),
        })
    }

    /// One row per node: coordinates, then the value.
    pub fn write_csv<W: Write>(&self, writer: W, header_comment: Option<&str>) -> Result<()> {
        let mut writer = writer;
        if let Some(comment) = header_comment {
            writeln!(writer, "# {comment}")?;
        }
        let mut csv = csv::Writer::from_writer(writer);
        let d = self.grid.dim();
        let mut header: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
        header.push("value".into());
        csv.write_record(&header)?;
        let nodes = self.grid.nodes();
        for (i, v) in self.values.iter().enumerate() {
            let mut rec: Vec<String> = nodes.row(i).iter().map(|c| format!("{c:.17e}")).collect();
            rec.push(format!("{v:.17e}"));
            csv.write_record(&rec)?;
        }
        csv.flush()?;
        Ok(())
    }

    /// Read a CSV written by [`GridDensity::write_csv`] back onto `grid`.
    pub fn read_csv<R: Read>(reader: R, grid: &Grid) -> Result<Self> {
        let mut csv = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(reader);
        let mut values = Vec::with_capacity(grid.len());
        for rec in csv.records() {
            let rec = rec?;
            let last = rec
                .get(rec.len().saturating_sub(1))
                .ok_or_else(|| Error::InvalidArgument("empty csv record".into()))?;
            values.push(
                last.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?,
            );
        }
        Self::new(grid.clone(), values)
    }
}

impl Density for GridDensity {
    fn dim(&self) -> usize {
        self.grid.dim()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.grid.interpolate(&self.values, x)
    }

    fn kind(&self) -> DensityKind {
        DensityKind::Grid
    }
}

/// `n` independent pairs `(x, y)` drawn from `mu0 ⊗ nu0`.
#[derive(Debug, Clone)]
pub struct SamplePairSet {
    pub xs: Array2<f64>,
    pub ys: Array2<f64>,
    pub mu0: Arc<dyn Sampler>,
    pub nu0: Arc<dyn Sampler>,
    pub seed: u64,
}

impl SamplePairSet {
    pub fn len(&self) -> usize {
        self.xs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.xs.ncols()
    }
}

/// Uniform pairs on `domain x domain`.
pub fn sample_pairs(domain: &Domain, n: usize, seed: u64) -> Result<SamplePairSet> {
    let domain = Domain::new(domain.lower.clone(), domain.upper.clone())?;
    let uniform: Arc<dyn Sampler> = Arc::new(UniformDensity::new(domain));
    sample_pairs_from(uniform.clone(), uniform, n, seed)
}

/// Pairs drawn from arbitrary proposal densities. Every stored point has
/// strictly positive proposal density.
pub fn sample_pairs_from(
    mu0: Arc<dyn Sampler>,
    nu0: Arc<dyn Sampler>,
    n: usize,
    seed: u64,
) -> Result<SamplePairSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample pair".into()));
    }
    let d = mu0.dim();
    if nu0.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: nu0.dim(),
        });
    }
    let mut rng = rng_from_seed(seed);
    let mut xs = Array2::zeros((n, d));
    let mut ys = Array2::zeros((n, d));
    for i in 0..n {
        let x = draw_positive(&*mu0, &mut rng)?;
        let y = draw_positive(&*nu0, &mut rng)?;
        xs.row_mut(i).assign(&ndarray::ArrayView1::from(&x));
        ys.row_mut(i).assign(&ndarray::ArrayView1::from(&y));
    }
    Ok(SamplePairSet {
        xs,
        ys,
        mu0,
        nu0,
        seed,
    })
}

fn draw_positive(sampler: &dyn Sampler, rng: &mut SimRng) -> Result<Vec<f64>> {
    for _ in 0..64 {
        let x = sampler.sample(rng);
        if sampler.eval(&x) > 0.0 {
            return Ok(x);
        }
    }
    Err(Error::InvalidArgument(
        "proposal keeps producing points of zero density".into(),
    ))
}

/// Which functions span the dual potentials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum BasisMode {
    /// Support points are the Monte Carlo sample points (`p = N`).
    Representer,
    /// `count` kernel centres placed in the domain.
    Fixed {
        count: usize,
        #[serde(default)]
        placement: CenterPlacement,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CenterPlacement {
    /// Uniform at random in the domain, redrawn per step from the step seed.
    #[default]
    Random,
    /// Regular lattice (1-D: evenly spaced).
    Lattice,
    /// A random subset of the step's x samples.
    Samples,
}

/// How the x and y proposals of a flow step are chosen.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProposalSpec {
    /// Uniform on the sampling box.
    #[default]
    Uniform,
    /// Diagonal Gaussians for x and y, set by the caller per step.
    Gaussian { x: DiagGaussian, y: DiagGaussian },
}

/// Maximizer of the dual program.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    #[default]
    Lbfgs,
    /// Damped Newton with the exact Hessian; fixed bases only.
    Newton,
}

/// Parameters of the regularized flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Regularization weight on the coupling.
    pub gamma: f64,
    /// Time step of one proximal step.
    pub tau: f64,
    pub n_samples: usize,
    /// Proximal steps per call of `evolve`.
    #[serde(default = "default_one")]
    pub m_substeps: usize,
    pub kernel: KernelSpec,
    pub regularizer: RegularizerKind,
    #[serde(default = "default_tol")]
    pub optimizer_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_basis")]
    pub basis: BasisMode,
    #[serde(default = "default_memory")]
    pub lbfgs_memory: usize,
    #[serde(default)]
    pub solver: SolverKind,
    /// Start each substep from the previous substep's coefficients.
    #[serde(default = "default_true")]
    pub warm_start: bool,
    /// Decreasing values of gamma, all above `gamma`, solved in turn
    /// before `gamma` itself, each starting from the previous solution.
    #[serde(default)]
    pub gamma_continuation: Vec<f64>,
    /// Iteration cap of each continuation stage.
    #[serde(default = "default_continuation_iters")]
    pub continuation_iters: usize,
    /// Rescale each step's output to unit mass.
    #[serde(default = "default_true")]
    pub normalize: bool,
    /// Quadrature nodes per axis; `None` picks 256 (1-D) or 64 (2-D).
    #[serde(default)]
    pub quadrature_nodes: Option<usize>,
    /// Monte Carlo quadrature points for `d >= 3`.
    #[serde(default = "default_mc_quadrature")]
    pub mc_quadrature_points: usize,
    #[serde(default = "default_gram_cap")]
    pub gram_cap_bytes: usize,
    #[serde(default)]
    pub proposal: ProposalSpec,
}

fn default_one() -> usize {
    1
}
fn default_tol() -> f64 {
    1e-8
}
fn default_max_iter() -> usize {
    1000
}
fn default_basis() -> BasisMode {
    BasisMode::Representer
}
fn default_memory() -> usize {
    10
}
fn default_continuation_iters() -> usize {
    200
}
fn default_true() -> bool {
    true
}
fn default_mc_quadrature() -> usize {
    100_000
}
fn default_gram_cap() -> usize {
    2 << 30
}

impl FlowConfig {
    pub fn new(
        gamma: f64,
        tau: f64,
        n_samples: usize,
        kernel: KernelSpec,
        regularizer: RegularizerKind,
    ) -> Self {
        Self {
            gamma,
            tau,
            n_samples,
            m_substeps: 1,
            kernel,
            regularizer,
            optimizer_tol: default_tol(),
            max_iter: default_max_iter(),
            basis: default_basis(),
            lbfgs_memory: default_memory(),
            solver: SolverKind::Lbfgs,
            warm_start: true,
            gamma_continuation: Vec::new(),
            continuation_iters: default_continuation_iters(),
            normalize: true,
            quadrature_nodes: None,
            mc_quadrature_points: default_mc_quadrature(),
            gram_cap_bytes: default_gram_cap(),
            proposal: ProposalSpec::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.n_samples == 0 || self.m_substeps == 0 || self.lbfgs_memory == 0 {
            return Err(Error::InvalidArgument(
                "n_samples, m_substeps and lbfgs_memory must be positive".into(),
            ));
        }
        if !(self.optimizer_tol > 0.0) {
            return Err(Error::InvalidArgument("optimizer_tol must be > 0".into()));
        }
        let mut prev = f64::INFINITY;
        for &g in &self.gamma_continuation {
            if !(g > self.gamma && g < prev) {
                return Err(Error::InvalidArgument(
                    "gamma_continuation must decrease and stay above gamma".into(),
                ));
            }
            prev = g;
        }
        if let BasisMode::Fixed { count: 0, .. } = self.basis {
            return Err(Error::InvalidArgument("fixed basis needs count > 0".into()));
        }
        if self.solver == SolverKind::Newton && self.basis == BasisMode::Representer {
            return Err(Error::InvalidArgument(
                "the newton solver needs a fixed basis".into(),
            ));
        }
        self.kernel.validate()
    }
}

/// Sum of `f(0..n)` by recursive halving, independent of thread count.
pub(crate) fn pairwise_sum_by<F: Fn(usize) -> f64>(n: usize, f: F) -> f64 {
    fn rec<F: Fn(usize) -> f64>(lo: usize, hi: usize, f: &F) -> f64 {
        if hi - lo <= 32 {
            let mut s = 0.0;
            for i in lo..hi {
                s += f(i);
            }
            s
        } else {
            let mid = lo + (hi - lo) / 2;
            rec(lo, mid, f) + rec(mid, hi, f)
        }
    }
    if n == 0 {
        0.0
    } else {
        rec(0, n, &f)
    }
}

pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    pairwise_sum_by(values.len(), |i| values[i])
}
