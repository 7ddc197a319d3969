//! Chang–Cooper finite-volume scheme for the 1-D Fokker–Planck equation
//! `∂ρ/∂t = ∂x(ρ w' + β⁻¹ ∂x ρ)` with zero-flux boundaries, stepped by
//! implicit Euler.
//!
//! Node values are cell averages of width `h`. The interface flux is
//! `F = -[B((1-δ)ρ_{j+1} + δρ_j) + C(ρ_{j+1} - ρ_j)/h]` with
//! `B = (w_{j+1} - w_j)/h`, `C = 1/β`, `W = hB/C` and
//! `δ = 1/W - 1/(e^W - 1)`, which makes the nodal Gibbs density an exact
//! discrete equilibrium.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::free_energy::PotentialSpec;
use crate::model::{Density, Grid, GridDensity};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSolverConfig {
    pub n_nodes: usize,
    pub interval: (f64, f64),
    pub dt: f64,
}

impl GridSolverConfig {
    pub fn new(n_nodes: usize, lower: f64, upper: f64, dt: f64) -> Result<Self> {
        let c = Self {
            n_nodes,
            interval: (lower, upper),
            dt,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 3 {
            return Err(Error::InvalidArgument("grid solver needs at least 3 nodes".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidArgument("grid solver needs dt > 0".into()));
        }
        if !(self.interval.1 > self.interval.0) {
            return Err(Error::InvalidDomain("empty solver interval".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::line(self.interval.0, self.interval.1, self.n_nodes)
    }
}

fn delta(w: f64) -> f64 {
    if w.abs() < 1e-5 {
        0.5 - w / 12.0 + w.powi(3) / 720.0
    } else {
        1.0 / w - 1.0 / w.exp_m1()
    }
}

/// Tridiagonal generator `A` with `dρ/dt = Aρ`: `(sub, diag, sup)`.
struct Operator {
    sub: Vec<f64>,
    diag: Vec<f64>,
    sup: Vec<f64>,
}

fn operator(grid: &Grid, potential: &PotentialSpec, beta: f64) -> Operator {
    let axis = grid.axes()[0];
    let n = axis.n;
    let h = axis.step();
    let c = 1.0 / beta;
    let w: Vec<f64> = (0..n).map(|j| potential.value(&[axis.node(j)])).collect();
    let mut sub = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut sup = vec![0.0; n];
    for j in 0..n - 1 {
        let b = (w[j + 1] - w[j]) / h;
        let dl = delta(h * b / c);
        // F_{j+1/2} = a ρ_j + e ρ_{j+1}
        let a = -(b * dl - c / h);
        let e = -(b * (1.0 - dl) + c / h);
        // dρ_j/dt gets -F/h, dρ_{j+1}/dt gets +F/h.
        diag[j] -= a / h;
        sup[j] -= e / h;
        sub[j + 1] += a / h;
        diag[j + 1] += e / h;
    }
    Operator { sub, diag, sup }
}

/// Solve `(I - dt A) x = rhs` by the Thomas algorithm.
fn implicit_step(op: &Operator, dt: f64, rhs: &[f64], scratch: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = rhs.len();
    scratch.resize(n, 0.0);
    out.resize(n, 0.0);
    let lower = |j: usize| -dt * op.sub[j];
    let main = |j: usize| 1.0 - dt * op.diag[j];
    let upper = |j: usize| -dt * op.sup[j];
    let mut denom = main(0);
    scratch[0] = upper(0) / denom;
    out[0] = rhs[0] / denom;
    for j in 1..n {
        denom = main(j) - lower(j) * scratch[j - 1];
        scratch[j] = upper(j) / denom;
        out[j] = (rhs[j] - lower(j) * out[j - 1]) / denom;
    }
    for j in (0..n - 1).rev() {
        out[j] -= scratch[j] * out[j + 1];
    }
}

/// Nodal values of `rho0` evolved to each of `times` (nondecreasing).
pub fn chang_cooper_snapshots(
    rho0: &dyn Density,
    potential: &PotentialSpec,
    beta: f64,
    times: &[f64],
    cfg: &GridSolverConfig,
) -> Result<Vec<GridDensity>> {
    cfg.validate()?;
    if potential.dim() != 1 || rho0.dim() != 1 {
        return Err(Error::InvalidArgument("Chang–Cooper is 1-D only".into()));
    }
    if times.windows(2).any(|w| w[1] < w[0]) || times.iter().any(|&t| !(t >= 0.0)) {
        return Err(Error::InvalidArgument("snapshot times must be nondecreasing and >= 0".into()));
    }
    let grid = cfg.grid()?;
    let mut rho = rho0.eval_rows(grid.nodes().view());
    if rho.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument("initial density must be finite and >= 0".into()));
    }
    let op = operator(&grid, potential, beta);
    let mut scratch = Vec::new();
    let mut next = Vec::new();
    let mut t = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        let span = target - t;
        if span > 0.0 {
            let steps = (span / cfg.dt).ceil().max(1.0) as usize;
            let dt = span / steps as f64;
            for _ in 0..steps {
                implicit_step(&op, dt, &rho, &mut scratch, &mut next);
                std::mem::swap(&mut rho, &mut next);
            }
            if let Some(v) = rho.iter().cloned().find(|&v| v < -1e-12 || !v.is_finite()) {
                return Err(Error::Unstable(format!(
                    "Chang–Cooper produced {v}; reduce dt"
                )));
            }
            rho.iter_mut().for_each(|v| *v = v.max(0.0));
            t = target;
        }
        out.push(GridDensity::new(grid.clone(), rho.clone())?);
    }
    Ok(out)
}

pub fn chang_cooper_evolve(
    rho0: &dyn Density,
    potential: &PotentialSpec,
    beta: f64,
    t: f64,
    cfg: &GridSolverConfig,
) -> Result<GridDensity> {
    Ok(chang_cooper_snapshots(rho0, potential, beta, &[t], cfg)?
        .pop()
        .expect("one snapshot"))
}

/// `h Σ ρ_j`, the quantity the scheme conserves.
pub fn cell_mass(rho: &GridDensity) -> f64 {
    rho.grid().axes()[0].step() * rho.values().iter().sum::<f64>()
}
