//! Density comparison by symmetric KL divergence.
//!
//! Grid values are normalized to unit sum, floored at `1e-12` times their
//! maximum, and renormalized before taking logs.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{pairwise_sum, rng_from_seed, Density, Sampler};

/// Relative floor applied before logarithms.
pub const FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridComparison {
    /// Floored, normalized estimate values.
    pub p_values: Vec<f64>,
    /// Floored, normalized reference values.
    pub q_values: Vec<f64>,
    pub fitted_scale: f64,
    pub symmetric_kl: f64,
}

fn floored_probabilities(values: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite { index: i });
    }
    let max = values.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::DegenerateDensity { mass: 0.0 });
    }
    let floor = FLOOR * max;
    let floored: Vec<f64> = values.iter().map(|&v| v.max(floor)).collect();
    let total = pairwise_sum(&floored);
    Ok(floored.into_iter().map(|v| v / total).collect())
}

/// `sum (p - q)(log p - log q)` over floored, normalized vectors.
pub fn symmetric_kl_values(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    let p = floored_probabilities(p)?;
    let q = floored_probabilities(q)?;
    Ok(kl_of_probabilities(&p, &q))
}

fn kl_of_probabilities(p: &[f64], q: &[f64]) -> f64 {
    let terms: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| (a - b) * (a.ln() - b.ln()))
        .collect();
    pairwise_sum(&terms).max(0.0)
}

pub fn symmetric_kl_on_grid(p: &dyn Density, q: &dyn Density, nodes: ArrayView2<'_, f64>) -> Result<f64> {
    symmetric_kl_values(&p.eval_rows(nodes), &q.eval_rows(nodes))
}

/// Least-squares scale `<est, exact> / <est, est>`.
pub fn fitted_scale(estimate: &[f64], exact: &[f64]) -> Result<f64> {
    let ee: f64 = estimate.iter().map(|v| v * v).sum();
    if !(ee > 0.0) {
        return Err(Error::DegenerateDensity { mass: 0.0 });
    }
    let ex: f64 = estimate.iter().zip(exact).map(|(a, b)| a * b).sum();
    Ok(ex / ee)
}

pub fn fit_scale_then_kl_values(estimate: &[f64], exact: &[f64]) -> Result<GridComparison> {
    if estimate.len() != exact.len() {
        return Err(Error::DimensionMismatch {
            expected: exact.len(),
            got: estimate.len(),
        });
    }
    let c = fitted_scale(estimate, exact)?;
    // A nonpositive fit (no overlap at all) leaves the estimate unscaled.
    let scale = if c > 0.0 { c } else { 1.0 };
    let scaled: Vec<f64> = estimate.iter().map(|v| v * scale).collect();
    let p = floored_probabilities(&scaled)?;
    let q = floored_probabilities(exact)?;
    let kl = kl_of_probabilities(&p, &q);
    Ok(GridComparison {
        p_values: p,
        q_values: q,
        fitted_scale: c,
        symmetric_kl: kl,
    })
}

pub fn fit_scale_then_kl(
    estimate: &dyn Density,
    exact: &dyn Density,
    nodes: ArrayView2<'_, f64>,
) -> Result<GridComparison> {
    fit_scale_then_kl_values(&estimate.eval_rows(nodes), &exact.eval_rows(nodes))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloKl {
    pub symmetric_kl: f64,
    pub std_error: f64,
    /// Least-squares scale over the sample points (1 when not fitted).
    pub fitted_scale: f64,
    /// Estimated mass of the scaled estimate, used to normalize it.
    pub estimate_mass: f64,
}

/// Symmetric KL from points `x_i ~ exact`:
/// `mean[(1 - q(x_i)/p(x_i)) (log p(x_i) - log q(x_i))]`, where `p` is
/// the exact density and `q` the estimate rescaled to unit mass by the
/// importance estimate `mean[q(x_i)/p(x_i)]`.
pub fn monte_carlo_symmetric_kl(
    estimate: &dyn Density,
    exact: &dyn Sampler,
    n_points: usize,
    seed: u64,
    fit_scale: bool,
) -> Result<MonteCarloKl> {
    if n_points < 2 {
        return Err(Error::InvalidArgument("need at least two points".into()));
    }
    let d = exact.dim();
    if estimate.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: estimate.dim(),
        });
    }
    let mut rng = rng_from_seed(seed);
    let mut pts = Array2::zeros((n_points, d));
    for i in 0..n_points {
        let x = exact.sample(&mut rng);
        for k in 0..d {
            pts[[i, k]] = x[k];
        }
    }
    let p = exact.eval_rows(pts.view());
    let q_raw = estimate.eval_rows(pts.view());
    if let Some(i) = q_raw.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite { index: i });
    }
    let scale = if fit_scale {
        let c = fitted_scale(&q_raw, &p)?;
        if c > 0.0 {
            c
        } else {
            1.0
        }
    } else {
        1.0
    };
    let pmax = p.iter().cloned().fold(0.0, f64::max);
    let q_scaled: Vec<f64> = q_raw.iter().map(|v| v * scale).collect();
    let qmax = q_scaled.iter().cloned().fold(0.0, f64::max);
    if !(qmax > 0.0) {
        return Err(Error::DegenerateDensity { mass: 0.0 });
    }
    let pf: Vec<f64> = p.iter().map(|v| v.max(FLOOR * pmax)).collect();
    let qf: Vec<f64> = q_scaled.iter().map(|v| v.max(FLOOR * qmax)).collect();
    let ratios: Vec<f64> = qf.iter().zip(&pf).map(|(q, p)| q / p).collect();
    let mass = pairwise_sum(&ratios) / n_points as f64;
    let terms: Vec<f64> = ratios
        .iter()
        .map(|r| {
            let r = r / mass;
            (1.0 - r) * (-r.ln())
        })
        .collect();
    let mean = pairwise_sum(&terms) / n_points as f64;
    let var = terms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n_points - 1) as f64;
    Ok(MonteCarloKl {
        symmetric_kl: mean.max(0.0),
        std_error: (var / n_points as f64).sqrt(),
        fitted_scale: scale,
        estimate_mass: mass,
    })
}
