//! Limited-memory BFGS for smooth concave maximization.
//!
//! Internally minimizes the negated objective with a strong-Wolfe line
//! search (bracketing plus safeguarded cubic zoom). A damped Newton method
//! is also provided for problems small enough to form the Hessian.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_HALVINGS: usize = 50;
const MAX_LINE_SEARCH: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub memory: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 1000,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    /// Gradient norm reached the tolerance.
    Converged,
    /// Iteration budget spent.
    MaxIter,
    /// Line search found no acceptable step; usually round-off near the optimum.
    Stalled,
    /// The objective stayed non-finite through every allowed halving.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub final_value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub status: SolveStatus,
    pub wall_time: f64,
    /// `(value, grad_norm)` at every accepted iterate, starting with `x0`.
    pub history: Vec<(f64, f64)>,
}

impl SolveReport {
    pub fn failed(&self) -> bool {
        self.status == SolveStatus::Failed
    }
}

#[derive(Clone)]
struct Point {
    x: Vec<f64>,
    /// Negated objective.
    f: f64,
    /// Negated gradient.
    g: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Problem<F> {
    objective: F,
    evaluations: usize,
}

impl<F> Problem<F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    /// `None` for a non-finite value or gradient.
    fn eval(&mut self, x: Vec<f64>) -> Result<Option<Point>> {
        self.evaluations += 1;
        match (self.objective)(&x) {
            Ok((v, g)) => {
                if g.len() != x.len() {
                    return Err(Error::DimensionMismatch {
                        expected: x.len(),
                        got: g.len(),
                    });
                }
                if v.is_finite() && g.iter().all(|d| d.is_finite()) {
                    Ok(Some(Point {
                        x,
                        f: -v,
                        g: g.into_iter().map(|d| -d).collect(),
                    }))
                } else {
                    Ok(None)
                }
            }
            Err(Error::NonFinite { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

enum Search {
    Accepted(Point),
    Stalled,
    Failed,
}

fn step_to(x: &[f64], d: &[f64], a: f64) -> Vec<f64> {
    x.iter().zip(d).map(|(xi, di)| xi + a * di).collect()
}

/// Minimizer of the cubic interpolating `(a, fa, da)` and `(b, fb, db)`,
/// kept inside the bracket away from its ends.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let width = hi - lo;
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let fallback = 0.5 * (a + b);
    if !(disc >= 0.0) {
        return fallback;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    if t.is_finite() && t > lo + 0.1 * width && t < hi - 0.1 * width {
        t
    } else {
        fallback
    }
}

fn line_search<F>(prob: &mut Problem<F>, cur: &Point, dir: &[f64], a_init: f64) -> Result<Search>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let f0 = cur.f;
    let d0 = dot(&cur.g, dir);
    if !(d0 < 0.0) {
        return Ok(Search::Stalled);
    }
    let mut prev_a = 0.0;
    let mut prev = cur.clone();
    let mut prev_d = d0;
    let mut a = a_init;
    let mut a_max = f64::INFINITY;
    let mut halvings = 0;
    for i in 0..MAX_LINE_SEARCH {
        let p = loop {
            match prob.eval(step_to(&cur.x, dir, a))? {
                Some(p) => break p,
                None => {
                    halvings += 1;
                    if halvings > MAX_HALVINGS {
                        return Ok(Search::Failed);
                    }
                    a_max = a;
                    a = prev_a + 0.5 * (a - prev_a);
                }
            }
        };
        let dp = dot(&p.g, dir);
        if p.f > f0 + C1 * a * d0 || (i > 0 && p.f >= prev.f) {
            return zoom(prob, cur, dir, d0, (prev_a, prev, prev_d), (a, p, dp));
        }
        if dp.abs() <= -C2 * d0 {
            return Ok(Search::Accepted(p));
        }
        if dp >= 0.0 {
            return zoom(prob, cur, dir, d0, (a, p, dp), (prev_a, prev, prev_d));
        }
        prev_a = a;
        prev = p;
        prev_d = dp;
        a = if a_max.is_finite() {
            0.5 * (a + a_max)
        } else {
            2.0 * a
        };
    }
    Ok(if prev_a > 0.0 {
        Search::Accepted(prev)
    } else {
        Search::Stalled
    })
}

/// Bracket `lo` satisfies sufficient decrease and has the lowest value seen.
fn zoom<F>(
    prob: &mut Problem<F>,
    cur: &Point,
    dir: &[f64],
    d0: f64,
    lo: (f64, Point, f64),
    hi: (f64, Point, f64),
) -> Result<Search>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let f0 = cur.f;
    let (mut a_lo, mut p_lo, mut d_lo) = lo;
    let (mut a_hi, mut f_hi, mut d_hi) = (hi.0, hi.1.f, hi.2);
    for _ in 0..MAX_LINE_SEARCH {
        let a = cubic_min(a_lo, p_lo.f, d_lo, a_hi, f_hi, d_hi);
        if (a_hi - a_lo).abs() <= 1e-16 * a_lo.abs().max(1.0) {
            break;
        }
        let p = match prob.eval(step_to(&cur.x, dir, a))? {
            Some(p) => p,
            None => {
                a_hi = a;
                f_hi = f64::INFINITY;
                d_hi = f64::INFINITY;
                continue;
            }
        };
        let dp = dot(&p.g, dir);
        if p.f > f0 + C1 * a * d0 || p.f >= p_lo.f {
            a_hi = a;
            f_hi = p.f;
            d_hi = dp;
            if !d_hi.is_finite() {
                d_hi = f64::INFINITY;
            }
        } else {
            if dp.abs() <= -C2 * d0 {
                return Ok(Search::Accepted(p));
            }
            if dp * (a_hi - a_lo) >= 0.0 {
                a_hi = a_lo;
                f_hi = p_lo.f;
                d_hi = d_lo;
            }
            a_lo = a;
            p_lo = p;
            d_lo = dp;
        }
    }
    Ok(if a_lo > 0.0 && p_lo.f < f0 {
        Search::Accepted(p_lo)
    } else {
        Search::Stalled
    })
}

/// Maximize `objective`, which returns `(value, gradient)`.
pub fn maximize<F>(objective: F, x0: Vec<f64>, config: &LbfgsConfig) -> Result<(Vec<f64>, SolveReport)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(config.tol > 0.0) || config.memory == 0 {
        return Err(Error::InvalidArgument(
            "optimizer needs tol > 0 and memory >= 1".into(),
        ));
    }
    let start = Instant::now();
    let mut prob = Problem {
        objective,
        evaluations: 0,
    };
    let mut cur = prob
        .eval(x0)?
        .ok_or_else(|| Error::Optimizer("objective is not finite at the starting point".into()))?;
    let mut history = vec![(-cur.f, norm(&cur.g))];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(config.memory);
    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0;

    while iterations < config.max_iter {
        let gnorm = norm(&cur.g);
        if gnorm <= config.tol {
            status = SolveStatus::Converged;
            break;
        }
        let dir = two_loop(&cur.g, &pairs);
        let a_init = if pairs.is_empty() {
            (1.0 / gnorm).min(1.0)
        } else {
            1.0
        };
        let next = match line_search(&mut prob, &cur, &dir, a_init)? {
            Search::Accepted(p) => p,
            Search::Failed => {
                status = SolveStatus::Failed;
                break;
            }
            Search::Stalled => {
                if pairs.is_empty() {
                    status = SolveStatus::Stalled;
                    break;
                }
                // Retry once from steepest descent before giving up.
                pairs.clear();
                continue;
            }
        };
        iterations += 1;
        let s: Vec<f64> = next.x.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.g.iter().zip(&cur.g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if pairs.len() == config.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        cur = next;
        history.push((-cur.f, norm(&cur.g)));
    }
    if status == SolveStatus::MaxIter && norm(&cur.g) <= config.tol {
        status = SolveStatus::Converged;
    }
    let grad_norm = norm(&cur.g);
    let report = SolveReport {
        final_value: -cur.f,
        grad_norm,
        iterations,
        evaluations: prob.evaluations,
        converged: status == SolveStatus::Converged,
        status,
        wall_time: start.elapsed().as_secs_f64(),
        history,
    };
    Ok((cur.x, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iter: usize,
}

const MIN_DAMPING: f64 = 1e-12;
const MAX_DAMPING: f64 = 1e8;

/// Maximize a concave `objective` by damped Newton steps.
///
/// `hessian` returns the row-major `p x p` Hessian. Each step solves
/// `(-H + lambda * s * I) d = grad` with `s` the largest diagonal entry of
/// `-H`, then backtracks until the Armijo condition holds. `lambda` starts
/// at zero, grows after short or failed steps and shrinks after full ones.
/// Iteration stops when the gradient norm reaches `tol` or the undamped
/// Newton decrement `grad . d` reaches `tol²`.
pub fn maximize_newton<F, H>(
    objective: F,
    mut hessian: H,
    x0: Vec<f64>,
    config: &NewtonConfig,
) -> Result<(Vec<f64>, SolveReport)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    H: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if !(config.tol > 0.0) {
        return Err(Error::InvalidArgument("optimizer needs tol > 0".into()));
    }
    let start = Instant::now();
    let mut prob = Problem {
        objective,
        evaluations: 0,
    };
    let mut cur = prob
        .eval(x0)?
        .ok_or_else(|| Error::Optimizer("objective is not finite at the starting point".into()))?;
    let p = cur.x.len();
    let mut history = vec![(-cur.f, norm(&cur.g))];
    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0;
    let mut lambda = 0.0;
    let grow = |l: f64, by: f64| if l == 0.0 { MIN_DAMPING } else { l * by };

    'outer: while iterations < config.max_iter {
        if norm(&cur.g) <= config.tol {
            status = SolveStatus::Converged;
            break;
        }
        let h = hessian(&cur.x)?;
        if h.len() != p * p {
            return Err(Error::DimensionMismatch {
                expected: p * p,
                got: h.len(),
            });
        }
        let scale = (0..p).map(|i| -h[i * p + i]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        loop {
            // cur.g is the negated gradient, so d solves (-H + damping) d = -cur.g.
            let a = nalgebra::DMatrix::from_fn(p, p, |i, j| {
                -h[i * p + j] + if i == j { lambda * scale } else { 0.0 }
            });
            let rhs = nalgebra::DVector::from_iterator(p, cur.g.iter().map(|v| -v));
            let dir = match a.cholesky() {
                Some(c) => c.solve(&rhs),
                None => {
                    lambda = grow(lambda, 10.0);
                    if lambda > MAX_DAMPING {
                        status = SolveStatus::Stalled;
                        break 'outer;
                    }
                    continue;
                }
            };
            let dir: Vec<f64> = dir.iter().copied().collect();
            let slope = dot(&cur.g, &dir);
            if lambda == 0.0 && -slope <= config.tol * config.tol {
                status = SolveStatus::Converged;
                break 'outer;
            }
            let mut step = 1.0;
            for _ in 0..MAX_HALVINGS {
                if let Some(next) = prob.eval(step_to(&cur.x, &dir, step))? {
                    if next.f <= cur.f + C1 * step * slope {
                        lambda = if step < 1.0 {
                            grow(lambda, 10.0)
                        } else if lambda * 0.1 < MIN_DAMPING {
                            0.0
                        } else {
                            lambda * 0.1
                        };
                        cur = next;
                        iterations += 1;
                        history.push((-cur.f, norm(&cur.g)));
                        continue 'outer;
                    }
                }
                step *= 0.5;
            }
            lambda = grow(lambda, 100.0);
            if lambda > MAX_DAMPING {
                status = SolveStatus::Stalled;
                break 'outer;
            }
        }
    }
    let grad_norm = norm(&cur.g);
    if status == SolveStatus::MaxIter && grad_norm <= config.tol {
        status = SolveStatus::Converged;
    }
    let report = SolveReport {
        final_value: -cur.f,
        grad_norm,
        iterations,
        evaluations: prob.evaluations,
        converged: status == SolveStatus::Converged,
        status,
        wall_time: start.elapsed().as_secs_f64(),
        history,
    };
    Ok((cur.x, report))
}

/// Quasi-Newton descent direction `-H g`.
fn two_loop(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let scale = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= scale);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}
