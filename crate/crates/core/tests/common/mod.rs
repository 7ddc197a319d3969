//! Test oracles that do not go through the dual machinery.

#![allow(dead_code)]

use rand::Rng;
use wgflow_core::model::rng_stream;
use wgflow_core::{DualObjectiveInstance, FreeEnergy, LbfgsConfig, PotentialSpec, Regularizer, RegularizerKind};

use ndarray::Array2;

/// A random discrete proximal problem on at most 12 atoms in 1-D.
#[derive(Debug, Clone)]
pub struct DiscreteProblem {
    pub atoms: Vec<f64>,
    pub nu: Vec<f64>,
    pub potential: PotentialSpec,
    pub beta: f64,
    pub gamma: f64,
    /// Weight of the free energy in the primal.
    pub tau: f64,
    pub kind: RegularizerKind,
}

impl DiscreteProblem {
    pub fn random(seed: u64, kind: RegularizerKind) -> Self {
        let mut rng = rng_stream(seed, 0);
        let n = rng.random_range(2..=12);
        let atoms: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let potential = if rng.random_bool(0.5) {
            PotentialSpec::quadratic(vec![rng.random_range(0.3..1.5)], vec![rng.random_range(-0.5..0.5)]).unwrap()
        } else {
            PotentialSpec::SineWell
        };
        Self {
            atoms,
            nu: raw.iter().map(|v| v / total).collect(),
            potential,
            beta: rng.random_range(0.5..2.0),
            gamma: rng.random_range(0.05..0.3),
            tau: rng.random_range(0.1..0.5),
            kind,
        }
    }

    pub fn n(&self) -> usize {
        self.atoms.len()
    }

    pub fn w(&self) -> Vec<f64> {
        self.atoms.iter().map(|&x| self.potential.value(&[x])).collect()
    }

    pub fn cost(&self, i: usize, j: usize) -> f64 {
        (self.atoms[i] - self.atoms[j]).powi(2)
    }

    pub fn instance(&self) -> DualObjectiveInstance {
        let atoms = Array2::from_shape_vec((self.n(), 1), self.atoms.clone()).unwrap();
        DualObjectiveInstance::discrete(
            atoms.view(),
            &self.nu,
            FreeEnergy::new(self.potential.clone(), self.beta).unwrap(),
            Regularizer::from_kind(self.kind),
            self.gamma,
            self.tau,
        )
        .unwrap()
    }

    /// `R(u)` written out directly.
    fn r(&self, u: f64) -> f64 {
        match self.kind {
            RegularizerKind::Entropy => {
                if u > 0.0 {
                    u * (u.ln() - 1.0)
                } else {
                    0.0
                }
            }
            RegularizerKind::L2 => u * u,
        }
    }

    /// `sum c pi + gamma sum R(pi) + tau sum_i [w_i mu_i + mu_i (ln mu_i - 1) / beta]`
    /// with `mu` the row sums of `pi`.
    pub fn primal_value(&self, pi: &[f64]) -> f64 {
        let n = self.n();
        let w = self.w();
        let mut v = 0.0;
        for i in 0..n {
            let mut mu = 0.0;
            for j in 0..n {
                let p = pi[i * n + j];
                v += self.cost(i, j) * p + self.gamma * self.r(p);
                mu += p;
            }
            if mu > 0.0 {
                v += self.tau * (w[i] * mu + mu * (mu.ln() - 1.0) / self.beta);
            }
        }
        v
    }

    fn primal_gradient(&self, pi: &[f64]) -> Vec<f64> {
        let n = self.n();
        let w = self.w();
        let mu: Vec<f64> = (0..n).map(|i| pi[i * n..(i + 1) * n].iter().sum()).collect();
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let p = pi[i * n + j];
                let dr = match self.kind {
                    RegularizerKind::Entropy => p.ln(),
                    RegularizerKind::L2 => 2.0 * p,
                };
                g[i * n + j] = self.cost(i, j) + self.gamma * dr + self.tau * (w[i] + mu[i].ln() / self.beta);
            }
        }
        g
    }

    /// Minimize the primal over couplings whose columns sum to `nu`.
    /// Returns the optimal coupling, row-major.
    pub fn solve_primal(&self) -> Vec<f64> {
        match self.kind {
            RegularizerKind::Entropy => self.mirror_descent(),
            RegularizerKind::L2 => self.projected_gradient(),
        }
    }

    /// Exponentiated gradient in log space, columns renormalized each step.
    fn mirror_descent(&self) -> Vec<f64> {
        let n = self.n();
        let eta = 1.0 / (self.gamma + self.tau / self.beta);
        let mut logp: Vec<f64> = (0..n * n).map(|k| (self.nu[k % n] / n as f64).ln()).collect();
        for _ in 0..2_000_000 {
            let pi: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
            let g = self.primal_gradient(&pi);
            // KKT: the gradient is constant down each column.
            let mut spread: f64 = 0.0;
            for j in 0..n {
                let col = (0..n).map(|i| g[i * n + j]);
                let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
                spread = spread.max(hi - lo);
            }
            if spread < 1e-13 {
                break;
            }
            for k in 0..n * n {
                logp[k] -= eta * g[k];
            }
            for j in 0..n {
                let m = (0..n).map(|i| logp[i * n + j]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..n).map(|i| (logp[i * n + j] - m).exp()).sum::<f64>().ln();
                let shift = self.nu[j].ln() - lse;
                (0..n).for_each(|i| logp[i * n + j] += shift);
            }
        }
        logp.iter().map(|v| v.exp()).collect()
    }

    /// Projected gradient with backtracking onto the scaled simplices.
    fn projected_gradient(&self) -> Vec<f64> {
        let n = self.n();
        let mut pi: Vec<f64> = (0..n * n).map(|k| self.nu[k % n] / n as f64).collect();
        let mut f = self.primal_value(&pi);
        let mut step = 1e-2;
        for _ in 0..2_000_000 {
            let g = self.primal_gradient(&pi);
            let mut accepted = None;
            for _ in 0..60 {
                let trial = self.project(&pi.iter().zip(&g).map(|(p, d)| p - step * d).collect::<Vec<_>>());
                let rows_ok = (0..n).all(|i| trial[i * n..(i + 1) * n].iter().sum::<f64>() > 0.0);
                if rows_ok {
                    let ft = self.primal_value(&trial);
                    let diff: f64 = trial.iter().zip(&pi).map(|(a, b)| (a - b) * (a - b)).sum();
                    let lin: f64 = trial.iter().zip(&pi).zip(&g).map(|((a, b), d)| (a - b) * d).sum();
                    if ft <= f + lin + diff / (2.0 * step) {
                        accepted = Some((trial, ft));
                        break;
                    }
                }
                step *= 0.5;
            }
            let Some((next, fn_)) = accepted else { break };
            let moved: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            pi = next;
            f = fn_;
            if moved / step < 1e-12 {
                break;
            }
            step *= 1.5;
        }
        pi
    }

    /// Euclidean projection of each column onto `{p >= 0, sum p = nu_j}`.
    fn project(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut out = v.to_vec();
        for j in 0..n {
            let mut col: Vec<f64> = (0..n).map(|i| v[i * n + j]).collect();
            col.sort_by(|a, b| b.total_cmp(a));
            let mut cum = 0.0;
            let mut theta = 0.0;
            for (k, &c) in col.iter().enumerate() {
                cum += c;
                let t = (cum - self.nu[j]) / (k + 1) as f64;
                if c - t > 0.0 {
                    theta = t;
                }
            }
            for i in 0..n {
                out[i * n + j] = (v[i * n + j] - theta).max(0.0);
            }
        }
        out
    }

    pub fn row_sums(&self, pi: &[f64]) -> Vec<f64> {
        let n = self.n();
        (0..n).map(|i| pi[i * n..(i + 1) * n].iter().sum()).collect()
    }
}

/// Maximize the discrete dual to high accuracy; returns coefficients and
/// the optimal value.
pub fn solve_dual(inst: &DualObjectiveInstance) -> (Vec<f64>, f64) {
    let cfg = LbfgsConfig {
        tol: 1e-11,
        max_iter: 20_000,
        memory: 20,
    };
    let p = inst.g_len() + inst.h_len();
    let (z, report) = wgflow_core::maximize(|z: &[f64]| inst.value_and_gradient_joint(z), vec![0.0; p], &cfg).unwrap();
    (z, report.final_value)
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}
