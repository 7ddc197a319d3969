//! Regularized Wasserstein gradient flows through a smoothed dual
//! stochastic program over RKHS potentials.

// Negated comparisons below deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod dual;
pub mod error;
pub mod experiments;
pub mod filtering;
pub mod flow;
pub mod free_energy;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod regularizer;
pub mod rkhs;

pub use dual::{Basis, DualDiagnostics, DualEval, DualObjectiveInstance, RkhsDensity};
pub use error::{Error, Result};
pub use flow::{evolve, evolve_with, gradient_step, EvolveOptions, FlowStep};
pub use free_energy::{FreeEnergy, PotentialSpec};
pub use model::{
    BasisMode, CenterPlacement, Density, DensityKind, DiagGaussian, Domain, FlowConfig,
    GaussianMixture, Grid, GridAxis, GridDensity, ProposalSpec, SamplePairSet, Sampler,
    SharedDensity, SolverKind, UniformDensity,
};
pub use optimizer::{maximize, maximize_newton, LbfgsConfig, NewtonConfig, SolveReport, SolveStatus};
pub use regularizer::{Legendre, Regularizer, RegularizerKind};
pub use rkhs::{DualPotential, KernelSpec};
