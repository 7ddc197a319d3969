//! Reference and competitor methods.

pub mod chang_cooper;
pub mod gaussian;
pub mod particles;

pub use chang_cooper::{chang_cooper_evolve, chang_cooper_snapshots, GridSolverConfig};
pub use gaussian::{
    ekf_predict, ekf_predict_update, gaussian_sum_filter_step, kalman_update, ukf_predict,
    ukf_predict_update, GaussianState, GaussianSum, UkfParams,
};
pub use particles::{
    bootstrap_pf_step, euler_maruyama_simulate, kde_density, BandwidthRule, KdeDensity,
    ParticleEnsemble,
};
