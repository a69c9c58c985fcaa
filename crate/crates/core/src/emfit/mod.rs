//! Penalized EM for the Markov-switching additive ODE model.

mod fit;
mod mstep;
mod params;
mod posterior;

pub use fit::{
    complete_loglik, default_lambda_grid, fit, fit_grouped, fit_theta_known_states, lambda_path_fit,
    lambda_path_fit_lenient, FitConfig, FitResult, GroupMember, GroupedFit, DEFAULT_GRID_SIZE, GRID_LOG_RANGE,
};
pub use mstep::{
    e_step_statistics, kkt_residuals, m_step_q, m_step_sigma, m_step_theta, penalized_objective, penalty, penalty_weight, EStepStats,
    InnerSolver, KktReport, ThetaStep, DEGENERATE_WEIGHT,
};
pub use params::{edge_set, init_params, Edge, ModelParams};
pub(crate) use params::{block_norm, edges_of};
pub use posterior::{emission_logdensity, forward_backward, truncated_posterior, Design, Posterior};

/// Lower bound on the fitted noise variance.
pub const SIGMA2_FLOOR: f64 = 1e-12;

/// Lower bound on fitted off-diagonal rates, keeping the chain irreducible.
pub const RATE_FLOOR: f64 = 1e-10;
