//! Backward doubly stochastic equations solved by least-squares Monte Carlo.
//!
//! Each block pairs one path of a G-Brownian bundle with the shared
//! ensemble of diffusion paths; conditional expectations are regressions
//! over that ensemble with the frozen `B` values as constants.

mod regression;
mod solver;

pub use regression::{extract_z, regress_conditional, BasisKind, Predictor, RegressionBasis, MIN_SAMPLES_PER_FUNCTION};
pub use solver::{
    delta_norm, product_rule_residual, solve_gbdsde_picard, solve_linear_bdsde, solve_linear_state_free, BdsdeConfig,
    BdsdeProblem, BdsdeReport, BdsdeSolution, BlockId, Ensemble,
};
