//! Grid discretisation of `L`, its Crank–Nicolson semigroup and the
//! mild-solution Picard solver for the stochastic PDE
//! `du + (Lu + f(u, ∇u)) dt + g(u, ∇u) · dB̄ = 0`, `u_T = Ψ`.

mod diagnostics;
mod grid;
mod operator;
mod problem;
mod solver;

pub use diagnostics::{energy_identity_residual, weak_residual, EnergyFunctional, TestFunction, SUPPORT_TOLERANCE};
pub use grid::{Boundary, GridFunction, SpatialGrid};
pub use operator::{discretize_operator, Operator, Semigroup};
pub use problem::{
    contraction_constants, ContractionConstants, GspdeData, GspdeProblem, InitialGuess, PicardConfig, BOUNDARY_TOLERANCE,
};
pub use solver::{hnorm_gamma_delta, homogeneous_field, picard_map, semigroup_for, solve_gspde_picard, RandomField, SolverReport};

pub(crate) use solver::exp_weight;

/// `P_τ v` with a fresh Crank–Nicolson semigroup of base step `dt_max`.
pub fn apply_semigroup(op: &Operator, v: &[f64], tau: f64, dt_max: f64) -> crate::Result<GridFunction> {
    Semigroup::new(op.clone(), dt_max)?.apply(v, tau)
}
