//! Numerical laboratory for G-Brownian motion driven equations.
//!
//! The crate is organised bottom-up:
//!
//! * [`scenario`] – finite volatility families, the G-function and sublinear
//!   expectations estimated as maxima over per-scenario Monte Carlo means.
//! * [`gbm`] – seeded Wiener drivers, G-Brownian paths under piecewise-constant
//!   controls and backward stochastic integrals.
//! * [`hunt`] – the divergence-form diffusion `X`, its martingale part `M` and
//!   forward integrals against `M`.
//! * [`pde`] – finite-volume discretisation of `L = div(a grad)`, the
//!   Crank–Nicolson semigroup and the mild-solution Picard solver for the
//!   stochastic PDE.
//! * [`bdsde`] – least-squares Monte Carlo solver for the backward doubly
//!   stochastic equation.
//! * [`verify`] – cross-module checks (representation, comparison, linear
//!   transport identity).

pub mod bdsde;
pub mod error;
pub mod gbm;
pub mod hunt;
pub mod pde;
pub mod reaction;
pub mod rng;
pub mod scenario;
pub mod stats;
pub mod verify;

pub use error::{LabError, Result};
