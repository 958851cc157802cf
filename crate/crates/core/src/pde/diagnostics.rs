use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::gbm::GbmPaths;

use super::grid::{Boundary, GridFunction, SpatialGrid};
use super::problem::GspdeProblem;
use super::solver::RandomField;

/// Largest boundary value a test function may take on a Dirichlet grid.
pub const SUPPORT_TOLERANCE: f64 = 1e-12;

/// Separable test function `φ(t, x) = ψ(t) χ(x)` sampled on the time slots.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    pub time: Vec<f64>,
    pub space: GridFunction,
}

impl TestFunction {
    pub fn new(time: Vec<f64>, space: GridFunction) -> Self {
        Self { time, space }
    }

    /// `χ(x) = (1 − |x − c|²/r²)³` inside the ball, zero outside.
    pub fn bump(grid: &SpatialGrid, center: f64, radius: f64, time: Vec<f64>) -> Self {
        let space = grid.sample(|x| {
            let r2: f64 = x.iter().map(|v| (v - center).powi(2)).sum::<f64>() / (radius * radius);
            if r2 < 1.0 {
                (1.0 - r2).powi(3)
            } else {
                0.0
            }
        });
        Self { time, space }
    }

    pub fn at(&self, slot: usize) -> GridFunction {
        self.space.iter().map(|v| self.time[slot] * v).collect()
    }
}

/// Per-path `|R|` with
/// `R = (u_0, φ_0) − (Ψ, φ_N) + Σ (u_{i+1}, φ_{i+1} − φ_i) + Σ Δt ℰ_h(ū_i, φ_i)
///      − Σ Δt (F_{i+1}, φ_i) − Σ (G_{i+1}, φ_i) · ΔB̄_i`,
/// `ū_i = (u_i + u_{i+1})/2`, the discrete weak form at `t = 0`.
pub fn weak_residual(u: &RandomField, phi: &TestFunction, problem: &GspdeProblem, paths: &GbmPaths) -> Result<Vec<f64>> {
    let grid = problem.grid();
    check_shapes(u, problem, paths)?;
    if phi.time.len() != problem.time().slots() || phi.space.len() != grid.len() {
        return Err(LabError::usage("test function does not match the grids"));
    }
    if grid.boundary == Boundary::Dirichlet && grid.boundary_max(&phi.space) > SUPPORT_TOLERANCE {
        return Err(LabError::usage(
            "test function support reaches the Dirichlet boundary",
        ));
    }
    let tg = problem.time();
    let n = tg.steps;
    let dt = tg.dt();
    let op = problem.operator();
    Ok((0..u.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut r = grid.inner(u.slice(p, 0), &phi.at(0)) - grid.inner(problem.psi(), &phi.at(n));
            for i in 0..n {
                let (ui, un) = (u.slice(p, i), u.slice(p, i + 1));
                let (pi, pn) = (phi.at(i), phi.at(i + 1));
                let dphi: Vec<f64> = pn.iter().zip(&pi).map(|(a, b)| a - b).collect();
                let mid: Vec<f64> = ui.iter().zip(un).map(|(a, b)| 0.5 * (a + b)).collect();
                let (f, g) = problem.reaction_terms(tg.time(i + 1), un);
                let db = paths.backward_increment(p, i);
                r += grid.inner(un, &dphi) + dt * op.energy(&mid, &pi) - dt * grid.inner(&f, &pi);
                for (j, gj) in g.iter().enumerate() {
                    r -= grid.inner(gj, &pi) * db[j];
                }
            }
            r.abs()
        })
        .collect())
}

/// `Φ` in the energy identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnergyFunctional {
    /// `Φ(y) = y²`.
    Square,
    /// `Φ(y) = y`.
    Identity,
}

impl EnergyFunctional {
    fn phi(self, y: f64) -> f64 {
        match self {
            EnergyFunctional::Square => y * y,
            EnergyFunctional::Identity => y,
        }
    }

    fn d1(self, y: f64) -> f64 {
        match self {
            EnergyFunctional::Square => 2.0 * y,
            EnergyFunctional::Identity => 1.0,
        }
    }

    fn d2(self, _y: f64) -> f64 {
        match self {
            EnergyFunctional::Square => 2.0,
            EnergyFunctional::Identity => 0.0,
        }
    }
}

/// Per-path `|E|` for the discretised Itô formula at `t = 0`:
/// `E = (Φ(u_0), 1) + Σ Δt ℰ_h(Φ'(ū_i), ū_i) − (Φ(Ψ), 1) − Σ Δt (Φ'(u_{i+1}), F)
///      − Σ (Φ'(u_{i+1}), G) · ΔB̄_i − ½ Σ Δt (Φ''(u_{i+1}) Gᵃ Gᵇ, 1)(ββᵀ)ᵃᵇ`.
pub fn energy_identity_residual(u: &RandomField, problem: &GspdeProblem, paths: &GbmPaths, phi: EnergyFunctional) -> Result<Vec<f64>> {
    check_shapes(u, problem, paths)?;
    let grid = problem.grid();
    let tg = problem.time();
    let n = tg.steps;
    let dt = tg.dt();
    let op = problem.operator();
    let ones = vec![1.0; grid.len()];
    let map = |v: &[f64], h: &dyn Fn(f64) -> f64| -> Vec<f64> { v.iter().map(|&y| h(y)).collect() };
    Ok((0..u.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut e = grid.inner(&map(u.slice(p, 0), &|y| phi.phi(y)), &ones)
                - grid.inner(&map(problem.psi(), &|y| phi.phi(y)), &ones);
            for i in 0..n {
                let (ui, un) = (u.slice(p, i), u.slice(p, i + 1));
                let mid: Vec<f64> = ui.iter().zip(un).map(|(a, b)| 0.5 * (a + b)).collect();
                let d1n = map(un, &|y| phi.d1(y));
                let d2n = map(un, &|y| phi.d2(y));
                let (f, g) = problem.reaction_terms(tg.time(i + 1), un);
                let db = paths.backward_increment(p, i);
                let cov = paths.covariance_at(i);
                e += dt * op.energy(&map(&mid, &|y| phi.d1(y)), &mid) - dt * grid.inner(&d1n, &f);
                for (j, gj) in g.iter().enumerate() {
                    e -= grid.inner(&d1n, gj) * db[j];
                }
                for a in 0..g.len() {
                    for b in 0..g.len() {
                        let c = cov[(a, b)];
                        if c == 0.0 {
                            continue;
                        }
                        let prod: Vec<f64> = (0..grid.len()).map(|k| d2n[k] * g[a][k] * g[b][k]).collect();
                        e -= 0.5 * dt * c * grid.inner(&prod, &ones);
                    }
                }
            }
            e.abs()
        })
        .collect())
}

fn check_shapes(u: &RandomField, problem: &GspdeProblem, paths: &GbmPaths) -> Result<()> {
    if u.grid() != problem.grid() || u.time() != problem.time() || paths.grid() != problem.time() {
        return Err(LabError::usage("field, problem and paths use different grids"));
    }
    if u.n_paths() != paths.n_paths() || u.control() != paths.control() {
        return Err(LabError::usage("field was not computed on these paths"));
    }
    Ok(())
}
