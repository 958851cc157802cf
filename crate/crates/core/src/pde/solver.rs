use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::gbm::{GbmPaths, TimeGrid};
use crate::scenario::ControlSchedule;

use super::grid::{GridFunction, SpatialGrid};
use super::operator::Semigroup;
use super::problem::{ContractionConstants, GspdeProblem, InitialGuess, PicardConfig};

/// Solution slices `u_{t_i}(·, ω)` for every path of one control schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomField {
    grid: SpatialGrid,
    time: TimeGrid,
    control: ControlSchedule,
    n_paths: usize,
    values: Vec<f64>,
}

impl RandomField {
    pub fn zeros(grid: SpatialGrid, time: TimeGrid, control: ControlSchedule, n_paths: usize) -> Self {
        Self {
            grid,
            time,
            control,
            n_paths,
            values: vec![0.0; n_paths * time.slots() * grid.len()],
        }
    }

    pub fn from_values(grid: SpatialGrid, time: TimeGrid, control: ControlSchedule, n_paths: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_paths * time.slots() * grid.len() {
            return Err(LabError::usage("random field values have the wrong length"));
        }
        Ok(Self {
            grid,
            time,
            control,
            n_paths,
            values,
        })
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn time(&self) -> TimeGrid {
        self.time
    }

    pub fn control(&self) -> &ControlSchedule {
        &self.control
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn slice(&self, path: usize, slot: usize) -> &[f64] {
        let n = self.grid.len();
        let o = (path * self.time.slots() + slot) * n;
        &self.values[o..o + n]
    }

    fn path_block_mut(&mut self, path: usize) -> &mut [f64] {
        let b = self.time.slots() * self.grid.len();
        &mut self.values[path * b..(path + 1) * b]
    }

    pub fn raw(&self) -> &[f64] {
        &self.values
    }

    pub fn sub(&self, other: &RandomField) -> Result<RandomField> {
        if self.values.len() != other.values.len() || self.grid != other.grid {
            return Err(LabError::usage("random fields have different shapes"));
        }
        Ok(RandomField {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
            ..self.clone()
        })
    }

    /// Maps every slice through `f`.
    pub fn map_values<F: Fn(f64) -> f64>(&self, f: F) -> RandomField {
        RandomField {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// CSV with header `path_id,scenario_id,t,x_index[,y_index],u`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let idx_cols = if self.grid.d == 1 { "x_index" } else { "x_index,y_index" };
        writeln!(w, "path_id,scenario_id,t,{idx_cols},u")?;
        let n = self.time.steps;
        for p in 0..self.n_paths {
            for s in 0..=n {
                let k_scn = self.control.scenario_at(s.min(n - 1));
                let t = self.time.time(s);
                for (k, v) in self.slice(p, s).iter().enumerate() {
                    let idx = self.grid.multi_index(k);
                    if self.grid.d == 1 {
                        writeln!(w, "{p},{k_scn},{t},{},{v}", idx[0])?;
                    } else {
                        writeln!(w, "{p},{k_scn},{t},{},{},{v}", idx[0], idx[1])?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// `‖u‖²_{γ,δ} = Ê ∫ e^{γs}(δ‖u_s‖² + ‖∇u_s‖²) ds`: exact exponential weight on
/// each step, trapezoidal in the integrand, `Ê` as the maximum over the family.
pub fn hnorm_gamma_delta(fields: &[RandomField], gamma: f64, delta: f64) -> f64 {
    fields
        .iter()
        .map(|u| {
            let g = &u.grid;
            let tg = u.time;
            let dens: Vec<f64> = (0..u.n_paths)
                .into_par_iter()
                .map(|p| {
                    let h: Vec<f64> = (0..tg.slots())
                        .map(|s| {
                            let v = u.slice(p, s);
                            delta * g.norm2(v) + g.grad_norm2(v)
                        })
                        .collect();
                    (0..tg.steps)
                        .map(|i| exp_weight(gamma, tg.time(i), tg.time(i + 1)) * 0.5 * (h[i] + h[i + 1]))
                        .sum::<f64>()
                })
                .collect();
            dens.iter().sum::<f64>() / dens.len().max(1) as f64
        })
        .fold(0.0, f64::max)
}

/// `∫_a^b e^{γs} ds`.
pub(crate) fn exp_weight(gamma: f64, a: f64, b: f64) -> f64 {
    if gamma == 0.0 {
        b - a
    } else {
        ((gamma * b).exp() - (gamma * a).exp()) / gamma
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverReport {
    pub constants: ContractionConstants,
    pub iterations: usize,
    /// `‖u^{n+1} − u^n‖²_{γ,δ}` per iteration.
    pub increment_norms: Vec<f64>,
    /// Successive quotients of `increment_norms`.
    pub ratios: Vec<f64>,
    /// `‖u^{n+1} − u^n‖_{γ,δ} / ‖u^{n+1}‖_{γ,δ}` at exit.
    pub final_relative_increment: f64,
    pub converged: bool,
}

/// Crank–Nicolson semigroup matched to the problem's time step.
pub fn semigroup_for(problem: &GspdeProblem, substeps: usize) -> Result<Semigroup> {
    let sub = substeps.max(1);
    Semigroup::new(problem.operator().clone(), problem.time().dt() / sub as f64)
}

/// One application of the mild-solution map to `prev` along `paths`:
/// `w_N = Ψ`, `w_i = P_Δt(w_{i+1} + F_{i+1} Δt + G_{i+1} · ΔB̄_i)` with the
/// reaction terms frozen at `prev`.
pub fn picard_map(problem: &GspdeProblem, sg: &Semigroup, prev: &RandomField, paths: &GbmPaths) -> Result<RandomField> {
    let tg = problem.time();
    if paths.grid() != tg || prev.time != tg {
        return Err(LabError::usage("time grids of the problem, the field and the paths differ"));
    }
    if paths.n_paths() != prev.n_paths {
        return Err(LabError::usage("field and path bundle have different path counts"));
    }
    let n = tg.steps;
    let dt = tg.dt();
    let nodes = problem.grid().len();
    let substeps = (dt / sg.dt()).round() as usize;
    let mut out = RandomField::zeros(*problem.grid(), tg, paths.control().clone(), paths.n_paths());
    let blocks: Vec<Result<Vec<f64>>> = (0..paths.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut block = vec![0.0; (n + 1) * nodes];
            block[n * nodes..].copy_from_slice(problem.psi());
            for i in (0..n).rev() {
                let (f, g) = problem.reaction_terms(tg.time(i + 1), prev.slice(p, i + 1));
                let db = paths.backward_increment(p, i);
                let mut w: GridFunction = block[(i + 1) * nodes..(i + 2) * nodes].to_vec();
                for k in 0..nodes {
                    let mut s = w[k] + f[k] * dt;
                    for (j, gj) in g.iter().enumerate() {
                        s += gj[k] * db[j];
                    }
                    w[k] = s;
                }
                for _ in 0..substeps {
                    w = sg.step(&w)?;
                }
                block[i * nodes..(i + 1) * nodes].copy_from_slice(&w);
            }
            Ok(block)
        })
        .collect();
    for (p, b) in blocks.into_iter().enumerate() {
        out.path_block_mut(p).copy_from_slice(&b?);
    }
    Ok(out)
}

/// `P_{T−t} Ψ` on every slot.
pub fn homogeneous_field(problem: &GspdeProblem, sg: &Semigroup, paths: &GbmPaths) -> Result<RandomField> {
    let tg = problem.time();
    let n = tg.steps;
    let nodes = problem.grid().len();
    let substeps = (tg.dt() / sg.dt()).round() as usize;
    let mut block = vec![0.0; (n + 1) * nodes];
    block[n * nodes..].copy_from_slice(problem.psi());
    for i in (0..n).rev() {
        let mut w = block[(i + 1) * nodes..(i + 2) * nodes].to_vec();
        for _ in 0..substeps {
            w = sg.step(&w)?;
        }
        block[i * nodes..(i + 1) * nodes].copy_from_slice(&w);
    }
    let mut out = RandomField::zeros(*problem.grid(), tg, paths.control().clone(), paths.n_paths());
    for p in 0..paths.n_paths() {
        out.path_block_mut(p).copy_from_slice(&block);
    }
    Ok(out)
}

/// Picard iteration of the mild-solution map over a family of path bundles
/// (one per control schedule), monitored in `‖·‖_{γ,δ}`.
pub fn solve_gspde_picard(problem: &GspdeProblem, cfg: &PicardConfig, family: &[GbmPaths]) -> Result<(Vec<RandomField>, SolverReport)> {
    if family.is_empty() {
        return Err(LabError::usage("no path bundles to solve on"));
    }
    if cfg.max_iter == 0 {
        return Err(LabError::usage("max_iter must be at least 1"));
    }
    let constants = problem.contraction(cfg.epsilon)?;
    let sg = semigroup_for(problem, cfg.substeps)?;
    let mut u: Vec<RandomField> = match cfg.initial_guess {
        InitialGuess::Zero => family
            .iter()
            .map(|b| RandomField::zeros(*problem.grid(), problem.time(), b.control().clone(), b.n_paths()))
            .collect(),
        InitialGuess::Homogeneous => family
            .iter()
            .map(|b| homogeneous_field(problem, &sg, b))
            .collect::<Result<_>>()?,
    };
    let mut norms: Vec<f64> = Vec::new();
    let mut ratios = Vec::new();
    for it in 1..=cfg.max_iter {
        let next: Vec<RandomField> = family
            .iter()
            .zip(&u)
            .map(|(b, prev)| picard_map(problem, &sg, prev, b))
            .collect::<Result<_>>()?;
        let diff: Vec<RandomField> = next.iter().zip(&u).map(|(a, b)| a.sub(b)).collect::<Result<_>>()?;
        let hd = hnorm_gamma_delta(&diff, constants.rate, constants.delta);
        let hu = hnorm_gamma_delta(&next, constants.rate, constants.delta);
        if let Some(&last) = norms.last() {
            if last > 0.0 {
                ratios.push(hd / last);
            }
        }
        norms.push(hd);
        u = next;
        let rel = if hu > 0.0 { (hd / hu).sqrt() } else { 0.0 };
        if hd == 0.0 || rel <= cfg.tol_rel {
            return Ok((
                u,
                SolverReport {
                    constants,
                    iterations: it,
                    increment_norms: norms,
                    ratios,
                    final_relative_increment: rel,
                    converged: true,
                },
            ));
        }
    }
    Err(LabError::NonConvergence {
        iterations: cfg.max_iter,
        ratios,
    })
}
