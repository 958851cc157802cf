//! Cross-module checks: the doubly stochastic representation, the
//! comparison theorem and the linear transport identity.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::bdsde::{solve_gbdsde_picard, BdsdeConfig, BdsdeProblem, BdsdeSolution, Ensemble};
use crate::error::{LabError, Result};
use crate::gbm::{build_family, DriverPaths, GbmPaths, TimeGrid};
use crate::hunt::{simulate_hunt_with_driver, CoefficientField, HuntPaths, InitialLaw};
use crate::pde::{solve_gspde_picard, GspdeData, GspdeProblem, PicardConfig, RandomField, SpatialGrid};
use crate::reaction::Reaction;
use crate::rng::Purpose;
use crate::scenario::{ControlSchedule, ScenarioSet};
use crate::stats::observed_order;

/// Default boundary collar of the comparison check, as a fraction of `R`.
pub const DEFAULT_COLLAR: f64 = 0.05;

/// One line of a verification report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub check: String,
    pub scenario_id: Option<usize>,
    pub metric: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    pub fn new(check: &str, scenario_id: Option<usize>, metric: impl Into<String>, value: f64, tolerance: f64, pass: bool) -> Self {
        Self {
            check: check.to_string(),
            scenario_id,
            metric: metric.into(),
            value,
            tolerance,
            pass,
        }
    }
}

/// Summary CSV with header `check,scenario_id,metric,value,tolerance,pass`.
pub fn write_rows_csv<W: Write>(rows: &[CheckRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "check,scenario_id,metric,value,tolerance,pass")?;
    for r in rows {
        let sid = r.scenario_id.map(|s| s.to_string()).unwrap_or_default();
        writeln!(w, "{},{sid},{},{},{},{}", r.check, r.metric, r.value, r.tolerance, r.pass)?;
    }
    Ok(())
}

/// Brownian drivers for the G-Brownian bundles and the diffusion ensemble,
/// sampled once on the finest grid and coarsened for every other level.
#[derive(Debug, Clone)]
pub struct SharedRandomness {
    base: TimeGrid,
    levels: usize,
    set: ScenarioSet,
    schedules: Vec<ControlSchedule>,
    init: InitialLaw,
    b_driver: DriverPaths,
    x_driver: DriverPaths,
}

impl SharedRandomness {
    /// `schedules` live on `base`; level `k` has `2^k` times as many steps.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        base: TimeGrid,
        levels: usize,
        set: ScenarioSet,
        schedules: Vec<ControlSchedule>,
        init: InitialLaw,
        d: usize,
        n_b: usize,
        n_x: usize,
        seed: u64,
    ) -> Result<Self> {
        if levels == 0 || levels > 8 {
            return Err(LabError::usage("refinement levels must be between 1 and 8"));
        }
        if schedules.is_empty() {
            return Err(LabError::usage("at least one control schedule is required"));
        }
        if schedules.iter().any(|s| s.len() != base.steps) {
            return Err(LabError::usage("control schedules must match the base grid"));
        }
        let fine = base.refine(1 << (levels - 1));
        Ok(Self {
            base,
            levels,
            b_driver: DriverPaths::sample(fine, set.l(), n_b, seed, Purpose::GbmDriver)?,
            x_driver: DriverPaths::sample(fine, d, n_x, seed, Purpose::HuntDriver)?,
            set,
            schedules,
            init,
        })
    }

    /// All constant schedules of `set`.
    pub fn constant_schedules(set: &ScenarioSet, steps: usize) -> Result<Vec<ControlSchedule>> {
        (0..set.len()).map(|k| ControlSchedule::constant(k, set, steps)).collect()
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn seed(&self) -> u64 {
        self.b_driver.seed()
    }

    pub fn scenarios(&self) -> &ScenarioSet {
        &self.set
    }

    pub fn time(&self, level: usize) -> TimeGrid {
        self.base.refine(1 << level)
    }

    fn driver_at(&self, driver: &DriverPaths, level: usize) -> Result<DriverPaths> {
        if level >= self.levels {
            return Err(LabError::usage(format!("level {level} exceeds the {} sampled levels", self.levels)));
        }
        driver.coarsen(1 << (self.levels - 1 - level))
    }

    pub fn family(&self, level: usize) -> Result<Vec<GbmPaths>> {
        let driver = self.driver_at(&self.b_driver, level)?;
        let schedules: Vec<ControlSchedule> = self.schedules.iter().map(|s| s.refine(1 << level)).collect();
        build_family(&driver, &schedules, &self.set)
    }

    pub fn hunt(&self, field: &CoefficientField, level: usize) -> Result<HuntPaths> {
        simulate_hunt_with_driver(field, &self.init, &self.driver_at(&self.x_driver, level)?)
    }
}

fn slot_of(time: TimeGrid, t: f64) -> Result<usize> {
    let s = t / time.dt();
    let r = s.round();
    if (s - r).abs() > 1e-9 || r < 0.0 || r as usize > time.steps {
        return Err(LabError::usage(format!("checkpoint {t} is not a grid time")));
    }
    Ok(r as usize)
}

fn check_provenance(u: &[RandomField], sol: &BdsdeSolution, paths: &HuntPaths, gbm: &[GbmPaths]) -> Result<()> {
    if gbm.is_empty() || u.len() != gbm.len() {
        return Err(LabError::usage("one solved field per G-Brownian bundle is required"));
    }
    if sol.seeds() != (gbm[0].seed(), paths.seed()) {
        return Err(LabError::usage(format!(
            "randomness provenance differs: solution seeds {:?}, paths ({}, {})",
            sol.seeds(),
            gbm[0].seed(),
            paths.seed()
        )));
    }
    if sol.n_x() != paths.n_paths() || sol.time() != paths.grid() {
        return Err(LabError::usage("solution and diffusion ensemble differ in shape"));
    }
    for (k, (f, b)) in u.iter().zip(gbm).enumerate() {
        if f.control() != b.control() || f.n_paths() != b.n_paths() || f.time() != b.grid() || b.grid() != sol.time() {
            return Err(LabError::usage(format!("bundle {k}: field and G-Brownian paths differ in provenance")));
        }
    }
    let expected = gbm.iter().map(|b| b.n_paths()).sum::<usize>();
    if sol.blocks().len() != expected {
        return Err(LabError::usage("solution blocks do not match the G-Brownian bundles"));
    }
    Ok(())
}

/// Relative errors at the checkpoints for one bundle.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioErrors {
    pub scenario_id: usize,
    pub y_rel_rms: Vec<f64>,
    pub z_rel_rms: Vec<f64>,
    pub z_sigma_rel_rms: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RepresentationLevel {
    pub steps: usize,
    pub per_scenario: Vec<ScenarioErrors>,
    /// Worst case over bundles, per checkpoint.
    pub worst_y: Vec<f64>,
    pub worst_z: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RepresentationReport {
    pub checkpoints: Vec<f64>,
    pub tolerance: f64,
    /// Coarsest level first.
    pub levels: Vec<RepresentationLevel>,
}

impl RepresentationReport {
    pub fn within_tolerance(&self) -> bool {
        self.levels.first().is_some_and(|l| l.worst_y.iter().all(|v| *v <= self.tolerance))
    }

    /// `Y` errors do not grow from one level to the next at any checkpoint.
    pub fn non_increasing(&self) -> bool {
        self.levels
            .windows(2)
            .all(|w| w[1].worst_y.iter().zip(&w[0].worst_y).all(|(f, c)| f <= c))
    }

    pub fn rows(&self) -> Vec<CheckRow> {
        let mut rows = Vec::new();
        if let Some(base) = self.levels.first() {
            for s in &base.per_scenario {
                for (c, t) in self.checkpoints.iter().enumerate() {
                    let v = s.y_rel_rms[c];
                    rows.push(CheckRow::new(
                        "representation",
                        Some(s.scenario_id),
                        format!("y_rel_rms@t={t}"),
                        v,
                        self.tolerance,
                        v <= self.tolerance,
                    ));
                    rows.push(CheckRow::new(
                        "representation",
                        Some(s.scenario_id),
                        format!("z_rel_rms@t={t}"),
                        s.z_rel_rms[c],
                        f64::INFINITY,
                        true,
                    ));
                }
            }
        }
        for w in self.levels.windows(2) {
            for (c, t) in self.checkpoints.iter().enumerate() {
                let (coarse, fine) = (w[0].worst_y[c], w[1].worst_y[c]);
                rows.push(CheckRow::new(
                    "representation",
                    None,
                    format!("y_rel_rms_refined@t={t};N={}", w[1].steps),
                    fine,
                    coarse,
                    fine <= coarse,
                ));
            }
        }
        rows
    }
}

fn rel(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        (num / den).sqrt()
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Relative RMS of `u(t, X_t) − Y_t` and `∇u(t, X_t) − Z_t` along shared
/// paths at the given checkpoints (one level).
pub fn check_representation(
    u: &[RandomField],
    sol: &BdsdeSolution,
    paths: &HuntPaths,
    gbm: &[GbmPaths],
    field: &CoefficientField,
    checkpoints: &[f64],
    tolerance: f64,
) -> Result<RepresentationReport> {
    check_provenance(u, sol, paths, gbm)?;
    let time = sol.time();
    let slots: Vec<usize> = checkpoints.iter().map(|&t| slot_of(time, t)).collect::<Result<_>>()?;
    let d = sol.dim();
    let n_x = sol.n_x();
    let mut acc = vec![vec![[0.0f64; 6]; slots.len()]; gbm.len()];
    let per_block: Vec<Result<Vec<[f64; 6]>>> = sol
        .blocks()
        .par_iter()
        .enumerate()
        .map(|(bi, blk)| {
            let field_u = &u[blk.bundle];
            let grid = field_u.grid();
            slots
                .iter()
                .map(|&s| {
                    let us = field_u.slice(blk.b_path, s);
                    let grad = grid.gradient(us);
                    let mut a = [0.0; 6];
                    for x in 0..n_x {
                        let pos = paths.x(x, s);
                        let uv = grid.interpolate(us, pos);
                        let gv = grid.interpolate_gradient(&grad, pos);
                        let y = sol.y(bi, x, s);
                        let z = sol.z(bi, x, s);
                        a[0] += (uv - y).powi(2);
                        a[1] += uv * uv;
                        let sig = field.sigma(pos)?;
                        for c in 0..d {
                            a[2] += (gv[c] - z[c]).powi(2);
                            a[3] += gv[c] * gv[c];
                            let ws: f64 = (0..d).map(|r| (gv[r] - z[r]) * sig[(r, c)]).sum();
                            let us_: f64 = (0..d).map(|r| gv[r] * sig[(r, c)]).sum();
                            a[4] += ws * ws;
                            a[5] += us_ * us_;
                        }
                    }
                    Ok(a)
                })
                .collect()
        })
        .collect();
    for (blk, r) in sol.blocks().iter().zip(per_block) {
        for (c, a) in r?.into_iter().enumerate() {
            for k in 0..6 {
                acc[blk.bundle][c][k] += a[k];
            }
        }
    }
    let per_scenario: Vec<ScenarioErrors> = acc
        .iter()
        .enumerate()
        .map(|(k, a)| ScenarioErrors {
            scenario_id: k,
            y_rel_rms: a.iter().map(|v| rel(v[0], v[1])).collect(),
            z_rel_rms: a.iter().map(|v| rel(v[2], v[3])).collect(),
            z_sigma_rel_rms: a.iter().map(|v| rel(v[4], v[5])).collect(),
        })
        .collect();
    let worst = |f: fn(&ScenarioErrors) -> &Vec<f64>| -> Vec<f64> {
        (0..slots.len())
            .map(|c| per_scenario.iter().map(|s| f(s)[c]).fold(0.0, f64::max))
            .collect()
    };
    let level = RepresentationLevel {
        steps: time.steps,
        worst_y: worst(|s| &s.y_rel_rms),
        worst_z: worst(|s| &s.z_rel_rms),
        per_scenario,
    };
    Ok(RepresentationReport {
        checkpoints: checkpoints.to_vec(),
        tolerance,
        levels: vec![level],
    })
}

/// Solver settings of a representation study.
#[derive(Debug, Clone, Copy)]
pub struct RepresentationSettings<'a> {
    pub grid: SpatialGrid,
    pub pde: &'a PicardConfig,
    pub bdsde: &'a BdsdeConfig,
    pub checkpoints: &'a [f64],
    pub tolerance: f64,
}

/// Solves the stochastic PDE and the backward equation on every level of
/// `rand` and compares them.
pub fn representation_study(problem: &BdsdeProblem, rand: &SharedRandomness, s: RepresentationSettings) -> Result<RepresentationReport> {
    let mut levels = Vec::new();
    for level in 0..rand.levels() {
        let p = problem.with_time(rand.time(level))?;
        let gspde = p.to_gspde(s.grid)?;
        let family = rand.family(level)?;
        let x = rand.hunt(p.field(), level)?;
        let (u, _) = solve_gspde_picard(&gspde, s.pde, &family)?;
        let sol = solve_gbdsde_picard(
            &p,
            Ensemble {
                bundles: &family,
                x: &x,
            },
            s.bdsde,
        )?;
        let r = check_representation(&u, &sol, &x, &family, p.field(), s.checkpoints, s.tolerance)?;
        levels.extend(r.levels);
    }
    Ok(RepresentationReport {
        checkpoints: s.checkpoints.to_vec(),
        tolerance: s.tolerance,
        levels,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    /// `min(u′ − u)` over interior nodes, slots, paths and bundles.
    pub min_gap: f64,
    pub per_scenario_min_gap: Vec<f64>,
    /// `max |u_h − u_{h/2}|` over both problems (Δt and Δx halved).
    pub eps_grid: f64,
    /// Lower bound the gap is compared against (`expected − ε_grid`).
    pub expected: f64,
    pub collar: f64,
}

impl ComparisonReport {
    pub fn holds(&self) -> bool {
        self.min_gap >= self.expected - self.eps_grid
    }

    pub fn rows(&self, name: &str) -> Vec<CheckRow> {
        let mut rows: Vec<CheckRow> = self
            .per_scenario_min_gap
            .iter()
            .enumerate()
            .map(|(k, g)| {
                CheckRow::new(
                    name,
                    Some(k),
                    "min_gap",
                    *g,
                    self.expected - self.eps_grid,
                    *g >= self.expected - self.eps_grid,
                )
            })
            .collect();
        rows.push(CheckRow::new(name, None, "eps_grid", self.eps_grid, f64::INFINITY, true));
        rows
    }
}

const LATTICE: [f64; 7] = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];

fn check_ordering(a: &GspdeProblem, b: &GspdeProblem) -> Result<()> {
    let (da, db) = (a.data(), b.data());
    if da.g != db.g || da.sigma_weighted_gradient != db.sigma_weighted_gradient {
        return Err(LabError::usage("comparison requires a shared g"));
    }
    if da.grid != db.grid || da.time != db.time || da.scenarios != db.scenarios {
        return Err(LabError::usage("comparison requires identical grids and scenarios"));
    }
    for (k, (pa, pb)) in a.psi().iter().zip(b.psi()).enumerate() {
        if pa > pb {
            return Err(LabError::usage(format!("Ψ ≤ Ψ′ fails at node {k}")));
        }
    }
    let grid = &da.grid;
    let d = grid.d;
    let zs: Vec<Vec<f64>> = if d == 1 {
        LATTICE.iter().map(|&z| vec![z]).collect()
    } else {
        LATTICE.iter().flat_map(|&z1| LATTICE.iter().map(move |&z2| vec![z1, z2])).collect()
    };
    for s in 0..da.time.slots() {
        let t = da.time.time(s);
        for k in 0..grid.len() {
            let x = grid.coord(k);
            for &y in &LATTICE {
                for z in &zs {
                    if da.f.eval(t, &x, y, z) > db.f.eval(t, &x, y, z) {
                        return Err(LabError::usage(format!("f ≤ f′ fails at t = {t}, x = {x:?}, y = {y}, z = {z:?}")));
                    }
                }
            }
        }
    }
    Ok(())
}

fn max_refinement_gap(coarse: &[RandomField], fine: &[RandomField]) -> f64 {
    let mut worst = 0.0f64;
    for (c, f) in coarse.iter().zip(fine) {
        let (gc, gf) = (c.grid(), f.grid());
        for p in 0..c.n_paths() {
            for s in 0..c.time().slots() {
                let (uc, uf) = (c.slice(p, s), f.slice(p, 2 * s));
                for k in 0..gc.len() {
                    let idx = gc.multi_index(k);
                    let fk = gf.node([2 * idx[0], 2 * idx[1]]);
                    worst = worst.max((uc[k] - uf[fk]).abs());
                }
            }
        }
    }
    worst
}

/// Solves both problems on shared randomness (levels 0 and 1 of `rand`) and
/// reports `min(u′ − u)` away from the boundary together with `ε_grid`.
pub fn check_comparison(
    a: &GspdeProblem,
    b: &GspdeProblem,
    rand: &SharedRandomness,
    cfg: &PicardConfig,
    collar_fraction: f64,
    expected: f64,
) -> Result<ComparisonReport> {
    if rand.levels() < 2 {
        return Err(LabError::usage("comparison needs two refinement levels for ε_grid"));
    }
    if a.time() != rand.time(0) {
        return Err(LabError::usage("problem time grid differs from the shared randomness"));
    }
    check_ordering(a, b)?;
    let family = rand.family(0)?;
    let fine_family = rand.family(1)?;
    let (ua, _) = solve_gspde_picard(a, cfg, &family)?;
    let (ub, _) = solve_gspde_picard(b, cfg, &family)?;
    for (u, bundle) in ua.iter().zip(&family) {
        for p in 0..bundle.n_paths() {
            for s in 0..a.time().slots() {
                let t = a.time().time(s);
                let (fa, _) = a.reaction_terms(t, u.slice(p, s));
                let (fb, _) = b.reaction_terms(t, u.slice(p, s));
                if let Some(k) = (0..fa.len()).find(|&k| fa[k] > fb[k]) {
                    return Err(LabError::usage(format!("f ≤ f′ fails along the solution at node {k}, t = {t}")));
                }
            }
        }
    }
    let grid = *a.grid();
    let collar = collar_fraction * grid.half_width;
    let interior = grid.interior_with_collar(collar);
    let per_scenario_min_gap: Vec<f64> = ua
        .iter()
        .zip(&ub)
        .map(|(fa, fb)| {
            let mut m = f64::INFINITY;
            for p in 0..fa.n_paths() {
                for s in 0..fa.time().slots() {
                    let (x, y) = (fa.slice(p, s), fb.slice(p, s));
                    for &k in &interior {
                        m = m.min(y[k] - x[k]);
                    }
                }
            }
            m
        })
        .collect();
    let fine_time = rand.time(1);
    let fine_grid = grid.refine();
    let fa = a.with_grids(fine_grid, fine_time)?;
    let fb = b.with_grids(fine_grid, fine_time)?;
    let (ua_f, _) = solve_gspde_picard(&fa, cfg, &fine_family)?;
    let (ub_f, _) = solve_gspde_picard(&fb, cfg, &fine_family)?;
    let eps_grid = max_refinement_gap(&ua, &ua_f).max(max_refinement_gap(&ub, &ub_f));
    Ok(ComparisonReport {
        min_gap: per_scenario_min_gap.iter().copied().fold(f64::INFINITY, f64::min),
        per_scenario_min_gap,
        eps_grid,
        expected,
        collar,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TransportLevel {
    pub steps: usize,
    /// Relative RMS of the residual at `t = 0`, per bundle.
    pub rel_rms: Vec<f64>,
    pub worst: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TransportReport {
    pub tolerance: f64,
    pub levels: Vec<TransportLevel>,
    /// Observed order of the worst residual under Δt-halving.
    pub order: Option<f64>,
}

impl TransportReport {
    pub fn holds(&self) -> bool {
        let base = self.levels.first().is_some_and(|l| l.worst <= self.tolerance);
        let decays = self.levels.windows(2).all(|w| w[1].worst <= w[0].worst);
        base && decays
    }

    pub fn rows(&self) -> Vec<CheckRow> {
        let mut rows = Vec::new();
        if let Some(l) = self.levels.first() {
            for (k, v) in l.rel_rms.iter().enumerate() {
                rows.push(CheckRow::new("linear-transport", Some(k), "residual_rel_rms", *v, self.tolerance, *v <= self.tolerance));
            }
        }
        for w in self.levels.windows(2) {
            rows.push(CheckRow::new(
                "linear-transport",
                None,
                format!("residual_refined@N={}", w[1].steps),
                w[1].worst,
                w[0].worst,
                w[1].worst <= w[0].worst,
            ));
        }
        rows
    }
}

/// Per-path residual `u_0(X_0) − [Σ g_{i+1}(X_{i+1}) · ΔB̄_i − Σ ∇u_i(X_i) · ΔM_i]`
/// with `u` the solution of `du + Lu dt + g · dB̄ = 0`, `u_T = 0`. Ordered
/// `[path][x]`; also returns the values `u_0(X_0)`.
pub fn transport_residuals(u: &RandomField, g: &[Reaction], paths: &HuntPaths, gbm: &GbmPaths) -> Result<(Vec<f64>, Vec<f64>)> {
    if u.time() != paths.grid() || u.time() != gbm.grid() || u.n_paths() != gbm.n_paths() || u.control() != gbm.control() {
        return Err(LabError::usage("field, diffusion paths and G-Brownian paths differ in provenance"));
    }
    if g.len() != gbm.l() {
        return Err(LabError::usage("g and the G-Brownian paths differ in dimension"));
    }
    let time = u.time();
    let grid = u.grid();
    let n = time.steps;
    let zero = vec![0.0; grid.d];
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..u.n_paths())
        .into_par_iter()
        .map(|p| {
            let grads: Vec<_> = (0..n).map(|i| grid.gradient(u.slice(p, i))).collect();
            let mut res = Vec::with_capacity(paths.n_paths());
            let mut lhs = Vec::with_capacity(paths.n_paths());
            for x in 0..paths.n_paths() {
                let mut rhs = 0.0;
                for i in 0..n {
                    let db = gbm.backward_increment(p, i);
                    let xn = paths.x(x, i + 1);
                    let t = time.time(i + 1);
                    rhs += g.iter().zip(db).map(|(gj, b)| gj.eval(t, xn, 0.0, &zero) * b).sum::<f64>();
                    let gu = grid.interpolate_gradient(&grads[i], paths.x(x, i));
                    rhs -= gu.iter().zip(paths.dm(x, i)).map(|(a, b)| a * b).sum::<f64>();
                }
                let u0 = grid.interpolate(u.slice(p, 0), paths.x(x, 0));
                lhs.push(u0);
                res.push(u0 - rhs);
            }
            (res, lhs)
        })
        .collect();
    let mut res = Vec::new();
    let mut lhs = Vec::new();
    for (r, l) in rows {
        res.extend(r);
        lhs.extend(l);
    }
    Ok((res, lhs))
}

/// Linear transport identity along shared paths on every level of `rand`.
pub fn check_linear_transport(
    g: &[Reaction],
    field: &CoefficientField,
    grid: SpatialGrid,
    rand: &SharedRandomness,
    cfg: &PicardConfig,
    tolerance: f64,
) -> Result<TransportReport> {
    let mut levels = Vec::new();
    for level in 0..rand.levels() {
        let time = rand.time(level);
        let problem = GspdeProblem::new(GspdeData {
            grid,
            time,
            field: field.clone(),
            scenarios: rand.scenarios().clone(),
            terminal: Reaction::Zero {},
            f: Reaction::Zero {},
            g: g.to_vec(),
            sigma_weighted_gradient: false,
        })?;
        let family = rand.family(level)?;
        let x = rand.hunt(field, level)?;
        let (u, _) = solve_gspde_picard(&problem, cfg, &family)?;
        let mut rel_rms = Vec::new();
        for (uk, bk) in u.iter().zip(&family) {
            let (res, lhs) = transport_residuals(uk, g, &x, bk)?;
            let num: f64 = res.iter().map(|r| r * r).sum();
            let den: f64 = lhs.iter().map(|r| r * r).sum();
            rel_rms.push(rel(num, den));
        }
        levels.push(TransportLevel {
            steps: time.steps,
            worst: rel_rms.iter().copied().fold(0.0, f64::max),
            rel_rms,
        });
    }
    let worst: Vec<f64> = levels.iter().map(|l| l.worst).collect();
    let order = (worst.len() >= 2 && worst.iter().all(|w| *w > 0.0)).then(|| observed_order(&worst));
    Ok(TransportReport { tolerance, levels, order })
}
