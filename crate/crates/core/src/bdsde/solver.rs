use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::gbm::{GbmPaths, TimeGrid};
use crate::hunt::{CoefficientField, HuntPaths};
use crate::pde::{contraction_constants, exp_weight, ContractionConstants, GspdeData, GspdeProblem, SpatialGrid};
use crate::reaction::{lipschitz_constants, LipschitzConstants, Reaction};
use crate::scenario::ScenarioSet;

use super::regression::{extract_z, regress_conditional, RegressionBasis};

/// `Y_t = φ(X_T) + ∫ f ds + ∫ g · dB̄ − ∫ Z · dM` with drivers evaluated at
/// `(s, X_s, Y_s, Z_s σ(X_s))`.
#[derive(Debug, Clone)]
pub struct BdsdeProblem {
    terminal: Reaction,
    f: Reaction,
    g: Vec<Reaction>,
    field: CoefficientField,
    scenarios: ScenarioSet,
    time: TimeGrid,
    constants: LipschitzConstants,
}

impl BdsdeProblem {
    pub fn new(
        terminal: Reaction,
        f: Reaction,
        g: Vec<Reaction>,
        field: CoefficientField,
        scenarios: ScenarioSet,
        time: TimeGrid,
    ) -> Result<Self> {
        terminal.validate()?;
        f.validate()?;
        for gj in &g {
            gj.validate()?;
        }
        if !terminal.is_state_free() {
            return Err(LabError::usage("terminal condition must not depend on y or z"));
        }
        if g.len() != scenarios.l() {
            return Err(LabError::usage(format!(
                "g has {} components, the G-Brownian motion has {}",
                g.len(),
                scenarios.l()
            )));
        }
        let constants = lipschitz_constants(&f, &g);
        let p = Self {
            terminal,
            f,
            g,
            field,
            scenarios,
            time,
            constants,
        };
        let margin = p.contraction_margin();
        if margin <= 0.0 {
            let sb = p.scenarios.sigma_bar();
            return Err(LabError::ContractionViolated {
                what: format!(
                    "αΛσ̄² < 2λ fails for the backward equation (α = {}, Λ = {}, σ̄ = {sb}, λ = {})",
                    p.constants.alpha,
                    p.field.Lambda(),
                    p.field.lambda()
                ),
                margin,
            });
        }
        Ok(p)
    }

    pub fn terminal(&self) -> &Reaction {
        &self.terminal
    }

    pub fn f(&self) -> &Reaction {
        &self.f
    }

    pub fn g(&self) -> &[Reaction] {
        &self.g
    }

    pub fn field(&self) -> &CoefficientField {
        &self.field
    }

    pub fn scenarios(&self) -> &ScenarioSet {
        &self.scenarios
    }

    pub fn time(&self) -> TimeGrid {
        self.time
    }

    /// `K` (as `c`) and `α`, both squared moduli.
    pub fn constants(&self) -> LipschitzConstants {
        self.constants
    }

    /// `2λ − αΛσ̄²`.
    pub fn contraction_margin(&self) -> f64 {
        let sb = self.scenarios.sigma_bar();
        2.0 * self.field.lambda() - self.constants.alpha * self.field.Lambda() * sb * sb
    }

    /// `κ = (Kε + αΛσ̄²)/(2λ)` with its weights `β` (as `rate`) and `δ`.
    pub fn contraction(&self, epsilon: Option<f64>) -> Result<ContractionConstants> {
        let sb = self.scenarios.sigma_bar();
        contraction_constants(
            self.constants.c,
            self.constants.alpha * self.field.Lambda() * sb * sb,
            sb,
            self.field.lambda(),
            epsilon,
        )
    }

    /// The stochastic PDE whose solution represents this equation.
    pub fn to_gspde(&self, grid: SpatialGrid) -> Result<GspdeProblem> {
        GspdeProblem::new(GspdeData {
            grid,
            time: self.time,
            field: self.field.clone(),
            scenarios: self.scenarios.clone(),
            terminal: self.terminal.clone(),
            f: self.f.clone(),
            g: self.g.clone(),
            sigma_weighted_gradient: true,
        })
    }

    pub fn with_time(&self, time: TimeGrid) -> Result<Self> {
        Self::new(
            self.terminal.clone(),
            self.f.clone(),
            self.g.clone(),
            self.field.clone(),
            self.scenarios.clone(),
            time,
        )
    }
}

/// G-Brownian bundles (one per control schedule) and the diffusion ensemble
/// shared by all of their paths.
#[derive(Debug, Clone, Copy)]
pub struct Ensemble<'a> {
    pub bundles: &'a [GbmPaths],
    pub x: &'a HuntPaths,
}

impl Ensemble<'_> {
    fn check(&self, time: TimeGrid, field: &CoefficientField) -> Result<()> {
        if self.bundles.is_empty() {
            return Err(LabError::usage("no G-Brownian bundles supplied"));
        }
        if self.x.grid() != time {
            return Err(LabError::usage("diffusion paths use a different time grid"));
        }
        if self.x.dim() != field.dim() {
            return Err(LabError::usage("diffusion paths and coefficient field differ in dimension"));
        }
        let l = self.bundles[0].l();
        for b in self.bundles {
            if b.grid() != time {
                return Err(LabError::usage("G-Brownian paths use a different time grid"));
            }
            if b.l() != l {
                return Err(LabError::usage("G-Brownian bundles differ in dimension"));
            }
        }
        Ok(())
    }

    pub fn blocks(&self) -> Vec<BlockId> {
        self.bundles
            .iter()
            .enumerate()
            .flat_map(|(bundle, b)| (0..b.n_paths()).map(move |b_path| BlockId { bundle, b_path }))
            .collect()
    }
}

/// A `(bundle, B-path)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BlockId {
    pub bundle: usize,
    pub b_path: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BdsdeConfig {
    pub basis: RegressionBasis,
    pub max_iter: usize,
    pub tol: f64,
    /// Young-inequality parameter; `None` selects the default rule.
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Re-evaluate `f` at the current step with one inner sweep.
    #[serde(default)]
    pub implicit: bool,
    /// Weight the norm's expectation with the initial-law weights.
    #[serde(default)]
    pub weighted_norm: bool,
}

impl Default for BdsdeConfig {
    fn default() -> Self {
        Self {
            basis: RegressionBasis::polynomial(6),
            max_iter: 30,
            tol: 1e-6,
            epsilon: None,
            implicit: false,
            weighted_norm: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BdsdeReport {
    pub constants: ContractionConstants,
    pub iterations: usize,
    /// `‖(Y^{n+1} − Y^n, Z^{n+1} − Z^n)‖_δ` per iteration.
    pub increment_norms: Vec<f64>,
    pub ratios: Vec<f64>,
    pub final_relative_increment: f64,
    pub converged: bool,
}

/// `Y`, `Z` and the driver values used, per block, slot and diffusion path.
#[derive(Debug, Clone)]
pub struct BdsdeSolution {
    time: TimeGrid,
    d: usize,
    l: usize,
    n_x: usize,
    blocks: Vec<BlockId>,
    b_seed: u64,
    x_seed: u64,
    /// `[block][slot][x]`.
    y: Vec<f64>,
    /// `[block][slot][x][d]`.
    z: Vec<f64>,
    f: Vec<f64>,
    /// `[block][slot][x][l]`.
    g: Vec<f64>,
    report: Option<BdsdeReport>,
}

impl BdsdeSolution {
    /// Solution with the given `Y` and `Z` and zero drivers; seeds are zero.
    pub fn from_parts(time: TimeGrid, d: usize, n_x: usize, blocks: Vec<BlockId>, y: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        let slots = time.slots();
        if y.len() != blocks.len() * slots * n_x || z.len() != y.len() * d {
            return Err(LabError::usage("Y or Z has the wrong length"));
        }
        let n = y.len();
        Ok(Self {
            time,
            d,
            l: 0,
            n_x,
            blocks,
            b_seed: 0,
            x_seed: 0,
            y,
            z,
            f: vec![0.0; n],
            g: Vec::new(),
            report: None,
        })
    }

    pub fn time(&self) -> TimeGrid {
        self.time
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    /// Seeds of the G-Brownian driver and of the diffusion ensemble.
    pub fn seeds(&self) -> (u64, u64) {
        (self.b_seed, self.x_seed)
    }

    pub fn report(&self) -> Option<&BdsdeReport> {
        self.report.as_ref()
    }

    fn idx(&self, block: usize, x: usize, slot: usize) -> usize {
        (block * self.time.slots() + slot) * self.n_x + x
    }

    pub fn y(&self, block: usize, x: usize, slot: usize) -> f64 {
        self.y[self.idx(block, x, slot)]
    }

    /// `Z` at `slot`; the terminal slot repeats the last regressed value.
    pub fn z(&self, block: usize, x: usize, slot: usize) -> &[f64] {
        let o = self.idx(block, x, slot) * self.d;
        &self.z[o..o + self.d]
    }

    /// `f` used at `slot`.
    pub fn f_value(&self, block: usize, x: usize, slot: usize) -> f64 {
        self.f[self.idx(block, x, slot)]
    }

    /// `g` used at `slot`.
    pub fn g_value(&self, block: usize, x: usize, slot: usize) -> &[f64] {
        let o = self.idx(block, x, slot) * self.l;
        &self.g[o..o + self.l]
    }

    /// `Y` of every diffusion path at `slot`.
    pub fn y_slice(&self, block: usize, slot: usize) -> &[f64] {
        let o = self.idx(block, 0, slot);
        &self.y[o..o + self.n_x]
    }

    /// Difference of `Y` and `Z` (drivers and report dropped).
    pub fn difference(&self, other: &BdsdeSolution) -> Result<BdsdeSolution> {
        if self.time != other.time || self.d != other.d || self.n_x != other.n_x || self.blocks != other.blocks {
            return Err(LabError::usage("solutions have different shapes"));
        }
        let y = self.y.iter().zip(&other.y).map(|(a, b)| a - b).collect();
        let z = self.z.iter().zip(&other.z).map(|(a, b)| a - b).collect();
        BdsdeSolution::from_parts(self.time, self.d, self.n_x, self.blocks.clone(), y, z)
    }

    /// CSV dump with header `scenario_id,b_path_id,x_path_id,t,Y,Z_1..Z_d`;
    /// `scenario_id` is the bundle index.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = "scenario_id,b_path_id,x_path_id,t,Y".to_string();
        for a in 1..=self.d {
            header.push_str(&format!(",Z_{a}"));
        }
        writeln!(w, "{header}")?;
        for (bi, b) in self.blocks.iter().enumerate() {
            for x in 0..self.n_x {
                for s in 0..self.time.slots() {
                    write!(w, "{},{},{x},{},{}", b.bundle, b.b_path, self.time.time(s), self.y(bi, x, s))?;
                    for v in self.z(bi, x, s) {
                        write!(w, ",{v}")?;
                    }
                    writeln!(w)?;
                }
            }
        }
        Ok(())
    }
}

/// `sqrt(sup_bundles E ∫ e^{βs}(δ|Y_s|² + |Z_s|²) ds)`: exact exponential
/// weight per step, trapezoidal integrand, `E` averaging over B-paths and
/// diffusion paths (weighted by `weights` when given).
pub fn delta_norm(sol: &BdsdeSolution, beta: f64, delta: f64, weights: Option<&[f64]>) -> Result<f64> {
    if let Some(w) = weights {
        if w.len() != sol.n_x {
            return Err(LabError::usage("one weight per diffusion path is required"));
        }
    }
    let tg = sol.time;
    let per_block: Vec<f64> = (0..sol.blocks.len())
        .into_par_iter()
        .map(|b| {
            (0..sol.n_x)
                .map(|x| {
                    let h: Vec<f64> = (0..tg.slots())
                        .map(|s| {
                            let y = sol.y(b, x, s);
                            delta * y * y + sol.z(b, x, s).iter().map(|v| v * v).sum::<f64>()
                        })
                        .collect();
                    let v: f64 = (0..tg.steps)
                        .map(|i| exp_weight(beta, tg.time(i), tg.time(i + 1)) * 0.5 * (h[i] + h[i + 1]))
                        .sum();
                    weights.map_or(v, |w| w[x] * v)
                })
                .sum::<f64>()
                / sol.n_x.max(1) as f64
        })
        .collect();
    let n_bundles = sol.blocks.iter().map(|b| b.bundle + 1).max().unwrap_or(0);
    let mut sums = vec![(0.0, 0usize); n_bundles];
    for (b, v) in sol.blocks.iter().zip(&per_block) {
        sums[b.bundle].0 += v;
        sums[b.bundle].1 += 1;
    }
    Ok(sums
        .iter()
        .filter(|s| s.1 > 0)
        .map(|s| s.0 / s.1 as f64)
        .fold(0.0, f64::max)
        .sqrt())
}

/// Per-slot, per-path precomputations shared by every block.
struct Prepared {
    n: usize,
    n_x: usize,
    d: usize,
    /// `[slot][x][d]`.
    features: Vec<f64>,
    /// `[step][x][d]`.
    dm: Vec<f64>,
    /// `[step][x][d][d]`.
    a_inv: Vec<f64>,
}

impl Prepared {
    fn new(x: &HuntPaths, field: &CoefficientField) -> Result<Self> {
        let n = x.grid().steps;
        let n_x = x.n_paths();
        let d = x.dim();
        let mut features = vec![0.0; (n + 1) * n_x * d];
        let mut dm = vec![0.0; n * n_x * d];
        for s in 0..=n {
            for p in 0..n_x {
                let o = (s * n_x + p) * d;
                features[o..o + d].copy_from_slice(x.x(p, s));
                if s < n {
                    dm[o..o + d].copy_from_slice(x.dm(p, s));
                }
            }
        }
        let a_inv: Vec<Result<Vec<f64>>> = (0..n * n_x)
            .into_par_iter()
            .map(|k| {
                let pos = &features[k * d..(k + 1) * d];
                let inv = field
                    .a(pos)
                    .try_inverse()
                    .ok_or_else(|| LabError::numerical(format!("a(x) is singular at x = {pos:?}")))?;
                Ok((0..d * d).map(|e| inv[(e / d, e % d)]).collect())
            })
            .collect();
        let mut flat = Vec::with_capacity(n * n_x * d * d);
        for r in a_inv {
            flat.extend(r?);
        }
        Ok(Self {
            n,
            n_x,
            d,
            features,
            dm,
            a_inv: flat,
        })
    }

    fn features(&self, slot: usize) -> &[f64] {
        &self.features[slot * self.n_x * self.d..(slot + 1) * self.n_x * self.d]
    }

    fn dm(&self, step: usize) -> &[f64] {
        &self.dm[step * self.n_x * self.d..(step + 1) * self.n_x * self.d]
    }

    fn a_inv(&self, step: usize) -> &[f64] {
        let s = self.n_x * self.d * self.d;
        &self.a_inv[step * s..(step + 1) * s]
    }
}

struct BlockOut {
    y: Vec<f64>,
    z: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
}

/// Driver values at `(slot, x)`: writes `g` into the buffer, returns `f`.
type DriverFn<'a> = dyn Fn(usize, usize, &mut [f64]) -> f64 + Sync + 'a;
/// Implicit re-evaluation of `f` at `(slot, x, y)`.
type ImplicitFn<'a> = dyn Fn(usize, usize, f64) -> f64 + Sync + 'a;

#[allow(clippy::too_many_arguments)]
fn solve_block(
    prep: &Prepared,
    dt: f64,
    l: usize,
    db: &dyn Fn(usize) -> Vec<f64>,
    xi: &[f64],
    drivers: &DriverFn,
    implicit: Option<&ImplicitFn>,
    basis: &RegressionBasis,
) -> Result<BlockOut> {
    let (n, n_x, d) = (prep.n, prep.n_x, prep.d);
    let slots = n + 1;
    let mut y = vec![0.0; slots * n_x];
    let mut z = vec![0.0; slots * n_x * d];
    let mut f = vec![0.0; slots * n_x];
    let mut g = vec![0.0; slots * n_x * l];
    for s in 0..slots {
        for p in 0..n_x {
            let o = s * n_x + p;
            f[o] = drivers(s, p, &mut g[o * l..(o + 1) * l]);
        }
    }
    y[n * n_x..].copy_from_slice(xi);
    let mut next_fit = regress_conditional(xi, prep.features(n), d, basis)?;
    for i in (0..n).rev() {
        let dbi = db(i);
        let feats = prep.features(i);
        let dm = prep.dm(i);
        let mut target = vec![0.0; n_x];
        let mut stoch = vec![0.0; n_x];
        let mut cv = vec![0.0; n_x * d];
        for p in 0..n_x {
            let o = (i + 1) * n_x + p;
            let noise: f64 = (0..l).map(|j| g[o * l + j] * dbi[j]).sum();
            stoch[p] = y[o] + noise;
            target[p] = stoch[p] + f[o] * dt;
            cv[p * d..(p + 1) * d].copy_from_slice(&next_fit.gradient(&feats[p * d..(p + 1) * d]));
        }
        let cv_dot = |p: usize| -> f64 { (0..d).map(|a| cv[p * d + a] * dm[p * d + a]).sum() };
        let reduced: Vec<f64> = (0..n_x).map(|p| target[p] - cv_dot(p)).collect();
        let fit = regress_conditional(&reduced, feats, d, basis)?;
        let mut yi: Vec<f64> = (0..n_x).map(|p| fit.eval(&feats[p * d..(p + 1) * d])).collect();
        let mut fit_for_gradient = fit;
        if let Some(imp) = implicit {
            let reduced: Vec<f64> = (0..n_x).map(|p| stoch[p] - cv_dot(p)).collect();
            let base = regress_conditional(&reduced, feats, d, basis)?;
            for p in 0..n_x {
                let fi = imp(i, p, yi[p]);
                f[i * n_x + p] = fi;
                yi[p] = base.eval(&feats[p * d..(p + 1) * d]) + fi * dt;
            }
            fit_for_gradient = base;
        }
        let resid: Vec<f64> = (0..n_x).map(|p| target[p] - yi[p] - cv_dot(p)).collect();
        let zc = extract_z(&resid, dm, prep.a_inv(i), feats, d, dt, basis)?;
        for p in 0..n_x {
            y[i * n_x + p] = yi[p];
            for a in 0..d {
                z[(i * n_x + p) * d + a] = cv[p * d + a] + zc[p * d + a];
            }
        }
        next_fit = fit_for_gradient;
    }
    let (last, prev) = (n * n_x * d, (n - 1) * n_x * d);
    z.copy_within(prev..last, last);
    Ok(BlockOut { y, z, f, g })
}

fn assemble(
    time: TimeGrid,
    d: usize,
    l: usize,
    ens: Ensemble,
    blocks: Vec<BlockId>,
    outs: Vec<Result<BlockOut>>,
) -> Result<BdsdeSolution> {
    let n_x = ens.x.n_paths();
    let mut sol = BdsdeSolution {
        time,
        d,
        l,
        n_x,
        b_seed: ens.bundles[0].seed(),
        x_seed: ens.x.seed(),
        y: Vec::with_capacity(blocks.len() * time.slots() * n_x),
        z: Vec::new(),
        f: Vec::new(),
        g: Vec::new(),
        blocks,
        report: None,
    };
    for o in outs {
        let o = o?;
        sol.y.extend(o.y);
        sol.z.extend(o.z);
        sol.f.extend(o.f);
        sol.g.extend(o.g);
    }
    Ok(sol)
}

/// Linear backward recursion with driver values supplied per
/// `(block, slot, x)`; the closure writes `g` and returns `f`.
pub fn solve_linear_bdsde<F>(
    field: &CoefficientField,
    xi: &[f64],
    drivers: F,
    ens: Ensemble,
    basis: &RegressionBasis,
) -> Result<BdsdeSolution>
where
    F: Fn(usize, usize, usize, &mut [f64]) -> f64 + Sync,
{
    let time = ens.x.grid();
    ens.check(time, field)?;
    if xi.len() != ens.x.n_paths() {
        return Err(LabError::usage("one terminal value per diffusion path is required"));
    }
    let prep = Prepared::new(ens.x, field)?;
    let l = ens.bundles[0].l();
    let blocks = ens.blocks();
    let outs: Vec<Result<BlockOut>> = blocks
        .par_iter()
        .enumerate()
        .map(|(bi, b)| {
            let bundle = &ens.bundles[b.bundle];
            let db = |i: usize| bundle.backward_increment(b.b_path, i).to_vec();
            let drv = |s: usize, p: usize, out: &mut [f64]| drivers(bi, s, p, out);
            solve_block(&prep, time.dt(), l, &db, xi, &drv, None, basis)
        })
        .collect();
    assemble(time, field.dim(), l, ens, blocks, outs)
}

/// Linear solve with `f`, `g` and `φ` evaluated along the diffusion paths;
/// any `y`, `z` dependence of the presets is ignored (evaluated at zero).
pub fn solve_linear_state_free(
    terminal: &Reaction,
    f: &Reaction,
    g: &[Reaction],
    field: &CoefficientField,
    ens: Ensemble,
    basis: &RegressionBasis,
) -> Result<BdsdeSolution> {
    let time = ens.x.grid();
    let x = ens.x;
    let n = time.steps;
    let zero = vec![0.0; x.dim()];
    let xi: Vec<f64> = (0..x.n_paths()).map(|p| terminal.eval(time.horizon, x.x(p, n), 0.0, &zero)).collect();
    solve_linear_bdsde(
        field,
        &xi,
        |_, s, p, out: &mut [f64]| {
            let pos = x.x(p, s);
            let t = time.time(s);
            for (j, gj) in g.iter().enumerate() {
                out[j] = gj.eval(t, pos, 0.0, &zero);
            }
            f.eval(t, pos, 0.0, &zero)
        },
        ens,
        basis,
    )
}

/// Picard iteration of the linear solve with drivers frozen at the previous
/// iterate, monitored in the δ-norm.
pub fn solve_gbdsde_picard(problem: &BdsdeProblem, ens: Ensemble, cfg: &BdsdeConfig) -> Result<BdsdeSolution> {
    let time = problem.time;
    ens.check(time, &problem.field)?;
    if ens.bundles[0].l() != problem.g.len() {
        return Err(LabError::usage("g and the G-Brownian bundles differ in dimension"));
    }
    if cfg.max_iter == 0 {
        return Err(LabError::usage("max_iter must be at least 1"));
    }
    let constants = problem.contraction(cfg.epsilon)?;
    let x = ens.x;
    let (n, n_x, d, l) = (time.steps, x.n_paths(), x.dim(), problem.g.len());
    let sigma: Vec<Result<DMatrix<f64>>> = (0..(n + 1) * n_x)
        .into_par_iter()
        .map(|k| problem.field.sigma(x.x(k % n_x, k / n_x)))
        .collect();
    let sigma: Vec<DMatrix<f64>> = sigma.into_iter().collect::<Result<_>>()?;
    let zs = |z: &[f64], s: usize, p: usize| -> Vec<f64> {
        let m = &sigma[s * n_x + p];
        (0..d).map(|b| (0..d).map(|a| z[a] * m[(a, b)]).sum()).collect()
    };
    let zero_z = vec![0.0; d];
    let xi: Vec<f64> = (0..n_x).map(|p| problem.terminal.eval(time.horizon, x.x(p, n), 0.0, &zero_z)).collect();
    let prep = Prepared::new(x, &problem.field)?;
    let blocks = ens.blocks();
    let weights = cfg.weighted_norm.then(|| x.weights());
    let mut prev = BdsdeSolution {
        time,
        d,
        l,
        n_x,
        blocks: blocks.clone(),
        b_seed: ens.bundles[0].seed(),
        x_seed: x.seed(),
        y: vec![0.0; blocks.len() * (n + 1) * n_x],
        z: vec![0.0; blocks.len() * (n + 1) * n_x * d],
        f: Vec::new(),
        g: Vec::new(),
        report: None,
    };
    let mut norms: Vec<f64> = Vec::new();
    let mut ratios = Vec::new();
    for it in 1..=cfg.max_iter {
        let outs: Vec<Result<BlockOut>> = blocks
            .par_iter()
            .enumerate()
            .map(|(bi, b)| {
                let bundle = &ens.bundles[b.bundle];
                let db = |i: usize| bundle.backward_increment(b.b_path, i).to_vec();
                let prev = &prev;
                let drv = |s: usize, p: usize, out: &mut [f64]| {
                    let t = time.time(s);
                    let pos = x.x(p, s);
                    let y = prev.y(bi, p, s);
                    let z = zs(prev.z(bi, p, s), s, p);
                    for (j, gj) in problem.g.iter().enumerate() {
                        out[j] = gj.eval(t, pos, y, &z);
                    }
                    problem.f.eval(t, pos, y, &z)
                };
                let imp = |s: usize, p: usize, y: f64| {
                    let z = zs(prev.z(bi, p, s), s, p);
                    problem.f.eval(time.time(s), x.x(p, s), y, &z)
                };
                let imp_ref: Option<&ImplicitFn> = if cfg.implicit { Some(&imp) } else { None };
                solve_block(&prep, time.dt(), l, &db, &xi, &drv, imp_ref, &cfg.basis)
            })
            .collect();
        let next = assemble(time, d, l, ens, blocks.clone(), outs)?;
        let diff = next.difference(&prev)?;
        let nd = delta_norm(&diff, constants.rate, constants.delta, weights)?;
        let nn = delta_norm(&next, constants.rate, constants.delta, weights)?;
        if let Some(&last) = norms.last() {
            if last > 0.0 {
                ratios.push(nd / last);
            }
        }
        norms.push(nd);
        prev = next;
        let rel = if nn > 0.0 { nd / nn } else { 0.0 };
        if nd == 0.0 || rel <= cfg.tol {
            prev.report = Some(BdsdeReport {
                constants,
                iterations: it,
                increment_norms: norms,
                ratios,
                final_relative_increment: rel,
                converged: true,
            });
            return Ok(prev);
        }
    }
    Err(LabError::NonConvergence {
        iterations: cfg.max_iter,
        ratios,
    })
}

/// Per-path residual of the discrete product rule for two solutions on the
/// same ensemble:
/// `Y_NỸ_N − Y_0Ỹ_0 − ∫Y dỸ − ∫Ỹ dY + ∫ g ββᵀ g̃ dt − 2∫ Z a Z̃ dt`, with
/// backward integrals taken at the right endpoint. Ordered `[block][x]`.
pub fn product_rule_residual(a: &BdsdeSolution, b: &BdsdeSolution, ens: Ensemble, field: &CoefficientField) -> Result<Vec<f64>> {
    if a.time != b.time || a.n_x != b.n_x || a.blocks != b.blocks || a.l != b.l || a.d != b.d {
        return Err(LabError::usage("solutions have different shapes"));
    }
    if a.seeds() != b.seeds() || a.x_seed != ens.x.seed() || a.n_x != ens.x.n_paths() {
        return Err(LabError::usage("solutions were computed on different randomness"));
    }
    let tg = a.time;
    let dt = tg.dt();
    let (n_x, d, l) = (a.n_x, a.d, a.l);
    let out: Vec<Vec<f64>> = a
        .blocks
        .par_iter()
        .enumerate()
        .map(|(bi, blk)| {
            let bundle = &ens.bundles[blk.bundle];
            (0..n_x)
                .map(|p| {
                    let mut r = 0.0;
                    for i in 0..tg.steps {
                        let db = bundle.backward_increment(blk.b_path, i);
                        let cov = bundle.covariance_at(i);
                        let am = field.a(ens.x.x(p, i));
                        let dya = a.y(bi, p, i + 1) - a.y(bi, p, i);
                        let dyb = b.y(bi, p, i + 1) - b.y(bi, p, i);
                        let (ga, gb) = (a.g_value(bi, p, i + 1), b.g_value(bi, p, i + 1));
                        let gdb_a: f64 = (0..l).map(|j| ga[j] * db[j]).sum();
                        let gdb_b: f64 = (0..l).map(|j| gb[j] * db[j]).sum();
                        let mut gcg = 0.0;
                        for j in 0..l {
                            for k in 0..l {
                                gcg += ga[j] * cov[(j, k)] * gb[k];
                            }
                        }
                        let (za, zb) = (a.z(bi, p, i), b.z(bi, p, i));
                        let mut zaz = 0.0;
                        for u in 0..d {
                            for v in 0..d {
                                zaz += za[u] * am[(u, v)] * zb[v];
                            }
                        }
                        r += dya * dyb + dya * gdb_b + dyb * gdb_a + gcg * dt - 2.0 * zaz * dt;
                    }
                    r
                })
                .collect()
        })
        .collect();
    Ok(out.concat())
}
