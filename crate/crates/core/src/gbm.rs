//! Wiener drivers, G-Brownian paths and backward stochastic integrals.
//!
//! Conventions used throughout the crate:
//!
//! * the time grid is `t_i = i T / N`, `i = 0..=N`;
//! * `ΔB̄_i = B_{t_i} − B_{t_{i+1}}` is the backward increment on step `i`;
//! * a grid process has `N + 1` slots; slot `t_{i+1}` is the one paired with
//!   `ΔB̄_i` (it is measurable with respect to the increments after `t_{i+1}`).

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::{stream, Purpose};
use crate::scenario::{upper_expectation, ControlSchedule, ScenarioSet, UpperExpectation};
use crate::stats::{mean_se, MeanEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(LabError::usage(format!("time horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(LabError::usage("time grid needs at least one step"));
        }
        Ok(Self { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn slots(&self) -> usize {
        self.steps + 1
    }

    /// Grid with `factor` times as many steps over the same horizon.
    pub fn refine(&self, factor: usize) -> Self {
        Self {
            horizon: self.horizon,
            steps: self.steps * factor,
        }
    }
}

/// Gaussian increments, one `steps × dim` block per path.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverPaths {
    grid: TimeGrid,
    dim: usize,
    n_paths: usize,
    seed: u64,
    increments: Vec<f64>,
}

impl DriverPaths {
    pub fn sample(grid: TimeGrid, dim: usize, n_paths: usize, seed: u64, purpose: Purpose) -> Result<Self> {
        if n_paths == 0 {
            return Err(LabError::usage("need at least one path"));
        }
        if dim == 0 {
            return Err(LabError::usage("driver dimension must be at least 1"));
        }
        let block = grid.steps * dim;
        let sd = grid.dt().sqrt();
        let mut increments = vec![0.0; n_paths * block];
        increments
            .par_chunks_mut(block)
            .enumerate()
            .for_each(|(p, chunk)| {
                let mut rng = stream(seed, purpose, p as u64);
                for v in chunk.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = sd * z;
                }
            });
        Ok(Self {
            grid,
            dim,
            n_paths,
            seed,
            increments,
        })
    }

    /// Wraps externally produced increments (`n_paths × steps × dim`, row-major).
    pub fn from_increments(grid: TimeGrid, dim: usize, n_paths: usize, seed: u64, increments: Vec<f64>) -> Result<Self> {
        if increments.len() != n_paths * grid.steps * dim {
            return Err(LabError::usage("increment array has the wrong length"));
        }
        Ok(Self {
            grid,
            dim,
            n_paths,
            seed,
            increments,
        })
    }

    /// Sums `factor` consecutive increments: the same Brownian paths observed
    /// on a grid with `factor` times fewer steps.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.grid.steps % factor != 0 {
            return Err(LabError::usage(format!(
                "cannot coarsen {} steps by {factor}",
                self.grid.steps
            )));
        }
        let grid = TimeGrid {
            horizon: self.grid.horizon,
            steps: self.grid.steps / factor,
        };
        let mut out = vec![0.0; self.n_paths * grid.steps * self.dim];
        for p in 0..self.n_paths {
            for i in 0..grid.steps {
                for c in 0..self.dim {
                    let mut s = 0.0;
                    for k in 0..factor {
                        s += self.get(p, i * factor + k)[c];
                    }
                    out[(p * grid.steps + i) * self.dim + c] = s;
                }
            }
        }
        Ok(Self {
            grid,
            dim: self.dim,
            n_paths: self.n_paths,
            seed: self.seed,
            increments: out,
        })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.grid.steps + step) * self.dim;
        &self.increments[o..o + self.dim]
    }

    pub fn raw(&self) -> &[f64] {
        &self.increments
    }
}

/// Seeded Wiener driver for the G-Brownian motion (`l` coordinates).
pub fn sample_driver(grid: TimeGrid, l: usize, n_paths: usize, seed: u64) -> Result<DriverPaths> {
    DriverPaths::sample(grid, l, n_paths, seed, Purpose::GbmDriver)
}

/// G-Brownian paths under one control schedule, stored as backward increments.
#[derive(Debug, Clone, PartialEq)]
pub struct GbmPaths {
    grid: TimeGrid,
    l: usize,
    n_paths: usize,
    seed: u64,
    control: ControlSchedule,
    scenarios: ScenarioSet,
    /// `ΔB̄_i` per path, `steps × l` blocks.
    increments: Vec<f64>,
}

/// `ΔB̄_i = −β_{k(i)} ΔW̃_{N−1−i}`: the reversed-time process `B̃` is the
/// integral of the scheduled loading against `W̃`.
pub fn build_gbm(driver: &DriverPaths, control: &ControlSchedule, set: &ScenarioSet) -> Result<GbmPaths> {
    let grid = driver.grid();
    if control.len() != grid.steps {
        return Err(LabError::usage(format!(
            "control schedule has {} steps, driver has {}",
            control.len(),
            grid.steps
        )));
    }
    if driver.dim() != set.l() {
        return Err(LabError::usage(format!(
            "driver dimension {} does not match scenario dimension {}",
            driver.dim(),
            set.l()
        )));
    }
    let l = set.l();
    let n = grid.steps;
    let block = n * l;
    let mut increments = vec![0.0; driver.n_paths() * block];
    increments
        .par_chunks_mut(block)
        .enumerate()
        .for_each(|(p, chunk)| {
            for i in 0..n {
                let beta = set.matrix(control.scenario_at(i));
                let dw = driver.get(p, n - 1 - i);
                for r in 0..l {
                    let mut s = 0.0;
                    for c in 0..l {
                        s += beta[(r, c)] * dw[c];
                    }
                    chunk[i * l + r] = -s;
                }
            }
        });
    Ok(GbmPaths {
        grid,
        l,
        n_paths: driver.n_paths(),
        seed: driver.seed(),
        control: control.clone(),
        scenarios: set.clone(),
        increments,
    })
}

impl GbmPaths {
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn control(&self) -> &ControlSchedule {
        &self.control
    }

    pub fn scenarios(&self) -> &ScenarioSet {
        &self.scenarios
    }

    /// `ΔB̄_i` of `path`.
    pub fn backward_increment(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.grid.steps + step) * self.l;
        &self.increments[o..o + self.l]
    }

    /// `B_{t_n} − B_T` for `n = 0..=N`, flattened `(N + 1) × l`.
    pub fn values_from_terminal(&self, path: usize) -> Vec<f64> {
        let n = self.grid.steps;
        let mut out = vec![0.0; (n + 1) * self.l];
        for i in (0..n).rev() {
            let db = self.backward_increment(path, i);
            for c in 0..self.l {
                out[i * self.l + c] = out[(i + 1) * self.l + c] + db[c];
            }
        }
        out
    }

    /// Covariance rate `β β ᵀ` active on step `i`.
    pub fn covariance_at(&self, step: usize) -> nalgebra::DMatrix<f64> {
        self.scenarios.covariance(self.control.scenario_at(step))
    }

    /// Keeps only the listed paths (used to split a bundle into blocks).
    pub fn select(&self, paths: &[usize]) -> Self {
        let block = self.grid.steps * self.l;
        let mut increments = Vec::with_capacity(paths.len() * block);
        for &p in paths {
            increments.extend_from_slice(&self.increments[p * block..(p + 1) * block]);
        }
        Self {
            increments,
            n_paths: paths.len(),
            ..self.clone()
        }
    }

    /// CSV dump with header `path_id,scenario_id,step,coord,dB_backward`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "path_id,scenario_id,step,coord,dB_backward")?;
        for p in 0..self.n_paths {
            for i in 0..self.grid.steps {
                let k = self.control.scenario_at(i);
                for (c, v) in self.backward_increment(p, i).iter().enumerate() {
                    writeln!(w, "{p},{k},{i},{c},{v}")?;
                }
            }
        }
        Ok(())
    }
}

/// Per-path values on the `N + 1` time slots with a fixed number of columns.
#[derive(Debug, Clone, PartialEq)]
pub struct GridProcess {
    n_paths: usize,
    slots: usize,
    cols: usize,
    values: Vec<f64>,
}

impl GridProcess {
    pub fn zeros(n_paths: usize, slots: usize, cols: usize) -> Self {
        Self {
            n_paths,
            slots,
            cols,
            values: vec![0.0; n_paths * slots * cols],
        }
    }

    /// Fills every `(path, slot)` entry from `f(path, slot, out)`.
    pub fn from_fn<F>(n_paths: usize, slots: usize, cols: usize, f: F) -> Self
    where
        F: Fn(usize, usize, &mut [f64]) + Sync,
    {
        let mut values = vec![0.0; n_paths * slots * cols];
        values
            .par_chunks_mut(slots * cols)
            .enumerate()
            .for_each(|(p, chunk)| {
                for s in 0..slots {
                    f(p, s, &mut chunk[s * cols..(s + 1) * cols]);
                }
            });
        Self {
            n_paths,
            slots,
            cols,
            values,
        }
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, path: usize, slot: usize) -> &[f64] {
        let o = (path * self.slots + slot) * self.cols;
        &self.values[o..o + self.cols]
    }

    pub fn scalar(&self, path: usize, slot: usize) -> f64 {
        self.get(path, slot)[0]
    }

    pub fn raw(&self) -> &[f64] {
        &self.values
    }

    pub fn axpy(&self, alpha: f64, other: &GridProcess) -> GridProcess {
        assert_eq!(self.values.len(), other.values.len());
        GridProcess {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| alpha * a + b)
                .collect(),
            ..*self
        }
    }

    /// Column-wise squared norm integrated on the grid with the right-endpoint
    /// slot convention: `Σ_{i ≥ n} |Ξ_{t_{i+1}}|² Δt`, for `n = from`.
    pub fn energy_from(&self, path: usize, from: usize, dt: f64) -> f64 {
        ((from + 1)..self.slots)
            .map(|s| self.get(path, s).iter().map(|x| x * x).sum::<f64>() * dt)
            .sum()
    }
}

fn check_integrand(xi: &GridProcess, paths: &GbmPaths) -> Result<()> {
    if xi.cols() != paths.l() {
        return Err(LabError::usage(format!(
            "integrand has {} columns, G-Brownian motion has {}",
            xi.cols(),
            paths.l()
        )));
    }
    if xi.slots() != paths.grid().slots() || xi.n_paths() != paths.n_paths() {
        return Err(LabError::usage("integrand shape does not match the path bundle"));
    }
    Ok(())
}

/// `I_{t_n} = Σ_{i ≥ n} Ξ_{t_{i+1}} · ΔB̄_i` per path (one column, `I_T = 0`).
pub fn backward_integral(xi: &GridProcess, paths: &GbmPaths) -> Result<GridProcess> {
    check_integrand(xi, paths)?;
    let n = paths.grid().steps;
    let l = paths.l();
    Ok(GridProcess::zeros(paths.n_paths(), n + 1, 1).with_paths(|p, out| {
        let mut acc = 0.0;
        out[n] = 0.0;
        for i in (0..n).rev() {
            let xv = xi.get(p, i + 1);
            let db = paths.backward_increment(p, i);
            let mut dot = 0.0;
            for c in 0..l {
                dot += xv[c] * db[c];
            }
            acc += dot;
            out[i] = acc;
        }
    }))
}

impl GridProcess {
    /// Rewrites each path's block with `f(path, block)`.
    fn with_paths<F>(mut self, f: F) -> Self
    where
        F: Fn(usize, &mut [f64]) + Sync,
    {
        let block = self.slots * self.cols;
        self.values
            .par_chunks_mut(block)
            .enumerate()
            .for_each(|(p, chunk)| f(p, chunk));
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduleStats {
    pub mean_i0: MeanEstimate,
    pub second_moment_i0: MeanEstimate,
    pub sup_second_moment: MeanEstimate,
    pub integrand_energy: MeanEstimate,
}

/// Monte Carlo diagnostics of the backward integral over a family of controls.
#[derive(Debug, Clone, Serialize)]
pub struct IntegralReport {
    pub per_schedule: Vec<ScheduleStats>,
    pub sigma_bar: f64,
    /// Largest `|mean(I_0)| / SE` over schedules (0 when every SE is 0 and every mean is 0).
    pub worst_mean_z: f64,
    pub second_moment: UpperExpectation,
    pub energy: UpperExpectation,
    /// `σ̄² Ê[∫|Ξ|²]`.
    pub isometry_bound: f64,
    pub sup_stat: UpperExpectation,
    /// `4 σ̄² Ê[∫|Ξ|²]`.
    pub doob_bound: f64,
}

impl IntegralReport {
    pub fn mean_zero_holds(&self, n_se: f64) -> bool {
        self.per_schedule.iter().all(|s| s.mean_i0.within(0.0, n_se))
    }

    pub fn isometry_holds(&self, n_se: f64) -> bool {
        let e = self.second_moment.attained();
        e.mean <= self.isometry_bound * (1.0 + n_se * e.rel_se()) + 1e-300
    }

    pub fn doob_holds(&self, n_se: f64) -> bool {
        let e = self.sup_stat.attained();
        e.mean <= self.doob_bound * (1.0 + n_se * e.rel_se()) + 1e-300
    }
}

/// Evaluates the mean-zero, isometry and Doob statistics of `∫ Ξ · dB̄` for
/// every bundle in `family` (one bundle per control schedule), with `Ê`
/// realised as the maximum over the family.
pub fn integral_diagnostics<F>(family: &[GbmPaths], integrand: F) -> Result<IntegralReport>
where
    F: Fn(&GbmPaths) -> GridProcess,
{
    if family.is_empty() {
        return Err(LabError::usage("empty control family"));
    }
    let sigma_bar = family[0].scenarios().sigma_bar();
    let mut per_schedule = Vec::with_capacity(family.len());
    let mut sq = Vec::new();
    let mut sup = Vec::new();
    let mut energy = Vec::new();
    for paths in family {
        let xi = integrand(paths);
        let integral = backward_integral(&xi, paths)?;
        let dt = paths.grid().dt();
        let np = paths.n_paths();
        let i0: Vec<f64> = (0..np).map(|p| integral.scalar(p, 0)).collect();
        let i0sq: Vec<f64> = i0.iter().map(|x| x * x).collect();
        let supsq: Vec<f64> = (0..np)
            .map(|p| {
                (0..integral.slots())
                    .map(|s| integral.scalar(p, s).powi(2))
                    .fold(0.0, f64::max)
            })
            .collect();
        let en: Vec<f64> = (0..np).map(|p| xi.energy_from(p, 0, dt)).collect();
        per_schedule.push(ScheduleStats {
            mean_i0: mean_se(&i0),
            second_moment_i0: mean_se(&i0sq),
            sup_second_moment: mean_se(&supsq),
            integrand_energy: mean_se(&en),
        });
        sq.push(i0sq);
        sup.push(supsq);
        energy.push(en);
    }
    let worst_mean_z = per_schedule
        .iter()
        .map(|s| {
            if s.mean_i0.std_error > 0.0 {
                s.mean_i0.mean.abs() / s.mean_i0.std_error
            } else if s.mean_i0.mean == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    let second_moment = upper_expectation(&sq)?;
    let energy = upper_expectation(&energy)?;
    let sup_stat = upper_expectation(&sup)?;
    let s2 = sigma_bar * sigma_bar;
    Ok(IntegralReport {
        per_schedule,
        sigma_bar,
        worst_mean_z,
        isometry_bound: s2 * energy.value,
        doob_bound: 4.0 * s2 * energy.value,
        second_moment,
        energy,
        sup_stat,
    })
}

/// Integrand presets adapted to the backward filtration: the value used on
/// step `i` depends on the path only through `B_s − B_T`, `s ≥ t_{i+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Integrand {
    /// `Ξʲ ≡ value`.
    Constant { value: f64 },
    /// `Ξʲ_t = cos(frequency · (B_t − B_T)ʲ)`.
    CosOfPath { frequency: f64 },
    /// `Ξʲ_t = amplitude · sin(frequency · t)`.
    TimeSine { amplitude: f64, frequency: f64 },
}

impl Integrand {
    pub fn build(&self, paths: &GbmPaths) -> GridProcess {
        let (l, slots) = (paths.l(), paths.grid().slots());
        let grid = paths.grid();
        match *self {
            Integrand::Constant { value } => GridProcess::from_fn(paths.n_paths(), slots, l, |_, _, o| o.fill(value)),
            Integrand::TimeSine { amplitude, frequency } => GridProcess::from_fn(paths.n_paths(), slots, l, |_, s, o| {
                o.fill(amplitude * (frequency * grid.time(s)).sin())
            }),
            Integrand::CosOfPath { frequency } => GridProcess::zeros(paths.n_paths(), slots, l).with_paths(|p, out| {
                let b = paths.values_from_terminal(p);
                for (o, v) in out.iter_mut().zip(&b) {
                    *o = (frequency * v).cos();
                }
            }),
        }
    }
}

/// One bundle per schedule, all built from the same driver.
pub fn build_family(driver: &DriverPaths, schedules: &[ControlSchedule], set: &ScenarioSet) -> Result<Vec<GbmPaths>> {
    schedules.iter().map(|c| build_gbm(driver, c, set)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::sample_variance;
    use proptest::prelude::*;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn driver_is_deterministic() {
        let a = sample_driver(grid(8), 2, 50, 11).unwrap();
        let b = sample_driver(grid(8), 2, 50, 11).unwrap();
        assert_eq!(a, b);
        let c = sample_driver(grid(8), 2, 50, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn driver_rejects_zero_paths() {
        assert!(matches!(sample_driver(grid(4), 1, 0, 1), Err(LabError::Usage(_))));
    }

    #[test]
    fn driver_variance_matches_dt() {
        let g = TimeGrid::new(0.5, 1).unwrap();
        let d = sample_driver(g, 1, 10_000, 3).unwrap();
        let v = sample_variance(d.raw());
        assert!((v - 0.5).abs() < 0.05 * 0.5, "variance {v}");
    }

    #[test]
    fn zero_volatility_gives_zero_increments() {
        let set = ScenarioSet::scalar(&[0.0]).unwrap();
        let d = sample_driver(grid(5), 1, 10, 1).unwrap();
        let b = build_gbm(&d, &ControlSchedule::constant(0, &set, 5).unwrap(), &set).unwrap();
        for p in 0..10 {
            for i in 0..5 {
                assert_eq!(b.backward_increment(p, i)[0], 0.0);
            }
        }
    }

    #[test]
    fn identity_loading_reverses_and_negates() {
        let set = ScenarioSet::scalar(&[1.0]).unwrap();
        let d = sample_driver(grid(6), 1, 4, 2).unwrap();
        let b = build_gbm(&d, &ControlSchedule::constant(0, &set, 6).unwrap(), &set).unwrap();
        for p in 0..4 {
            for i in 0..6 {
                assert_eq!(b.backward_increment(p, i)[0], -d.get(p, 5 - i)[0]);
            }
        }
    }

    #[test]
    fn constructional_identity_with_switching_control() {
        let set = ScenarioSet::new(
            2,
            vec![
                nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 0.5]),
                nalgebra::DMatrix::from_row_slice(2, 2, &[0.2, 0.0, -0.4, 1.1]),
            ],
        )
        .unwrap();
        let d = sample_driver(grid(7), 2, 3, 5).unwrap();
        let ctl = ControlSchedule::new(vec![0, 1, 1, 0, 1, 0, 0], &set, 7).unwrap();
        let b = build_gbm(&d, &ctl, &set).unwrap();
        for p in 0..3 {
            for i in 0..7 {
                let beta = set.matrix(ctl.scenario_at(i));
                let w = d.get(p, 6 - i);
                for r in 0..2 {
                    let mut expect = 0.0;
                    for c in 0..2 {
                        expect += beta[(r, c)] * w[c];
                    }
                    assert_eq!(b.backward_increment(p, i)[r], -expect);
                }
            }
        }
    }

    #[test]
    fn scaled_variance() {
        let set = ScenarioSet::scalar(&[2.0]).unwrap();
        let g = TimeGrid::new(1.0, 1).unwrap();
        let d = sample_driver(g, 1, 10_000, 9).unwrap();
        let b = build_gbm(&d, &ControlSchedule::constant(0, &set, 1).unwrap(), &set).unwrap();
        let x: Vec<f64> = (0..10_000).map(|p| b.values_from_terminal(p)[0]).collect();
        let v = sample_variance(&x);
        assert!((v - 4.0).abs() < 0.05 * 4.0, "variance {v}");
    }

    #[test]
    fn schedule_length_mismatch() {
        let set = ScenarioSet::scalar(&[1.0]).unwrap();
        let d = sample_driver(grid(4), 1, 2, 1).unwrap();
        let ctl = ControlSchedule::constant(0, &set, 3).unwrap();
        assert!(build_gbm(&d, &ctl, &set).is_err());
    }

    fn bundle(n: usize, np: usize, seed: u64) -> GbmPaths {
        let set = ScenarioSet::scalar(&[1.0]).unwrap();
        let d = sample_driver(grid(n), 1, np, seed).unwrap();
        build_gbm(&d, &ControlSchedule::constant(0, &set, n).unwrap(), &set).unwrap()
    }

    #[test]
    fn zero_integrand() {
        let b = bundle(8, 5, 1);
        let xi = GridProcess::zeros(5, 9, 1);
        let i = backward_integral(&xi, &b).unwrap();
        assert!(i.raw().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_integrand_telescopes() {
        let b = bundle(8, 5, 1);
        let c = 1.5;
        let xi = GridProcess::from_fn(5, 9, 1, |_, _, o| o[0] = c);
        let i = backward_integral(&xi, &b).unwrap();
        for p in 0..5 {
            let bt = b.values_from_terminal(p);
            for s in 0..=8 {
                assert!((i.scalar(p, s) - c * bt[s]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn two_step_direct_evaluation() {
        let b = bundle(2, 3, 4);
        let (x1, x2) = (0.7, -1.3);
        let xi = GridProcess::from_fn(3, 3, 1, |_, s, o| o[0] = if s == 1 { x1 } else { x2 });
        let i = backward_integral(&xi, &b).unwrap();
        for p in 0..3 {
            let bt = b.values_from_terminal(p);
            // B_{t0} − B_{t1} and B_{t1} − B_{t2}
            let expect = x1 * (bt[0] - bt[1]) + x2 * (bt[1] - bt[2]);
            assert!((i.scalar(p, 0) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn column_mismatch_is_usage_error() {
        let b = bundle(4, 2, 1);
        let xi = GridProcess::zeros(2, 5, 2);
        assert!(matches!(backward_integral(&xi, &b), Err(LabError::Usage(_))));
    }

    #[test]
    fn coarsen_sums_increments() {
        let d = sample_driver(grid(8), 1, 3, 4).unwrap();
        let c = d.coarsen(4).unwrap();
        assert_eq!(c.grid().steps, 2);
        for p in 0..3 {
            let s: f64 = (0..4).map(|i| d.get(p, i)[0]).sum();
            assert_eq!(c.get(p, 0)[0], s);
        }
        assert!(d.coarsen(3).is_err());
    }

    #[test]
    fn integrand_presets() {
        let b = bundle(8, 5, 1);
        let c = Integrand::CosOfPath { frequency: 2.0 }.build(&b);
        let v = b.values_from_terminal(3);
        assert_eq!(c.scalar(3, 8), 1.0);
        assert_eq!(c.scalar(3, 2), (2.0 * v[2]).cos());
        let s = Integrand::TimeSine { amplitude: 2.0, frequency: 3.0 }.build(&b);
        assert_eq!(s.scalar(0, 4), 2.0 * (3.0 * b.grid().time(4)).sin());
        assert_eq!(Integrand::Constant { value: 0.5 }.build(&b).scalar(4, 0), 0.5);
    }

    #[test]
    fn diagnostics_zero_integrand() {
        let b = bundle(8, 20, 3);
        let r = integral_diagnostics(&[b], |p| GridProcess::zeros(p.n_paths(), 9, 1)).unwrap();
        assert_eq!(r.second_moment.value, 0.0);
        assert_eq!(r.sup_stat.value, 0.0);
        assert_eq!(r.isometry_bound, 0.0);
        assert!(r.mean_zero_holds(3.0) && r.isometry_holds(3.0) && r.doob_holds(3.0));
    }

    #[test]
    fn diagnostics_classical_isometry() {
        let b = bundle(16, 10_000, 21);
        let r = integral_diagnostics(&[b], |p| GridProcess::from_fn(p.n_paths(), 17, 1, |_, _, o| o[0] = 1.0)).unwrap();
        let e = r.second_moment.attained();
        assert!(e.within(1.0, 3.0), "{e:?}");
        assert!((r.isometry_bound - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagnostics_two_scenarios_attain_bound_at_extremal() {
        let set = ScenarioSet::scalar(&[1.0, 2.0]).unwrap();
        let g = grid(16);
        let d = sample_driver(g, 1, 10_000, 8).unwrap();
        let fam = build_family(&d, &crate::scenario::enumerate_schedules(&set, 16, 0, 1, 0).unwrap(), &set).unwrap();
        let r = integral_diagnostics(&fam, |p| GridProcess::from_fn(p.n_paths(), 17, 1, |_, _, o| o[0] = 1.0)).unwrap();
        assert_eq!(r.second_moment.argmax, 1);
        assert!(r.second_moment.attained().within(4.0, 3.0));
        assert!((r.isometry_bound - 4.0).abs() < 1e-12);
        assert!(r.isometry_holds(3.0));
    }

    proptest! {
        #[test]
        fn integral_is_linear(alpha in -3.0f64..3.0, seed in 0u64..50) {
            let b = bundle(6, 4, seed);
            let x1 = GridProcess::from_fn(4, 7, 1, |p, s, o| o[0] = (p as f64 + 1.0) * (s as f64).sin());
            let x2 = GridProcess::from_fn(4, 7, 1, |p, s, o| o[0] = (s * p) as f64 * 0.1 - 0.3);
            let lhs = backward_integral(&x1.axpy(alpha, &x2), &b).unwrap();
            let i1 = backward_integral(&x1, &b).unwrap();
            let i2 = backward_integral(&x2, &b).unwrap();
            for (k, v) in lhs.raw().iter().enumerate() {
                let rhs = alpha * i1.raw()[k] + i2.raw()[k];
                prop_assert!((v - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
            }
        }
    }
}
