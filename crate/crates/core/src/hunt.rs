//! The symmetric diffusion `X` generated by `L = Σ ∂ᵢ(aⁱʲ ∂ⱼ)`.
//!
//! Paths follow `dX = √2 σ(X) dW + b(X) dt` with `σ = a^{1/2}` and
//! `bⁱ = Σⱼ ∂ⱼ aⁱʲ`; the martingale part is `dM = √2 σ(X) dW`.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::gbm::{DriverPaths, GridProcess, TimeGrid};
use crate::rng::{stream, Purpose};
use crate::scenario::PSD_TOLERANCE;
use crate::stats::{mean_se, MeanEstimate};

/// Finite-difference step for the divergence drift when no analytic form exists.
pub const DRIFT_FD_STEP: f64 = 1e-5;

/// Symmetric square root of a symmetric positive semidefinite matrix.
pub fn sqrt_spd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(LabError::usage("square root needs a square matrix"));
    }
    let n = a.nrows();
    let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || a[(i, j)] == 0.0));
    if diagonal {
        let mut s = DMatrix::zeros(n, n);
        for i in 0..n {
            let v = a[(i, i)];
            if v < -PSD_TOLERANCE {
                return Err(LabError::NotPsd {
                    min_eigenvalue: v,
                    location: None,
                });
            }
            s[(i, i)] = v.max(0.0).sqrt();
        }
        return Ok(s);
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.min();
    if min < -PSD_TOLERANCE {
        return Err(LabError::NotPsd {
            min_eigenvalue: min,
            location: None,
        });
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    let s = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

pub type MatrixFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;

/// Serializable coefficient presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CoefficientSpec {
    /// `a = c I` in dimension `d`.
    Constant { d: usize, c: f64 },
    /// `a(x) = base (1 + amplitude sin² x)` in one dimension.
    #[serde(rename = "sinusoidal-1d")]
    Sinusoidal1d { base: f64, amplitude: f64 },
    /// `a(x) = diag(bᵢ (1 + amplitude sin² xᵢ))` in two dimensions.
    #[serde(rename = "diagonal-2d")]
    Diagonal2d { diag: [f64; 2], amplitude: f64 },
}

#[derive(Clone)]
enum Kind {
    Constant(f64),
    Sinusoidal1d { base: f64, amp: f64 },
    Diagonal2d { diag: [f64; 2], amp: f64 },
    Custom {
        a: MatrixFn,
        drift: Option<VectorFn>,
        diagonal: bool,
    },
}

/// Diffusion matrix `a(x)` with its ellipticity bounds.
#[derive(Clone)]
pub struct CoefficientField {
    d: usize,
    lambda: f64,
    big_lambda: f64,
    kind: Kind,
}

impl fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            Kind::Constant(c) => format!("Constant({c})"),
            Kind::Sinusoidal1d { base, amp } => format!("Sinusoidal1d({base}, {amp})"),
            Kind::Diagonal2d { diag, amp } => format!("Diagonal2d({diag:?}, {amp})"),
            Kind::Custom { .. } => "Custom".to_string(),
        };
        f.debug_struct("CoefficientField")
            .field("d", &self.d)
            .field("lambda", &self.lambda)
            .field("Lambda", &self.big_lambda)
            .field("kind", &kind)
            .finish()
    }
}

impl CoefficientField {
    pub fn constant(d: usize, c: f64) -> Result<Self> {
        if d == 0 || !(c > 0.0 && c.is_finite()) {
            return Err(LabError::usage("constant coefficient needs d ≥ 1 and c > 0"));
        }
        Ok(Self {
            d,
            lambda: c,
            big_lambda: c,
            kind: Kind::Constant(c),
        })
    }

    pub fn sinusoidal_1d(base: f64, amp: f64) -> Result<Self> {
        if !(base > 0.0 && amp >= 0.0 && base.is_finite() && amp.is_finite()) {
            return Err(LabError::usage("sinusoidal coefficient needs base > 0 and amplitude ≥ 0"));
        }
        Ok(Self {
            d: 1,
            lambda: base,
            big_lambda: base * (1.0 + amp),
            kind: Kind::Sinusoidal1d { base, amp },
        })
    }

    pub fn diagonal_2d(diag: [f64; 2], amp: f64) -> Result<Self> {
        if !(diag.iter().all(|v| *v > 0.0 && v.is_finite()) && amp >= 0.0 && amp.is_finite()) {
            return Err(LabError::usage("diagonal coefficient needs positive entries and amplitude ≥ 0"));
        }
        Ok(Self {
            d: 2,
            lambda: diag[0].min(diag[1]),
            big_lambda: diag[0].max(diag[1]) * (1.0 + amp),
            kind: Kind::Diagonal2d { diag, amp },
        })
    }

    /// User-supplied field. The drift falls back to central differences.
    pub fn custom(d: usize, lambda: f64, big_lambda: f64, diagonal: bool, a: MatrixFn, drift: Option<VectorFn>) -> Result<Self> {
        if d == 0 || !(lambda > 0.0 && big_lambda >= lambda) {
            return Err(LabError::usage("custom coefficient needs 0 < λ ≤ Λ"));
        }
        Ok(Self {
            d,
            lambda,
            big_lambda,
            kind: Kind::Custom { a, drift, diagonal },
        })
    }

    pub fn from_spec(spec: &CoefficientSpec) -> Result<Self> {
        match *spec {
            CoefficientSpec::Constant { d, c } => Self::constant(d, c),
            CoefficientSpec::Sinusoidal1d { base, amplitude } => Self::sinusoidal_1d(base, amplitude),
            CoefficientSpec::Diagonal2d { diag, amplitude } => Self::diagonal_2d(diag, amplitude),
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    #[allow(non_snake_case)]
    pub fn Lambda(&self) -> f64 {
        self.big_lambda
    }

    pub fn is_diagonal(&self) -> bool {
        match &self.kind {
            Kind::Custom { diagonal, .. } => *diagonal,
            _ => true,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.kind, Kind::Constant(_))
    }

    /// Diagonal entry `aⁱⁱ(x)`; cheaper than building the matrix.
    pub fn diag_entry(&self, i: usize, x: &[f64]) -> f64 {
        match &self.kind {
            Kind::Constant(c) => *c,
            Kind::Sinusoidal1d { base, amp } => base * (1.0 + amp * x[0].sin().powi(2)),
            Kind::Diagonal2d { diag, amp } => diag[i] * (1.0 + amp * x[i].sin().powi(2)),
            Kind::Custom { a, .. } => a(x)[(i, i)],
        }
    }

    pub fn a(&self, x: &[f64]) -> DMatrix<f64> {
        match &self.kind {
            Kind::Custom { a, .. } => a(x),
            _ => DMatrix::from_fn(self.d, self.d, |i, j| if i == j { self.diag_entry(i, x) } else { 0.0 }),
        }
    }

    /// `σ(x) = a(x)^{1/2}`; a non-PSD value is reported with its location.
    pub fn sigma(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        sqrt_spd(&self.a(x)).map_err(|e| match e {
            LabError::NotPsd { min_eigenvalue, .. } => LabError::NotPsd {
                min_eigenvalue,
                location: Some(x.to_vec()),
            },
            other => other,
        })
    }

    /// Divergence drift `bⁱ(x) = Σⱼ ∂ⱼ aⁱʲ(x)`.
    pub fn drift(&self, x: &[f64]) -> DVector<f64> {
        match &self.kind {
            Kind::Constant(_) => DVector::zeros(self.d),
            Kind::Sinusoidal1d { base, amp } => DVector::from_element(1, base * amp * (2.0 * x[0]).sin()),
            Kind::Diagonal2d { diag, amp } => DVector::from_fn(2, |i, _| diag[i] * amp * (2.0 * x[i]).sin()),
            Kind::Custom { drift: Some(b), .. } => b(x),
            Kind::Custom { a, drift: None, .. } => {
                let mut b = DVector::zeros(self.d);
                let mut xp = x.to_vec();
                for j in 0..self.d {
                    xp[j] = x[j] + DRIFT_FD_STEP;
                    let ap = a(&xp);
                    xp[j] = x[j] - DRIFT_FD_STEP;
                    let am = a(&xp);
                    xp[j] = x[j];
                    for i in 0..self.d {
                        b[i] += (ap[(i, j)] - am[(i, j)]) / (2.0 * DRIFT_FD_STEP);
                    }
                }
                b
            }
        }
    }

    /// Checks `λ ≤ eig(a(x)) ≤ Λ` at the given points.
    pub fn check_ellipticity(&self, points: &[Vec<f64>]) -> Result<()> {
        for x in points {
            let eig = SymmetricEigen::new(self.a(x));
            let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
            if lo < self.lambda * (1.0 - 1e-12) || hi > self.big_lambda * (1.0 + 1e-12) {
                return Err(LabError::usage(format!(
                    "ellipticity bounds [{}, {}] violated at {x:?}: eigenvalues in [{lo}, {hi}]",
                    self.lambda, self.big_lambda
                )));
            }
        }
        Ok(())
    }
}

/// Law of `X₀`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialLaw {
    Point { x: Vec<f64> },
    /// Independent `N(mean, std²)` coordinates conditioned on `[−half_width, half_width]^d`;
    /// paths carry weight `Z_box / π(X₀)` so weighted means estimate Lebesgue integrals
    /// over the box.
    Gaussian { mean: f64, std: f64, half_width: f64 },
}

impl InitialLaw {
    fn validate(&self, d: usize) -> Result<()> {
        match self {
            InitialLaw::Point { x } if x.len() != d => Err(LabError::usage(format!(
                "initial point has dimension {}, field has {d}",
                x.len()
            ))),
            InitialLaw::Gaussian { std, half_width, .. } if !(*std > 0.0 && *half_width > 0.0) => {
                Err(LabError::usage("gaussian initial law needs std > 0 and half_width > 0"))
            }
            _ => Ok(()),
        }
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(z / SQRT_2))
}

/// Mass of one coordinate's Gaussian inside the box.
fn box_mass_1d(mean: f64, std: f64, r: f64) -> f64 {
    normal_cdf((r - mean) / std) - normal_cdf((-r - mean) / std)
}

/// Simulated diffusion paths on a uniform time grid.
#[derive(Debug, Clone)]
pub struct HuntPaths {
    grid: TimeGrid,
    d: usize,
    n_paths: usize,
    seed: u64,
    init: InitialLaw,
    /// `(N + 1) × d` positions per path.
    x: Vec<f64>,
    /// `N × d` martingale increments per path.
    dm: Vec<f64>,
    driver: DriverPaths,
    weights: Vec<f64>,
}

/// Euler–Maruyama simulation with a freshly sampled driver.
pub fn simulate_hunt(field: &CoefficientField, init: &InitialLaw, grid: TimeGrid, n_paths: usize, seed: u64) -> Result<HuntPaths> {
    let driver = DriverPaths::sample(grid, field.dim(), n_paths, seed, Purpose::HuntDriver)?;
    simulate_hunt_with_driver(field, init, &driver)
}

/// Euler–Maruyama simulation driven by the given Wiener increments.
pub fn simulate_hunt_with_driver(field: &CoefficientField, init: &InitialLaw, driver: &DriverPaths) -> Result<HuntPaths> {
    let d = field.dim();
    if driver.dim() != d {
        return Err(LabError::usage("driver dimension differs from the coefficient dimension"));
    }
    init.validate(d)?;
    let grid = driver.grid();
    let n = grid.steps;
    let dt = grid.dt();
    let n_paths = driver.n_paths();
    let seed = driver.seed();

    let starts: Vec<(Vec<f64>, f64)> = (0..n_paths)
        .into_par_iter()
        .map(|p| match init {
            InitialLaw::Point { x } => (x.clone(), 1.0),
            InitialLaw::Gaussian { mean, std, half_width } => {
                let mut rng = stream(seed, Purpose::HuntInit, p as u64);
                let x: Vec<f64> = (0..d)
                    .map(|_| loop {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        let v = mean + std * z;
                        if v.abs() <= *half_width {
                            break v;
                        }
                    })
                    .collect();
                let z_box = box_mass_1d(*mean, *std, *half_width).powi(d as i32);
                let density: f64 = x
                    .iter()
                    .map(|v| (-(v - mean).powi(2) / (2.0 * std * std)).exp() / (std * (2.0 * PI).sqrt()))
                    .product();
                (x, z_box / density)
            }
        })
        .collect();

    let per_path: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut xs = Vec::with_capacity((n + 1) * d);
            let mut dms = Vec::with_capacity(n * d);
            xs.extend_from_slice(&starts[p].0);
            for k in 0..n {
                let cur = &xs[k * d..(k + 1) * d].to_vec();
                let sigma = field.sigma(cur)?;
                let b = field.drift(cur);
                let dw = driver.get(p, k);
                for i in 0..d {
                    let mut s = 0.0;
                    for j in 0..d {
                        s += sigma[(i, j)] * dw[j];
                    }
                    dms.push(SQRT_2 * s);
                }
                for i in 0..d {
                    let next = cur[i] + dms[k * d + i] + b[i] * dt;
                    xs.push(next);
                }
            }
            Ok((xs, dms))
        })
        .collect();

    let mut x = Vec::with_capacity(n_paths * (n + 1) * d);
    let mut dm = Vec::with_capacity(n_paths * n * d);
    for r in per_path {
        let (xs, dms) = r?;
        x.extend(xs);
        dm.extend(dms);
    }
    Ok(HuntPaths {
        grid,
        d,
        n_paths,
        seed,
        init: init.clone(),
        x,
        dm,
        driver: driver.clone(),
        weights: starts.into_iter().map(|s| s.1).collect(),
    })
}

impl HuntPaths {
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn initial_law(&self) -> &InitialLaw {
        &self.init
    }

    pub fn x(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * (self.grid.steps + 1) + step) * self.d;
        &self.x[o..o + self.d]
    }

    pub fn dm(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.grid.steps + step) * self.d;
        &self.dm[o..o + self.d]
    }

    pub fn driver(&self) -> &DriverPaths {
        &self.driver
    }

    pub fn weight(&self, path: usize) -> f64 {
        self.weights[path]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `M_{t_n} − M_0` for every slot.
    pub fn martingale(&self, path: usize) -> Vec<f64> {
        let n = self.grid.steps;
        let mut out = vec![0.0; (n + 1) * self.d];
        for k in 0..n {
            for i in 0..self.d {
                out[(k + 1) * self.d + i] = out[k * self.d + i] + self.dm(path, k)[i];
            }
        }
        out
    }

    /// Weighted estimate of `∫ h(x) dx` over the initial box (or `h(x₀)` for a point start).
    pub fn weighted_initial_integral<H: Fn(&[f64]) -> f64 + Sync>(&self, h: H) -> MeanEstimate {
        let v: Vec<f64> = (0..self.n_paths).map(|p| self.weights[p] * h(self.x(p, 0))).collect();
        mean_se(&v)
    }

    /// CSV dump with header `path_id,step,x_1..x_d,dM_1..dM_d,weight`; the
    /// last step has empty `dM` fields.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = vec!["path_id".to_string(), "step".to_string()];
        header.extend((1..=self.d).map(|i| format!("x_{i}")));
        header.extend((1..=self.d).map(|i| format!("dM_{i}")));
        header.push("weight".into());
        writeln!(w, "{}", header.join(","))?;
        for p in 0..self.n_paths {
            for k in 0..=self.grid.steps {
                let mut row = vec![p.to_string(), k.to_string()];
                row.extend(self.x(p, k).iter().map(|v| v.to_string()));
                if k < self.grid.steps {
                    row.extend(self.dm(p, k).iter().map(|v| v.to_string()));
                } else {
                    row.extend((0..self.d).map(|_| String::new()));
                }
                row.push(self.weights[p].to_string());
                writeln!(w, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

/// `J_{t_m} = Σ_{n<m} φ_{t_n} · ΔM_n` per path (one column, `J_0 = 0`).
pub fn forward_integral(phi: &GridProcess, paths: &HuntPaths) -> Result<GridProcess> {
    if phi.cols() != paths.dim() {
        return Err(LabError::usage(format!(
            "integrand has {} columns, diffusion has dimension {}",
            phi.cols(),
            paths.dim()
        )));
    }
    if phi.slots() != paths.grid().slots() || phi.n_paths() != paths.n_paths() {
        return Err(LabError::usage("integrand shape does not match the path bundle"));
    }
    let n = paths.grid().steps;
    Ok(GridProcess::from_fn(paths.n_paths(), n + 1, 1, |p, s, out| {
        let mut acc = 0.0;
        for k in 0..s {
            acc += phi.get(p, k).iter().zip(paths.dm(p, k)).map(|(a, b)| a * b).sum::<f64>();
        }
        out[0] = acc;
    }))
}

#[derive(Debug, Clone, Serialize)]
pub struct ForwardReport {
    pub mean: MeanEstimate,
    pub second_moment: MeanEstimate,
    /// `2 E ∫ φ a(X) φᵀ ds`.
    pub bracket: MeanEstimate,
    /// `E ∫ |φ|² ds`.
    pub energy: MeanEstimate,
    pub lower_bound: f64,
    pub upper_bound: f64,
}

impl ForwardReport {
    pub fn sandwich_holds(&self, n_se: f64) -> bool {
        let m = self.second_moment.mean;
        let band = n_se * self.second_moment.std_error;
        m + band >= self.lower_bound * (1.0 - n_se * self.energy.rel_se())
            && m - band <= self.upper_bound * (1.0 + n_se * self.energy.rel_se())
    }
}

/// Moments of `∫₀ᵀ φ · dM` next to the bracket and the ellipticity sandwich
/// `2λ E∫|φ|² ≤ E|∫φ·dM|² ≤ 2Λ E∫|φ|²`.
pub fn forward_diagnostics(phi: &GridProcess, paths: &HuntPaths, field: &CoefficientField) -> Result<ForwardReport> {
    let j = forward_integral(phi, paths)?;
    let n = paths.grid().steps;
    let dt = paths.grid().dt();
    let d = paths.dim();
    let np = paths.n_paths();
    let jt: Vec<f64> = (0..np).map(|p| j.scalar(p, n)).collect();
    let jsq: Vec<f64> = jt.iter().map(|v| v * v).collect();
    let (br, en): (Vec<f64>, Vec<f64>) = (0..np)
        .into_par_iter()
        .map(|p| {
            let (mut b, mut e) = (0.0, 0.0);
            for k in 0..n {
                let f = phi.get(p, k);
                let a = field.a(paths.x(p, k));
                for i in 0..d {
                    e += f[i] * f[i] * dt;
                    for l in 0..d {
                        b += 2.0 * f[i] * a[(i, l)] * f[l] * dt;
                    }
                }
            }
            (b, e)
        })
        .unzip();
    let energy = mean_se(&en);
    Ok(ForwardReport {
        mean: mean_se(&jt),
        second_moment: mean_se(&jsq),
        bracket: mean_se(&br),
        lower_bound: 2.0 * field.lambda() * energy.mean,
        upper_bound: 2.0 * field.Lambda() * energy.mean,
        energy,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BracketEntry {
    pub i: usize,
    pub j: usize,
    pub step: usize,
    /// Path average of `Σ ΔMⁱ ΔMʲ`.
    pub empirical: MeanEstimate,
    /// Path average of `2 Σ aⁱʲ(X) Δt`.
    pub model: MeanEstimate,
    /// Path average of the difference.
    pub difference: MeanEstimate,
    /// `|difference| / model` on the diagonal; `None` off the diagonal.
    pub relative_deviation: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BracketReport {
    pub entries: Vec<BracketEntry>,
    pub max_relative_deviation: f64,
    /// Largest `|difference| / SE` among off-diagonal entries.
    pub max_offdiag_z: f64,
}

/// Compares the realised bracket `Σ ΔMⁱΔMʲ` with `2∫aⁱʲ(X_s)ds` along the same
/// paths, at the quarter points of the horizon.
pub fn empirical_bracket(paths: &HuntPaths, field: &CoefficientField) -> Result<BracketReport> {
    let n = paths.grid().steps;
    let d = paths.dim();
    let dt = paths.grid().dt();
    let mut checkpoints: Vec<usize> = [n / 4, n / 2, 3 * n / 4, n].into_iter().filter(|&s| s > 0).collect();
    checkpoints.dedup();
    // per path: for each checkpoint, d×d empirical and model sums
    let per_path: Vec<(Vec<f64>, Vec<f64>)> = (0..paths.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut emp = vec![0.0; checkpoints.len() * d * d];
            let mut model = vec![0.0; checkpoints.len() * d * d];
            let mut ce = vec![0.0; d * d];
            let mut cm = vec![0.0; d * d];
            let mut next = 0;
            for k in 0..n {
                let dm = paths.dm(p, k);
                let a = field.a(paths.x(p, k));
                for i in 0..d {
                    for j in 0..d {
                        ce[i * d + j] += dm[i] * dm[j];
                        cm[i * d + j] += 2.0 * a[(i, j)] * dt;
                    }
                }
                if k + 1 == checkpoints[next] {
                    emp[next * d * d..(next + 1) * d * d].copy_from_slice(&ce);
                    model[next * d * d..(next + 1) * d * d].copy_from_slice(&cm);
                    next += 1;
                    if next == checkpoints.len() {
                        break;
                    }
                }
            }
            (emp, model)
        })
        .collect();
    let mut entries = Vec::new();
    let mut max_rel: f64 = 0.0;
    let mut max_z: f64 = 0.0;
    for (c, &step) in checkpoints.iter().enumerate() {
        for i in 0..d {
            for j in 0..d {
                let o = c * d * d + i * d + j;
                let e: Vec<f64> = per_path.iter().map(|r| r.0[o]).collect();
                let m: Vec<f64> = per_path.iter().map(|r| r.1[o]).collect();
                let diff: Vec<f64> = e.iter().zip(&m).map(|(a, b)| a - b).collect();
                let (empirical, model, difference) = (mean_se(&e), mean_se(&m), mean_se(&diff));
                let relative_deviation = if i == j {
                    let r = difference.mean.abs() / model.mean.abs();
                    max_rel = max_rel.max(r);
                    Some(r)
                } else {
                    if difference.std_error > 0.0 {
                        max_z = max_z.max(difference.mean.abs() / difference.std_error);
                    }
                    None
                };
                entries.push(BracketEntry {
                    i,
                    j,
                    step,
                    empirical,
                    model,
                    difference,
                    relative_deviation,
                });
            }
        }
    }
    Ok(BracketReport {
        entries,
        max_relative_deviation: max_rel,
        max_offdiag_z: max_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::sample_variance;
    use rand::{Rng, SeedableRng};

    #[test]
    fn sqrt_examples() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert_eq!(sqrt_spd(&i).unwrap(), i);
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let s = sqrt_spd(&a).unwrap();
        assert_eq!(s, DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0])));
    }

    #[test]
    fn sqrt_of_random_spd() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let b = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let a = &b * b.transpose() + DMatrix::identity(3, 3) * 0.1;
            let s = sqrt_spd(&a).unwrap();
            assert!((&s * &s - &a).norm() <= 1e-10);
            assert!((&s - s.transpose()).norm() == 0.0);
        }
    }

    #[test]
    fn sqrt_rejects_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(sqrt_spd(&a), Err(LabError::NotPsd { .. })));
    }

    #[test]
    fn field_sigma_squares_to_a() {
        let f = CoefficientField::sinusoidal_1d(1.0, 0.5).unwrap();
        for k in 0..50 {
            let x = [-5.0 + 0.2 * k as f64];
            let s = f.sigma(&x).unwrap();
            assert!((&s * s.transpose() - f.a(&x)).norm() <= 1e-10);
        }
        f.check_ellipticity(&(0..100).map(|k| vec![0.1 * k as f64]).collect::<Vec<_>>()).unwrap();
    }

    #[test]
    fn analytic_drift_matches_finite_difference() {
        let f = CoefficientField::diagonal_2d([1.0, 0.7], 0.5).unwrap();
        let g = f.clone();
        let custom = CoefficientField::custom(2, f.lambda(), f.Lambda(), true, Arc::new(move |x: &[f64]| g.a(x)), None).unwrap();
        for x in [[0.3, -1.2], [2.0, 0.4]] {
            let (a, b) = (f.drift(&x), custom.drift(&x));
            assert!((a - b).norm() < 1e-8);
        }
    }

    #[test]
    fn constant_field_has_no_drift() {
        let f = CoefficientField::constant(2, 0.5).unwrap();
        assert!(f.drift(&[1.0, 2.0]).iter().all(|v| *v == 0.0));
        let g = TimeGrid::new(1.0, 8).unwrap();
        let p = simulate_hunt(&f, &InitialLaw::Point { x: vec![0.0, 0.0] }, g, 5, 2).unwrap();
        for path in 0..5 {
            for k in 0..8 {
                for i in 0..2 {
                    assert_eq!(p.x(path, k + 1)[i], p.x(path, k)[i] + p.dm(path, k)[i]);
                }
            }
        }
    }

    #[test]
    fn martingale_increments_are_constructional() {
        let f = CoefficientField::sinusoidal_1d(1.0, 0.5).unwrap();
        let g = TimeGrid::new(1.0, 16).unwrap();
        let p = simulate_hunt(&f, &InitialLaw::Point { x: vec![0.4] }, g, 10, 3).unwrap();
        for path in 0..10 {
            for k in 0..16 {
                let s = f.sigma(p.x(path, k)).unwrap()[(0, 0)];
                assert_eq!(p.dm(path, k)[0], SQRT_2 * (s * p.driver().get(path, k)[0]));
            }
        }
    }

    #[test]
    fn half_identity_gives_unit_variance() {
        let f = CoefficientField::constant(1, 0.5).unwrap();
        let g = TimeGrid::new(0.8, 4).unwrap();
        let p = simulate_hunt(&f, &InitialLaw::Point { x: vec![1.0] }, g, 10_000, 5).unwrap();
        let v: Vec<f64> = (0..10_000).map(|i| p.x(i, 4)[0] - 1.0).collect();
        let var = sample_variance(&v);
        assert!((var - 0.8).abs() < 0.05 * 0.8, "{var}");
    }

    #[test]
    fn forward_integral_single_step() {
        let f = CoefficientField::constant(1, 1.0).unwrap();
        let g = TimeGrid::new(1.0, 1).unwrap();
        let p = simulate_hunt(&f, &InitialLaw::Point { x: vec![0.0] }, g, 4, 1).unwrap();
        let phi = GridProcess::from_fn(4, 2, 1, |_, _, o| o[0] = 1.7);
        let j = forward_integral(&phi, &p).unwrap();
        for path in 0..4 {
            assert_eq!(j.scalar(path, 1), 1.7 * p.dm(path, 0)[0]);
            assert_eq!(j.scalar(path, 0), 0.0);
        }
    }

    #[test]
    fn forward_integral_variance_constant_field() {
        let c = 0.75;
        let f = CoefficientField::constant(2, c).unwrap();
        let g = TimeGrid::new(1.0, 8).unwrap();
        let p = simulate_hunt(&f, &InitialLaw::Point { x: vec![0.0, 0.0] }, g, 10_000, 8).unwrap();
        let phi = GridProcess::from_fn(10_000, 9, 2, |_, _, o| {
            o[0] = 1.0;
            o[1] = 0.0;
        });
        let r = forward_diagnostics(&phi, &p, &f).unwrap();
        assert!(r.second_moment.within(2.0 * c, 3.0), "{:?}", r.second_moment);
        assert!(r.mean.within(0.0, 3.0));
        assert!(r.sandwich_holds(3.0));
    }

    #[test]
    fn bracket_of_half_identity() {
        let f = CoefficientField::constant(2, 0.5).unwrap();
        let g = TimeGrid::new(1.0, 16).unwrap();
        let p = simulate_hunt(&f, &InitialLaw::Point { x: vec![0.0, 0.0] }, g, 10_000, 9).unwrap();
        let r = empirical_bracket(&p, &f).unwrap();
        assert!(r.max_relative_deviation < 0.05);
        assert!(r.max_offdiag_z < 4.0);
        let last = r.entries.iter().find(|e| e.i == 0 && e.j == 0 && e.step == 16).unwrap();
        assert!((last.empirical.mean - 1.0).abs() < 0.05);
    }

    #[test]
    fn weighted_initial_integral_recovers_lebesgue() {
        let f = CoefficientField::constant(1, 1.0).unwrap();
        let g = TimeGrid::new(1.0, 1).unwrap();
        let law = InitialLaw::Gaussian {
            mean: 0.0,
            std: 1.5,
            half_width: 3.0,
        };
        let p = simulate_hunt(&f, &law, g, 20_000, 4).unwrap();
        // ∫_{-3}^{3} e^{-x²} dx = √π erf(3)
        let exact = PI.sqrt() * statrs::function::erf::erf(3.0);
        let e = p.weighted_initial_integral(|x| (-x[0] * x[0]).exp());
        assert!(e.within(exact, 3.0), "{e:?} vs {exact}");
        let one = p.weighted_initial_integral(|_| 1.0);
        assert!(one.within(6.0, 3.0), "{one:?}");
        assert!(p.weights().iter().all(|w| *w > 0.0));
    }

    #[test]
    fn simulation_is_deterministic() {
        let f = CoefficientField::sinusoidal_1d(1.0, 0.5).unwrap();
        let g = TimeGrid::new(1.0, 8).unwrap();
        let a = simulate_hunt(&f, &InitialLaw::Point { x: vec![0.0] }, g, 50, 7).unwrap();
        let b = simulate_hunt(&f, &InitialLaw::Point { x: vec![0.0] }, g, 50, 7).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.dm, b.dm);
    }
}
