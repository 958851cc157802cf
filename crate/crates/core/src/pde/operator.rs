use crate::error::{LabError, Result};
use crate::hunt::CoefficientField;

use super::grid::{Boundary, GridFunction, SpatialGrid};

/// Conservative finite-volume discretisation of `L = Σ ∂ᵢ(aⁱⁱ ∂ᵢ)`.
///
/// `face[axis][k]` holds `a` at the midpoint between node `k` and its `+axis`
/// neighbor, so that `−(L_h u, v) = ℰ_h(u, v)` exactly.
#[derive(Debug, Clone)]
pub struct Operator {
    grid: SpatialGrid,
    face: Vec<Vec<f64>>,
}

pub fn discretize_operator(field: &CoefficientField, grid: &SpatialGrid) -> Result<Operator> {
    grid.validate()?;
    if field.dim() != grid.d {
        return Err(LabError::usage(format!(
            "coefficient dimension {} differs from grid dimension {}",
            field.dim(),
            grid.d
        )));
    }
    if grid.d > 1 && !field.is_diagonal() {
        return Err(LabError::usage("the grid solver supports only diagonal coefficients in d = 2"));
    }
    let h = grid.dx();
    let face = (0..grid.d)
        .map(|axis| {
            (0..grid.len())
                .map(|k| match grid.neighbor(k, axis, 1) {
                    Some(_) if grid.multi_index(k)[axis] < grid.m - 1 => {
                        let mut x = grid.coord(k);
                        x[axis] += 0.5 * h;
                        field.diag_entry(axis, &x)
                    }
                    _ => 0.0,
                })
                .collect()
        })
        .collect();
    Ok(Operator { grid: *grid, face })
}

impl Operator {
    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    /// `(L_h u)_k` on active nodes; boundary or duplicate entries follow the
    /// boundary condition.
    pub fn apply(&self, u: &[f64]) -> GridFunction {
        let g = &self.grid;
        let h2 = g.dx() * g.dx();
        let mut out = vec![0.0; g.len()];
        for (k, o) in out.iter_mut().enumerate() {
            if !g.is_active(k) {
                continue;
            }
            let mut s = 0.0;
            for axis in 0..g.d {
                if let Some(hi) = g.neighbor(k, axis, 1) {
                    s += self.face[axis][k] * (u[hi] - u[k]);
                }
                if let Some(lo) = g.neighbor(k, axis, -1) {
                    s -= self.face[axis][lo] * (u[k] - u[lo]);
                }
            }
            *o = s / h2;
        }
        g.enforce(&mut out);
        out
    }

    /// `ℰ_h(u, v) = Σ_faces a_f (Δu)(Δv) Δx^{d−2}`.
    pub fn energy(&self, u: &[f64], v: &[f64]) -> f64 {
        let g = &self.grid;
        let mut s = 0.0;
        for axis in 0..g.d {
            for k in 0..g.len() {
                let counted = match g.boundary {
                    Boundary::Dirichlet => true,
                    Boundary::Periodic => g.is_active(k),
                };
                if !counted || g.multi_index(k)[axis] == g.m - 1 {
                    continue;
                }
                if let Some(hi) = g.neighbor(k, axis, 1) {
                    s += self.face[axis][k] * (u[hi] - u[k]) * (v[hi] - v[k]);
                }
            }
        }
        s * g.dx().powi(g.d as i32 - 2)
    }
}

/// Factorised `(I − h/2 L_h)` for a fixed step `h`.
#[derive(Debug, Clone)]
enum Factor {
    /// Thomas elimination on the active unknowns; `cyclic` carries the
    /// Sherman–Morrison correction for periodic grids.
    Tridiagonal {
        sub: Vec<f64>,
        cp: Vec<f64>,
        denom: Vec<f64>,
        cyclic: Option<Cyclic>,
    },
    /// Conjugate gradients (two dimensions).
    Iterative,
}

#[derive(Debug, Clone)]
struct Cyclic {
    z: Vec<f64>,
    v_last: f64,
    denom: f64,
}

/// Crank–Nicolson approximation of the semigroup `P_τ = e^{τL}`.
#[derive(Debug, Clone)]
pub struct Semigroup {
    op: Operator,
    dt: f64,
    active: Vec<usize>,
    factor: Factor,
}

const CG_TOL: f64 = 1e-13;
const CG_MAX_ITER: usize = 20_000;

impl Semigroup {
    /// Semigroup with base step `dt`: durations are covered by steps of at most `dt`.
    pub fn new(op: Operator, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(LabError::usage("semigroup step must be positive"));
        }
        let active = op.grid.active_nodes();
        let factor = Self::factorise(&op, &active, dt)?;
        Ok(Self { op, dt, active, factor })
    }

    pub fn operator(&self) -> &Operator {
        &self.op
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.op.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn factorise(op: &Operator, active: &[usize], h: f64) -> Result<Factor> {
        let g = &op.grid;
        if g.d != 1 {
            return Ok(Factor::Iterative);
        }
        let n = active.len();
        let h2 = g.dx() * g.dx();
        let c = 0.5 * h / h2;
        // A = tridiag(sub, diag, sup); corners only when periodic
        let mut sub = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut sup = vec![0.0; n];
        for (q, &k) in active.iter().enumerate() {
            let up = op.face[0][k];
            let lo = g.neighbor(k, 0, -1).map_or(0.0, |l| op.face[0][l]);
            diag[q] = 1.0 + c * (up + lo);
            sub[q] = -c * lo;
            sup[q] = -c * up;
        }
        let periodic = g.boundary == Boundary::Periodic;
        let (alpha, beta) = if periodic { (sub[0], sup[n - 1]) } else { (0.0, 0.0) };
        let mut gamma = 0.0;
        if periodic {
            gamma = -diag[0];
            diag[0] -= gamma;
            diag[n - 1] -= alpha * beta / gamma;
        }
        let mut cp = vec![0.0; n];
        let mut denom = vec![0.0; n];
        denom[0] = diag[0];
        cp[0] = sup[0] / denom[0];
        for q in 1..n {
            denom[q] = diag[q] - sub[q] * cp[q - 1];
            if denom[q].abs() < 1e-300 {
                return Err(LabError::numerical("singular tridiagonal system in the semigroup"));
            }
            cp[q] = sup[q] / denom[q];
        }
        let mut factor = Factor::Tridiagonal {
            sub,
            cp,
            denom,
            cyclic: None,
        };
        if periodic {
            let mut uvec = vec![0.0; n];
            uvec[0] = gamma;
            uvec[n - 1] = beta;
            let z = thomas(&factor, &uvec);
            let v_last = alpha / gamma;
            let d = 1.0 + z[0] + v_last * z[n - 1];
            if d.abs() < 1e-300 {
                return Err(LabError::numerical("singular periodic correction in the semigroup"));
            }
            if let Factor::Tridiagonal { cyclic, .. } = &mut factor {
                *cyclic = Some(Cyclic { z, v_last, denom: d });
            }
        }
        Ok(factor)
    }

    fn solve(&self, factor: &Factor, h: f64, rhs: &[f64]) -> Result<Vec<f64>> {
        match factor {
            Factor::Tridiagonal { cyclic, .. } => {
                let y = thomas(factor, rhs);
                Ok(match cyclic {
                    None => y,
                    Some(c) => {
                        let n = y.len();
                        let s = (y[0] + c.v_last * y[n - 1]) / c.denom;
                        y.iter().zip(&c.z).map(|(yi, zi)| yi - s * zi).collect()
                    }
                })
            }
            Factor::Iterative => self.conjugate_gradient(h, rhs),
        }
    }

    /// `(I − h/2 L_h) x` restricted to active unknowns.
    fn lhs_apply(&self, h: f64, x: &[f64]) -> Vec<f64> {
        let g = &self.op.grid;
        let mut full = vec![0.0; g.len()];
        for (q, &k) in self.active.iter().enumerate() {
            full[k] = x[q];
        }
        g.enforce(&mut full);
        let l = self.op.apply(&full);
        self.active.iter().enumerate().map(|(q, &k)| x[q] - 0.5 * h * l[k]).collect()
    }

    fn conjugate_gradient(&self, h: f64, b: &[f64]) -> Result<Vec<f64>> {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut x = b.to_vec();
        let ax = self.lhs_apply(h, &x);
        let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let mut p = r.clone();
        let mut rr = dot(&r, &r);
        let target = CG_TOL * CG_TOL * dot(b, b).max(1e-300);
        for _ in 0..CG_MAX_ITER {
            if rr <= target {
                return Ok(x);
            }
            let ap = self.lhs_apply(h, &p);
            let alpha = rr / dot(&p, &ap);
            for q in 0..x.len() {
                x[q] += alpha * p[q];
                r[q] -= alpha * ap[q];
            }
            let rr_new = dot(&r, &r);
            let beta = rr_new / rr;
            rr = rr_new;
            for q in 0..p.len() {
                p[q] = r[q] + beta * p[q];
            }
        }
        Err(LabError::numerical(format!(
            "conjugate gradients did not reach relative residual {CG_TOL:e} in {CG_MAX_ITER} iterations (residual {:e})",
            (rr / dot(b, b).max(1e-300)).sqrt()
        )))
    }

    fn cn_step(&self, factor: &Factor, h: f64, v: &[f64]) -> Result<GridFunction> {
        let g = &self.op.grid;
        let lv = self.op.apply(v);
        let rhs: Vec<f64> = self.active.iter().map(|&k| v[k] + 0.5 * h * lv[k]).collect();
        let x = self.solve(factor, h, &rhs)?;
        let mut out = vec![0.0; g.len()];
        for (q, &k) in self.active.iter().enumerate() {
            out[k] = x[q];
        }
        g.enforce(&mut out);
        Ok(out)
    }

    /// One Crank–Nicolson step of length `dt`.
    pub fn step(&self, v: &[f64]) -> Result<GridFunction> {
        self.cn_step(&self.factor, self.dt, v)
    }

    /// `P_τ v`: `n` base steps when `τ = n dt`, otherwise `⌈τ/dt⌉` equal sub-steps.
    pub fn apply(&self, v: &[f64], tau: f64) -> Result<GridFunction> {
        if !(tau >= 0.0) {
            return Err(LabError::usage(format!("semigroup time must be non-negative, got {tau}")));
        }
        if tau == 0.0 {
            return Ok(v.to_vec());
        }
        let ratio = tau / self.dt;
        let n = ratio.round();
        let mut w = v.to_vec();
        if n >= 1.0 && (ratio - n).abs() <= 1e-9 * ratio.max(1.0) {
            for _ in 0..n as usize {
                w = self.step(&w)?;
            }
            return Ok(w);
        }
        let n = ratio.ceil().max(1.0) as usize;
        let h = tau / n as f64;
        let factor = Self::factorise(&self.op, &self.active, h)?;
        for _ in 0..n {
            w = self.cn_step(&factor, h, &w)?;
        }
        Ok(w)
    }
}

fn thomas(factor: &Factor, rhs: &[f64]) -> Vec<f64> {
    let Factor::Tridiagonal { sub, cp, denom, .. } = factor else {
        unreachable!("thomas called on an iterative factor")
    };
    let n = rhs.len();
    let mut y = vec![0.0; n];
    y[0] = rhs[0] / denom[0];
    for q in 1..n {
        y[q] = (rhs[q] - sub[q] * y[q - 1]) / denom[q];
    }
    for q in (0..n - 1).rev() {
        y[q] -= cp[q] * y[q + 1];
    }
    y
}
