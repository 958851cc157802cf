use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Least-squares conditional expectations need this many samples per basis function.
pub const MIN_SAMPLES_PER_FUNCTION: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BasisKind {
    /// Monomials of total degree ≤ `degree` in the standardised features.
    Polynomial { degree: usize },
    /// Equal-width bins per axis over the sample range.
    Bins { count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionBasis {
    pub kind: BasisKind,
    #[serde(default)]
    pub ridge: f64,
}

impl RegressionBasis {
    pub fn polynomial(degree: usize) -> Self {
        Self {
            kind: BasisKind::Polynomial { degree },
            ridge: 0.0,
        }
    }

    pub fn bins(count: usize) -> Self {
        Self {
            kind: BasisKind::Bins { count },
            ridge: 0.0,
        }
    }

    pub fn with_ridge(self, ridge: f64) -> Self {
        Self { ridge, ..self }
    }

    pub fn size(&self, d: usize) -> usize {
        match self.kind {
            BasisKind::Polynomial { degree } => exponents(d, degree).len(),
            BasisKind::Bins { count } => count.pow(d as u32),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(LabError::usage("ridge parameter must be non-negative"));
        }
        if let BasisKind::Bins { count: 0 } = self.kind {
            return Err(LabError::usage("bin count must be positive"));
        }
        Ok(())
    }
}

fn exponents(d: usize, degree: usize) -> Vec<[usize; 2]> {
    let mut out = Vec::new();
    for total in 0..=degree {
        if d == 1 {
            out.push([total, 0]);
        } else {
            for a in (0..=total).rev() {
                out.push([a, total - a]);
            }
        }
    }
    out
}

/// A fitted regression function of the state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Predictor {
    d: usize,
    kind: BasisKind,
    #[serde(skip)]
    exps: Vec<[usize; 2]>,
    /// Per-axis centering (polynomials) or lower edge (bins).
    pub center: Vec<f64>,
    /// Per-axis scaling (polynomials) or bin width (bins).
    pub scale: Vec<f64>,
    pub coefficients: Vec<f64>,
    /// OLS standard errors of the coefficients (homoscedastic formula).
    pub std_errors: Vec<f64>,
    pub residual_rms: f64,
}

impl Predictor {
    fn standardise(&self, x: &[f64]) -> [f64; 2] {
        let mut z = [0.0; 2];
        for a in 0..self.d {
            z[a] = (x[a] - self.center[a]) / self.scale[a];
        }
        z
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self.kind {
            BasisKind::Polynomial { .. } => {
                let z = self.standardise(x);
                self.exps
                    .iter()
                    .zip(&self.coefficients)
                    .map(|(e, c)| c * monomial(&z[..self.d], e))
                    .sum()
            }
            BasisKind::Bins { count } => self.coefficients[bin_index(x, &self.center, &self.scale, count)],
        }
    }

    /// Gradient of the fitted function (zero for bins).
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            BasisKind::Polynomial { .. } => {
                let z = self.standardise(x);
                let z = &z[..self.d];
                let mut g = vec![0.0; self.d];
                for (e, c) in self.exps.iter().zip(&self.coefficients) {
                    for a in 0..self.d {
                        if e[a] == 0 {
                            continue;
                        }
                        let mut de = *e;
                        de[a] -= 1;
                        g[a] += c * e[a] as f64 * monomial(z, &de) / self.scale[a];
                    }
                }
                g
            }
            BasisKind::Bins { .. } => vec![0.0; self.d],
        }
    }
}

fn monomial(z: &[f64], e: &[usize; 2]) -> f64 {
    let mut v = 1.0;
    for (a, za) in z.iter().enumerate() {
        v *= za.powi(e[a] as i32);
    }
    v
}

fn bin_index(x: &[f64], lo: &[f64], width: &[f64], count: usize) -> usize {
    let mut idx = 0;
    for a in (0..lo.len()).rev() {
        let b = if width[a] > 0.0 {
            (((x[a] - lo[a]) / width[a]).floor().max(0.0) as usize).min(count - 1)
        } else {
            0
        };
        idx = idx * count + b;
    }
    idx
}

/// Least-squares estimate of `E[target | X]` from samples. `features` holds
/// `d` coordinates per sample.
pub fn regress_conditional(targets: &[f64], features: &[f64], d: usize, basis: &RegressionBasis) -> Result<Predictor> {
    basis.validate()?;
    let n = targets.len();
    if d == 0 || features.len() != n * d {
        return Err(LabError::usage("feature array does not match the targets"));
    }
    let k = basis.size(d);
    if n < MIN_SAMPLES_PER_FUNCTION * k {
        return Err(LabError::usage(format!(
            "{n} samples are too few for {k} basis functions (need {})",
            MIN_SAMPLES_PER_FUNCTION * k
        )));
    }
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    let mut mean = vec![0.0; d];
    for s in 0..n {
        for a in 0..d {
            let v = features[s * d + a];
            lo[a] = lo[a].min(v);
            hi[a] = hi[a].max(v);
            mean[a] += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    if (0..d).all(|a| hi[a] == lo[a]) && basis.size(d) > 1 {
        // Degenerate features (point start): only the constant is identifiable.
        let constant = RegressionBasis {
            kind: match basis.kind {
                BasisKind::Polynomial { .. } => BasisKind::Polynomial { degree: 0 },
                BasisKind::Bins { .. } => BasisKind::Bins { count: 1 },
            },
            ridge: basis.ridge,
        };
        return regress_conditional(targets, features, d, &constant);
    }
    match basis.kind {
        BasisKind::Polynomial { degree } => {
            let mut sd = vec![0.0; d];
            for s in 0..n {
                for a in 0..d {
                    sd[a] += (features[s * d + a] - mean[a]).powi(2);
                }
            }
            let scale: Vec<f64> = sd.iter().map(|v| (v / n as f64).sqrt()).map(|v| if v > 0.0 { v } else { 1.0 }).collect();
            let exps = exponents(d, degree);
            let row = |s: usize, out: &mut [f64]| {
                let mut z = [0.0; 2];
                for a in 0..d {
                    z[a] = (features[s * d + a] - mean[a]) / scale[a];
                }
                for (o, e) in out.iter_mut().zip(&exps) {
                    *o = monomial(&z[..d], e);
                }
            };
            // Normal equations, accumulated in fixed-size chunks for a
            // reproducible summation order.
            const CHUNK: usize = 1024;
            let partial: Vec<(Vec<f64>, Vec<f64>)> = (0..n.div_ceil(CHUNK))
                .into_par_iter()
                .map(|c| {
                    let mut g = vec![0.0; k * k];
                    let mut r = vec![0.0; k];
                    let mut phi = vec![0.0; k];
                    for s in c * CHUNK..((c + 1) * CHUNK).min(n) {
                        row(s, &mut phi);
                        for i in 0..k {
                            r[i] += phi[i] * targets[s];
                            for j in 0..=i {
                                g[i * k + j] += phi[i] * phi[j];
                            }
                        }
                    }
                    (g, r)
                })
                .collect();
            let mut gram = DMatrix::<f64>::zeros(k, k);
            let mut rhs = DVector::<f64>::zeros(k);
            for (g, r) in &partial {
                for i in 0..k {
                    rhs[i] += r[i];
                    for j in 0..=i {
                        gram[(i, j)] += g[i * k + j];
                    }
                }
            }
            for i in 0..k {
                for j in 0..i {
                    gram[(j, i)] = gram[(i, j)];
                }
            }
            gram /= n as f64;
            rhs /= n as f64;
            for i in 1..k {
                gram[(i, i)] += basis.ridge;
            }
            let chol = gram.clone().cholesky().ok_or_else(|| {
                LabError::numerical(format!("regression design is rank deficient ({k} functions, {n} samples)"))
            })?;
            let coef = chol.solve(&rhs);
            let mut phi = vec![0.0; k];
            let sse: f64 = (0..n)
                .map(|s| {
                    row(s, &mut phi);
                    let fit: f64 = phi.iter().zip(coef.iter()).map(|(p, c)| p * c).sum();
                    (targets[s] - fit).powi(2)
                })
                .sum();
            let dof = (n - k).max(1) as f64;
            let sigma2 = sse / dof;
            let inv = chol.inverse();
            let std_errors = (0..k).map(|i| (sigma2 * inv[(i, i)] / n as f64).max(0.0).sqrt()).collect();
            Ok(Predictor {
                d,
                kind: basis.kind,
                exps,
                center: mean,
                scale,
                coefficients: coef.iter().copied().collect(),
                std_errors,
                residual_rms: (sse / n as f64).sqrt(),
            })
        }
        BasisKind::Bins { count } => {
            let width: Vec<f64> = (0..d).map(|a| (hi[a] - lo[a]) / count as f64).collect();
            let total: f64 = targets.iter().sum::<f64>() / n as f64;
            let mut sums = vec![0.0; k];
            let mut counts = vec![0usize; k];
            for s in 0..n {
                let b = bin_index(&features[s * d..(s + 1) * d], &lo, &width, count);
                sums[b] += targets[s];
                counts[b] += 1;
            }
            let ridge_mass = basis.ridge * n as f64 / k as f64;
            let coef: Vec<f64> = (0..k)
                .map(|b| {
                    let m = counts[b] as f64 + ridge_mass;
                    if m > 0.0 {
                        (sums[b] + ridge_mass * total) / m
                    } else {
                        total
                    }
                })
                .collect();
            let mut sse = 0.0;
            let mut sq = vec![0.0; k];
            for s in 0..n {
                let b = bin_index(&features[s * d..(s + 1) * d], &lo, &width, count);
                let r = targets[s] - coef[b];
                sse += r * r;
                sq[b] += r * r;
            }
            let std_errors = (0..k)
                .map(|b| {
                    if counts[b] > 1 {
                        (sq[b] / (counts[b] - 1) as f64 / counts[b] as f64).sqrt()
                    } else {
                        f64::INFINITY
                    }
                })
                .collect();
            Ok(Predictor {
                d,
                kind: basis.kind,
                exps: Vec::new(),
                center: lo,
                scale: width,
                coefficients: coef,
                std_errors,
                residual_rms: (sse / n as f64).sqrt(),
            })
        }
    }
}

/// `Z(x) = (2Δt)^{-1} a(x)^{-1} E[next · ΔM | X = x]` at every sample, each
/// coordinate of the conditional expectation obtained by regression.
/// `a_inv` holds `a(X)^{-1}` row-major (`d × d` per sample).
pub fn extract_z(next: &[f64], dm: &[f64], a_inv: &[f64], features: &[f64], d: usize, dt: f64, basis: &RegressionBasis) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(LabError::usage("time step must be positive"));
    }
    let n = next.len();
    if dm.len() != n * d || a_inv.len() != n * d * d {
        return Err(LabError::usage("martingale increments or a⁻¹ have the wrong shape"));
    }
    let mut cond = vec![0.0; n * d];
    for k in 0..d {
        let t: Vec<f64> = (0..n).map(|s| next[s] * dm[s * d + k]).collect();
        let p = regress_conditional(&t, features, d, basis)?;
        for s in 0..n {
            cond[s * d + k] = p.eval(&features[s * d..(s + 1) * d]);
        }
    }
    let mut z = vec![0.0; n * d];
    for s in 0..n {
        for i in 0..d {
            let mut v = 0.0;
            for j in 0..d {
                v += a_inv[s * d * d + i * d + j] * cond[s * d + j];
            }
            z[s * d + i] = v / (2.0 * dt);
        }
    }
    Ok(z)
}
