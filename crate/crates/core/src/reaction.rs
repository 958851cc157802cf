//! Reaction terms `f(t, x, y, z)` and `g = (g¹, …, gˡ)` built from presets.
//!
//! Presets carry their own Lipschitz constants, so the contraction checks
//! never have to trust a user-declared number.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Reaction {
    Zero {},
    Constant {
        value: f64,
    },
    /// `slope · y + intercept`.
    AffineInY {
        slope: f64,
        intercept: f64,
    },
    /// `amplitude · sin(frequency · x₁) · e^{−|x|²/2w²} · cos(time_frequency · t)`;
    /// the envelope and the time factor are optional.
    SinInX {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        envelope: Option<f64>,
        #[serde(default)]
        time_frequency: Option<f64>,
    },
    /// `amplitude · e^{−|x − center|²/2w²}` with a scalar center on every axis.
    Gaussian {
        amplitude: f64,
        width: f64,
        #[serde(default)]
        center: f64,
    },
    /// `y_coeff · tanh(y) + z_coeff · tanh(z₁)`.
    Tanh {
        y_coeff: f64,
        z_coeff: f64,
    },
    Sum {
        terms: Vec<Reaction>,
    },
}

/// Lipschitz moduli in the `y` and `z` slots: `|Δh| ≤ y |Δy| + z |Δz|`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Lipschitz {
    pub y: f64,
    pub z: f64,
}

impl Reaction {
    pub fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        match self {
            Reaction::Zero {} => 0.0,
            Reaction::Constant { value } => *value,
            Reaction::AffineInY { slope, intercept } => slope * y + intercept,
            Reaction::SinInX {
                amplitude,
                frequency,
                envelope,
                time_frequency,
            } => {
                let mut v = amplitude * (frequency * x[0]).sin();
                if let Some(w) = envelope {
                    v *= (-norm2(x) / (2.0 * w * w)).exp();
                }
                if let Some(om) = time_frequency {
                    v *= (om * t).cos();
                }
                v
            }
            Reaction::Gaussian {
                amplitude,
                width,
                center,
            } => {
                let r2: f64 = x.iter().map(|xi| (xi - center).powi(2)).sum();
                amplitude * (-r2 / (2.0 * width * width)).exp()
            }
            Reaction::Tanh { y_coeff, z_coeff } => {
                let zz = z.first().copied().unwrap_or(0.0);
                y_coeff * y.tanh() + z_coeff * zz.tanh()
            }
            Reaction::Sum { terms } => terms.iter().map(|r| r.eval(t, x, y, z)).sum(),
        }
    }

    pub fn lipschitz(&self) -> Lipschitz {
        match self {
            Reaction::AffineInY { slope, .. } => Lipschitz { y: slope.abs(), z: 0.0 },
            Reaction::Tanh { y_coeff, z_coeff } => Lipschitz {
                y: y_coeff.abs(),
                z: z_coeff.abs(),
            },
            Reaction::Sum { terms } => terms.iter().fold(Lipschitz::default(), |acc, r| {
                let l = r.lipschitz();
                Lipschitz {
                    y: acc.y + l.y,
                    z: acc.z + l.z,
                }
            }),
            _ => Lipschitz::default(),
        }
    }

    /// True when the term ignores `y` and `z`.
    pub fn is_state_free(&self) -> bool {
        let l = self.lipschitz();
        l.y == 0.0 && l.z == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(LabError::usage(format!("reaction preset: {what}")));
        match self {
            Reaction::Constant { value } if !value.is_finite() => bad("constant must be finite"),
            Reaction::AffineInY { slope, intercept } if !(slope.is_finite() && intercept.is_finite()) => {
                bad("affine coefficients must be finite")
            }
            Reaction::SinInX { envelope: Some(w), .. } if !(*w > 0.0) => bad("envelope width must be positive"),
            Reaction::Gaussian { width, .. } if !(*width > 0.0) => bad("gaussian width must be positive"),
            Reaction::Tanh { y_coeff, z_coeff } if !(y_coeff.is_finite() && z_coeff.is_finite()) => {
                bad("tanh coefficients must be finite")
            }
            Reaction::Sum { terms } => terms.iter().try_for_each(Reaction::validate),
            _ => Ok(()),
        }
    }
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Squared-norm constants in the form used by the existence theorems:
/// `|Δf|² ≤ C(|Δy|² + |Δz|²)` and `Σ_j |Δgʲ|² ≤ C|Δy|² + α|Δz|²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzConstants {
    pub c: f64,
    pub alpha: f64,
}

/// Bounds for the pair `(f, g)`. A `g` component depending on both slots is
/// split with `2ab ≤ a² + b²`, which doubles both of its contributions.
pub fn lipschitz_constants(f: &Reaction, g: &[Reaction]) -> LipschitzConstants {
    let lf = f.lipschitz();
    let c_f = lf.y * lf.y + lf.z * lf.z;
    let (mut c_g, mut alpha) = (0.0, 0.0);
    for gj in g {
        let l = gj.lipschitz();
        let k = if l.y > 0.0 && l.z > 0.0 { 2.0 } else { 1.0 };
        c_g += k * l.y * l.y;
        alpha += k * l.z * l.z;
    }
    LipschitzConstants {
        c: c_f.max(c_g),
        alpha,
    }
}
