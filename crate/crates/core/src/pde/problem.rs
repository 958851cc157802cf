use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::gbm::TimeGrid;
use crate::hunt::CoefficientField;
use crate::reaction::{lipschitz_constants, LipschitzConstants, Reaction};
use crate::scenario::ScenarioSet;

use super::grid::{Boundary, GridFunction, SpatialGrid};
use super::operator::{discretize_operator, Operator};

/// Relative size allowed on the Dirichlet boundary for `Ψ`, `f` and `g`.
pub const BOUNDARY_TOLERANCE: f64 = 1e-8;

/// Inputs of a stochastic PDE `du + (Lu + f) dt + g · dB̄ = 0`, `u_T = Ψ`.
#[derive(Debug, Clone)]
pub struct GspdeData {
    pub grid: SpatialGrid,
    pub time: TimeGrid,
    pub field: CoefficientField,
    pub scenarios: ScenarioSet,
    /// Evaluated at `(T, x, 0, 0)`; must not depend on `y` or `z`.
    pub terminal: Reaction,
    pub f: Reaction,
    pub g: Vec<Reaction>,
    /// Feed `∇u · σ(x)` instead of `∇u` into the `z` slot of `f` and `g`.
    pub sigma_weighted_gradient: bool,
}

/// A validated problem: contraction property checked, operator discretised.
#[derive(Debug, Clone)]
pub struct GspdeProblem {
    data: GspdeData,
    constants: LipschitzConstants,
    psi: GridFunction,
    op: Operator,
    sigma_nodes: Option<Vec<DMatrix<f64>>>,
}

impl GspdeProblem {
    pub fn new(data: GspdeData) -> Result<Self> {
        data.grid.validate()?;
        data.terminal.validate()?;
        data.f.validate()?;
        for g in &data.g {
            g.validate()?;
        }
        if data.g.len() != data.scenarios.l() {
            return Err(LabError::usage(format!(
                "g has {} components, the G-Brownian motion has {}",
                data.g.len(),
                data.scenarios.l()
            )));
        }
        if !data.terminal.is_state_free() {
            return Err(LabError::usage("terminal condition must not depend on y or z"));
        }
        let op = discretize_operator(&data.field, &data.grid)?;
        let raw = lipschitz_constants(&data.f, &data.g);
        let constants = if data.sigma_weighted_gradient {
            let big = data.field.Lambda();
            LipschitzConstants {
                c: raw.c * big.max(1.0),
                alpha: raw.alpha * big,
            }
        } else {
            raw
        };
        let sb = data.scenarios.sigma_bar();
        let margin = 2.0 * data.field.lambda() - constants.alpha * sb * sb;
        if margin <= 0.0 {
            return Err(LabError::ContractionViolated {
                what: format!(
                    "ᾱσ̄² < 2λ fails for the stochastic PDE (ᾱ = {}, σ̄ = {sb}, λ = {})",
                    constants.alpha,
                    data.field.lambda()
                ),
                margin,
            });
        }
        let t_end = data.time.horizon;
        let mut psi = data.grid.sample(|x| data.terminal.eval(t_end, x, 0.0, &[]));
        if data.grid.boundary == Boundary::Dirichlet {
            check_negligible("terminal condition", &data.grid, &psi)?;
            for t in [0.0, 0.5 * t_end, t_end] {
                let zero = vec![0.0; data.grid.d];
                let fv = data.grid.sample(|x| data.f.eval(t, x, 0.0, &zero));
                check_negligible("f", &data.grid, &fv)?;
                for (j, g) in data.g.iter().enumerate() {
                    let gv = data.grid.sample(|x| g.eval(t, x, 0.0, &zero));
                    check_negligible(&format!("g[{j}]"), &data.grid, &gv)?;
                }
            }
        }
        data.grid.enforce(&mut psi);
        let sigma_nodes = if data.sigma_weighted_gradient {
            Some(
                (0..data.grid.len())
                    .map(|k| data.field.sigma(&data.grid.coord(k)))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            data,
            constants,
            psi,
            op,
            sigma_nodes,
        })
    }

    pub fn data(&self) -> &GspdeData {
        &self.data
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.data.grid
    }

    pub fn time(&self) -> TimeGrid {
        self.data.time
    }

    pub fn scenarios(&self) -> &ScenarioSet {
        &self.data.scenarios
    }

    pub fn field(&self) -> &CoefficientField {
        &self.data.field
    }

    pub fn operator(&self) -> &Operator {
        &self.op
    }

    pub fn psi(&self) -> &GridFunction {
        &self.psi
    }

    pub fn constants(&self) -> LipschitzConstants {
        self.constants
    }

    /// `2λ − ᾱσ̄²`.
    pub fn contraction_margin(&self) -> f64 {
        let sb = self.data.scenarios.sigma_bar();
        2.0 * self.data.field.lambda() - self.constants.alpha * sb * sb
    }

    /// Constants of the fixed-point argument for this problem.
    pub fn contraction(&self, epsilon: Option<f64>) -> Result<ContractionConstants> {
        let sb = self.data.scenarios.sigma_bar();
        let k = self.constants;
        contraction_constants(k.c, sb * sb * k.alpha, sb, self.data.field.lambda(), epsilon)
    }

    /// Same problem on another grid pair (used for refinement studies).
    pub fn with_grids(&self, grid: SpatialGrid, time: TimeGrid) -> Result<Self> {
        Self::new(GspdeData {
            grid,
            time,
            ..self.data.clone()
        })
    }

    /// Same problem with other data terms.
    pub fn with_terms(&self, terminal: Reaction, f: Reaction) -> Result<Self> {
        Self::new(GspdeData {
            terminal,
            f,
            ..self.data.clone()
        })
    }

    /// `F = f(t, ·, u, z)` and `Gʲ = gʲ(t, ·, u, z)` on every node, with `z`
    /// the gradient (optionally σ-weighted) of `u`.
    pub fn reaction_terms(&self, t: f64, u: &[f64]) -> (GridFunction, Vec<GridFunction>) {
        let grid = &self.data.grid;
        let grad = grid.gradient(u);
        let d = grid.d;
        let n = grid.len();
        let mut f = vec![0.0; n];
        let mut g = vec![vec![0.0; n]; self.data.g.len()];
        let mut z = vec![0.0; d];
        for k in 0..n {
            for a in 0..d {
                z[a] = grad[a][k];
            }
            if let Some(s) = &self.sigma_nodes {
                let raw = z.clone();
                for (b, zb) in z.iter_mut().enumerate() {
                    *zb = (0..d).map(|a| raw[a] * s[k][(a, b)]).sum();
                }
            }
            let x = grid.coord(k);
            f[k] = self.data.f.eval(t, &x, u[k], &z);
            for (j, gj) in self.data.g.iter().enumerate() {
                g[j][k] = gj.eval(t, &x, u[k], &z);
            }
        }
        grid.enforce(&mut f);
        for gj in &mut g {
            grid.enforce(gj);
        }
        (f, g)
    }
}

fn check_negligible(what: &str, grid: &SpatialGrid, v: &[f64]) -> Result<()> {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let edge = grid.boundary_max(v);
    if edge > BOUNDARY_TOLERANCE * max {
        return Err(LabError::usage(format!(
            "{what} is not negligible on the Dirichlet boundary ({edge:e} vs max {max:e}); enlarge the domain"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitialGuess {
    #[default]
    Zero,
    /// `P_{T−t} Ψ`.
    Homogeneous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardConfig {
    /// Young-inequality parameter; `None` selects the default rule.
    #[serde(default)]
    pub epsilon: Option<f64>,
    pub max_iter: usize,
    pub tol_rel: f64,
    #[serde(default)]
    pub initial_guess: InitialGuess,
    /// Crank–Nicolson sub-steps per time step.
    #[serde(default = "one")]
    pub substeps: usize,
}

fn one() -> usize {
    1
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self {
            epsilon: None,
            max_iter: 30,
            tol_rel: 1e-6,
            initial_guess: InitialGuess::Zero,
            substeps: 1,
        }
    }
}

/// Weights of the contraction norm and the guaranteed contraction factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionConstants {
    pub epsilon: f64,
    pub kappa: f64,
    /// Exponential weight (`γ` for the PDE, `β` for the BDSDE).
    pub rate: f64,
    pub delta: f64,
}

/// Constants of the fixed-point argument for `κ = (Cε + s)/(2λ)` where `s` is
/// the noise part of the contraction (`σ̄²ᾱ` or `αΛσ̄²`) and the `y`-weight is
/// `δ = C(σ̄² + ε)/(Cε + s)`, rate `1/ε + 2λδ`.
///
/// Without an explicit `ε`, `κ` is placed a tenth of the way from its
/// infimum `s/(2λ)` to 1.
pub fn contraction_constants(c: f64, s: f64, sigma_bar: f64, lambda: f64, epsilon: Option<f64>) -> Result<ContractionConstants> {
    let kappa0 = s / (2.0 * lambda);
    if kappa0 >= 1.0 {
        return Err(LabError::ContractionViolated {
            what: "noise part of the contraction factor is not below 1".into(),
            margin: 2.0 * lambda - s,
        });
    }
    let epsilon = match epsilon {
        Some(e) if e > 0.0 && e.is_finite() => e,
        Some(e) => return Err(LabError::usage(format!("epsilon must be positive, got {e}"))),
        None if c > 0.0 => 0.2 * lambda * (1.0 - kappa0) / c,
        None => 1.0,
    };
    let kappa = (c * epsilon + s) / (2.0 * lambda);
    if kappa >= 1.0 {
        return Err(LabError::ContractionViolated {
            what: format!("κ = {kappa} is not below 1 for ε = {epsilon}"),
            margin: 1.0 - kappa,
        });
    }
    let denom = c * epsilon + s;
    let delta = if denom > 0.0 {
        c * (sigma_bar * sigma_bar + epsilon) / denom
    } else {
        1.0
    };
    let delta = if delta > 0.0 { delta } else { 1.0 };
    Ok(ContractionConstants {
        epsilon,
        kappa,
        rate: 1.0 / epsilon + 2.0 * lambda * delta,
        delta,
    })
}
