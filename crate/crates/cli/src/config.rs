//! Experiment configuration files and their validation.

use std::path::{Path, PathBuf};

use gbdsde::bdsde::{BdsdeConfig, BdsdeProblem};
use gbdsde::gbm::{Integrand, TimeGrid};
use gbdsde::hunt::{CoefficientField, CoefficientSpec, InitialLaw};
use gbdsde::pde::{GspdeData, GspdeProblem, PicardConfig, SpatialGrid};
use gbdsde::reaction::Reaction;
use gbdsde::scenario::{ControlSchedule, ScenarioSet, ScenarioSetSpec};
use gbdsde::LabError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SCHEMA: &str = "gbdsde-experiment/1";

/// The configuration used when `--config` is omitted.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    pub seed: u64,
    pub scenarios: ScenarioSetSpec,
    pub field: CoefficientSpec,
    pub time: TimeGrid,
    pub space: SpatialGrid,
    pub problem: ProblemSpec,
    pub gbm: GbmSection,
    pub hunt: HuntSection,
    pub pde: PicardConfig,
    pub bdsde: BdsdeConfig,
    pub verify: VerifySection,
    /// Default output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub terminal: Reaction,
    pub f: Reaction,
    pub g: Vec<Reaction>,
    #[serde(default)]
    pub sigma_weighted_gradient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GbmSection {
    /// Paths per bundle for the solvers.
    pub paths: usize,
    /// Random piecewise-constant controls added to the constant ones.
    #[serde(default)]
    pub random_schedules: usize,
    #[serde(default = "three")]
    pub pieces: usize,
    pub diagnostics: DiagnosticsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    pub paths: usize,
    pub steps: usize,
    #[serde(default = "three_f")]
    pub n_se: f64,
    pub integrands: Vec<Integrand>,
    /// Relative gap allowed in the classical isometry (singleton scenario sets only).
    #[serde(default = "two_percent")]
    pub equality_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HuntSection {
    pub paths: usize,
    pub init: InitialLaw,
    pub bracket: BracketSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BracketSection {
    pub paths: usize,
    pub steps: usize,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub levels: usize,
    pub checkpoints: Vec<f64>,
    pub tolerance: f64,
    /// Allowed excess of a measured Picard ratio over `κ`.
    #[serde(default = "slack")]
    pub contraction_slack: f64,
    pub comparison: ComparisonSection,
    pub transport: TransportSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonSection {
    pub space: SpatialGrid,
    pub terminal: Reaction,
    pub f: Reaction,
    pub g: Vec<Reaction>,
    /// `Ψ′ = Ψ + shift`.
    pub shift: f64,
    /// `f′ = f + f_offset`.
    pub f_offset: f64,
    #[serde(default = "collar")]
    pub collar: f64,
    pub paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportSection {
    pub g: Vec<Reaction>,
    pub steps: usize,
    pub levels: usize,
    pub paths: usize,
    pub x_paths: usize,
    pub tolerance: f64,
}

fn three() -> usize {
    3
}

fn three_f() -> f64 {
    3.0
}

fn two_percent() -> f64 {
    0.02
}

fn slack() -> f64 {
    0.05
}

fn collar() -> f64 {
    gbdsde::verify::DEFAULT_COLLAR
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.schema != SCHEMA {
            return Err(CliError::Config(format!("schema: expected \"{SCHEMA}\", found \"{}\"", cfg.schema)));
        }
        Ok(cfg)
    }

    pub fn shipped() -> Self {
        Self::from_json(DEFAULT_CONFIG).expect("shipped config parses")
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Self::from_json(DEFAULT_CONFIG),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::from_json(&text).map_err(|e| match e {
                    CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    /// SHA-256 of the canonical (key-sorted, compact) JSON without `seed` and `output`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("seed");
            m.remove("output");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A configuration with every derived object built and checked.
#[derive(Debug, Clone)]
pub struct Setup {
    pub config: ExperimentConfig,
    pub hash: String,
    pub scenarios: ScenarioSet,
    pub field: CoefficientField,
    pub gspde: GspdeProblem,
    pub bdsde: BdsdeProblem,
    /// Base, terminal-shifted and drift-raised comparison problems.
    pub comparison: [GspdeProblem; 3],
}

fn field_err(section: &str) -> impl Fn(LabError) -> CliError + '_ {
    move |e| CliError::Invalid {
        field: section.to_string(),
        source: e,
    }
}

fn positive(section: &str, v: usize) -> Result<(), CliError> {
    if v == 0 {
        return Err(CliError::Config(format!("{section}: must be at least 1")));
    }
    Ok(())
}

impl Setup {
    pub fn new(config: ExperimentConfig) -> Result<Self, CliError> {
        let scenarios = ScenarioSet::from_spec(&config.scenarios).map_err(field_err("scenarios"))?;
        let field = CoefficientField::from_spec(&config.field).map_err(field_err("field"))?;
        if field.dim() != config.space.d {
            return Err(CliError::Config(format!(
                "space.d: field has dimension {}, grid has {}",
                field.dim(),
                config.space.d
            )));
        }
        let time = TimeGrid::new(config.time.horizon, config.time.steps).map_err(field_err("time"))?;
        for (name, v) in [
            ("gbm.paths", config.gbm.paths),
            ("gbm.pieces", config.gbm.pieces),
            ("gbm.diagnostics.paths", config.gbm.diagnostics.paths),
            ("gbm.diagnostics.steps", config.gbm.diagnostics.steps),
            ("hunt.paths", config.hunt.paths),
            ("hunt.bracket.paths", config.hunt.bracket.paths),
            ("hunt.bracket.steps", config.hunt.bracket.steps),
            ("verify.levels", config.verify.levels),
            ("verify.comparison.paths", config.verify.comparison.paths),
            ("verify.transport.steps", config.verify.transport.steps),
            ("verify.transport.levels", config.verify.transport.levels),
            ("verify.transport.paths", config.verify.transport.paths),
            ("verify.transport.x_paths", config.verify.transport.x_paths),
        ] {
            positive(name, v)?;
        }
        let p = &config.problem;
        let gspde = GspdeProblem::new(GspdeData {
            grid: config.space,
            time,
            field: field.clone(),
            scenarios: scenarios.clone(),
            terminal: p.terminal.clone(),
            f: p.f.clone(),
            g: p.g.clone(),
            sigma_weighted_gradient: p.sigma_weighted_gradient,
        })
        .map_err(field_err("problem"))?;
        gspde
            .contraction(config.pde.epsilon)
            .map_err(field_err("pde.epsilon"))?;
        let bdsde = BdsdeProblem::new(
            p.terminal.clone(),
            p.f.clone(),
            p.g.clone(),
            field.clone(),
            scenarios.clone(),
            time,
        )
        .map_err(field_err("problem"))?;
        bdsde.contraction(config.bdsde.epsilon).map_err(field_err("bdsde.epsilon"))?;
        config.bdsde.basis.validate().map_err(field_err("bdsde.basis"))?;
        let c = &config.verify.comparison;
        let base = GspdeProblem::new(GspdeData {
            grid: c.space,
            time,
            field: field.clone(),
            scenarios: scenarios.clone(),
            terminal: c.terminal.clone(),
            f: c.f.clone(),
            g: c.g.clone(),
            sigma_weighted_gradient: false,
        })
        .map_err(field_err("verify.comparison"))?;
        let shifted = base
            .with_terms(
                Reaction::Sum {
                    terms: vec![c.terminal.clone(), Reaction::Constant { value: c.shift }],
                },
                c.f.clone(),
            )
            .map_err(field_err("verify.comparison.shift"))?;
        let raised = base
            .with_terms(
                c.terminal.clone(),
                Reaction::Sum {
                    terms: vec![c.f.clone(), Reaction::Constant { value: c.f_offset }],
                },
            )
            .map_err(field_err("verify.comparison.f_offset"))?;
        let t = &config.verify.transport;
        if t.g.len() != scenarios.l() {
            return Err(CliError::Config(format!(
                "verify.transport.g: {} components, the G-Brownian motion has {}",
                t.g.len(),
                scenarios.l()
            )));
        }
        if let Some(bad) = t.g.iter().find(|g| !g.is_state_free()) {
            return Err(CliError::Config(format!(
                "verify.transport.g: {bad:?} depends on y or z; the transport identity needs state-free noise"
            )));
        }
        Ok(Self {
            hash: config.hash(),
            scenarios,
            field,
            gspde,
            bdsde,
            comparison: [base, shifted, raised],
            config,
        })
    }

    pub fn time(&self) -> TimeGrid {
        self.gspde.time()
    }

    /// One constant control per scenario followed by the random ones.
    pub fn schedules(&self, steps: usize) -> Result<Vec<ControlSchedule>, CliError> {
        let mut out: Vec<ControlSchedule> = (0..self.scenarios.len())
            .map(|k| ControlSchedule::constant(k, &self.scenarios, steps))
            .collect::<gbdsde::Result<_>>()?;
        for r in 0..self.config.gbm.random_schedules {
            out.push(ControlSchedule::random_piecewise(
                &self.scenarios,
                steps,
                self.config.gbm.pieces,
                self.config.seed,
                r as u64,
            )?);
        }
        Ok(out)
    }
}
