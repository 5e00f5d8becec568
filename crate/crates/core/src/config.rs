//! Run configuration, read from TOML.
//!
//! Every table rejects unknown keys and the file must declare
//! `schema_version = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid4D;
use crate::measure::{Atom, LevyMeasure};
use crate::model::{CostModel, DynamicsParams, EconomicModel, GeneratorMatrix, JumpConvention, MarketModel, PriceMap};
use crate::quadrature::QuadratureScheme;
use crate::sim::StartState;
use crate::solver::{ControlSet, IterationOrder, SchemeMode, SolverConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// The bundled reference configuration.
pub const REFERENCE_TOML: &str = include_str!("../config/reference.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub quadrature: QuadratureConfig,
    pub solver: SolverSection,
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub generator: Vec<Vec<f64>>,
    pub kappa: f64,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub gamma: Vec<f64>,
    pub discount_rate: f64,
    pub price_map: PriceMapName,
    #[serde(default)]
    pub jump_convention: JumpConventionName,
    pub measure: MeasureConfig,
    pub economics: EconomicsConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriceMapName {
    Exponential,
    Linear,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JumpConventionName {
    #[default]
    Proportional,
    Additive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MeasureConfig {
    Null,
    Uniform {
        lower: f64,
        upper: f64,
        total_mass: f64,
    },
    DoubleExponential {
        up_probability: f64,
        up_rate: f64,
        down_rate: f64,
        total_mass: f64,
    },
    Atoms {
        sizes: Vec<f64>,
        masses: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EconomicsConfig {
    pub reserve_cap: f64,
    pub horizon: f64,
    pub max_rate: f64,
    pub fixed_cost: f64,
    pub cost_scale: f64,
    pub cost_reserve_slope: f64,
    pub cost_unit: f64,
    pub terminal_offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub time_step: f64,
    pub price_step: f64,
    pub reserve_step: f64,
    pub price_cap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureConfig {
    pub step: f64,
    pub truncation: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    PaperFaithful,
    Upwind,
}

impl From<ModeName> for SchemeMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::PaperFaithful => SchemeMode::PaperFaithful,
            ModeName::Upwind => SchemeMode::Upwind,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderName {
    #[default]
    Jacobi,
    BackwardSlices,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub mode: ModeName,
    #[serde(default)]
    pub order: OrderName,
    /// `0` evaluates `{0, ū}` only; otherwise that many equally spaced rates.
    #[serde(default)]
    pub dense_controls: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartConfig {
    pub time: f64,
    pub price: f64,
    pub reserve: f64,
    pub regime: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub paths: usize,
    pub time_step: f64,
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
    /// Slack constant `C` in `|V - mean| ≤ 3 SE + C (h + k + l)`.
    pub error_constant: f64,
    pub starts: Vec<StartConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { directory: "out".into() }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn reference() -> Self {
        Self::from_toml(REFERENCE_TOML).expect("bundled reference config parses")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn market_model(&self) -> Result<MarketModel> {
        let m = &self.model;
        let e = &m.economics;
        let measure = match &m.measure {
            MeasureConfig::Null => LevyMeasure::Null,
            MeasureConfig::Uniform { lower, upper, total_mass } => LevyMeasure::uniform(*lower, *upper, *total_mass),
            MeasureConfig::DoubleExponential {
                up_probability,
                up_rate,
                down_rate,
                total_mass,
            } => LevyMeasure::double_exponential(*up_probability, *up_rate, *down_rate, *total_mass),
            MeasureConfig::Atoms { sizes, masses } => {
                if sizes.len() != masses.len() {
                    return Err(Error::Config("atom sizes and masses differ in length".into()));
                }
                LevyMeasure::Atoms(sizes.iter().zip(masses).map(|(&size, &mass)| Atom { size, mass }).collect())
            }
        };
        let model = MarketModel {
            generator: GeneratorMatrix::new(m.generator.clone())?,
            dynamics: DynamicsParams {
                kappa: m.kappa,
                mu: m.mu.clone(),
                sigma: m.sigma.clone(),
                gamma: m.gamma.clone(),
                discount_rate: m.discount_rate,
            },
            measure,
            price_map: match m.price_map {
                PriceMapName::Exponential => PriceMap::Exponential,
                PriceMapName::Linear => PriceMap::Linear,
            },
            jump_convention: match m.jump_convention {
                JumpConventionName::Proportional => JumpConvention::Proportional,
                JumpConventionName::Additive => JumpConvention::Additive,
            },
            economics: EconomicModel {
                cost: CostModel {
                    fixed: e.fixed_cost,
                    scale: e.cost_scale,
                    reserve_slope: e.cost_reserve_slope,
                    unit: e.cost_unit,
                },
                max_rate: e.max_rate,
                reserve_cap: e.reserve_cap,
                horizon: e.horizon,
                terminal_offset: e.terminal_offset,
            },
        };
        crate::model::validate_model(&model).into_result()?;
        Ok(model)
    }

    pub fn grid(&self, model: &MarketModel) -> Result<Grid4D> {
        let g = &self.grid;
        Grid4D::new(model, g.time_step, g.price_step, g.reserve_step, g.price_cap)
    }

    pub fn quadrature(&self, model: &MarketModel) -> Result<QuadratureScheme> {
        QuadratureScheme::build(&model.measure, self.quadrature.step, self.quadrature.truncation)
    }

    pub fn solver_config(&self) -> SolverConfig {
        let s = &self.solver;
        SolverConfig {
            tolerance: s.tolerance,
            max_iterations: s.max_iterations,
            mode: s.mode.into(),
            order: match s.order {
                OrderName::Jacobi => IterationOrder::Jacobi,
                OrderName::BackwardSlices => IterationOrder::BackwardSlices,
            },
            controls: if s.dense_controls >= 2 {
                ControlSet::Dense(s.dense_controls)
            } else {
                ControlSet::Endpoints
            },
        }
    }

    pub fn starts(&self) -> Vec<StartState> {
        self.simulation
            .starts
            .iter()
            .map(|s| StartState {
                time: s.time,
                price: s.price,
                reserve: s.reserve,
                regime: s.regime,
            })
            .collect()
    }

    /// Runs every load-time check: model invariants, grid, quadrature and solver settings.
    pub fn validate(&self) -> Result<MarketModel> {
        let model = self.market_model()?;
        self.grid(&model)?;
        self.quadrature(&model)?;
        self.solver_config().validate()?;
        let sim = &self.simulation;
        if sim.paths < 2 {
            return Err(Error::Config("simulation.paths must be at least 2".into()));
        }
        if !(sim.time_step > 0.0) {
            return Err(Error::Config("simulation.time_step must be positive".into()));
        }
        Ok(model)
    }
}
