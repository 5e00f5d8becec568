//! Optimal extraction of a finite resource under a mean-reverting,
//! regime-switching jump-diffusion price.
//!
//! The value function is computed on a bounded grid by fixed-point iteration
//! of a finite-difference HJB scheme; the bang-bang policy and switching
//! curves are read off the solved field, and a Monte Carlo simulator of the
//! controlled process cross-checks the result.

// `!(a > b)` deliberately treats NaN as a violation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod grid;
pub mod measure;
pub mod model;
pub mod policy;
pub mod quadrature;
pub mod sim;
pub mod solver;
pub mod verify;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use grid::{Grid4D, PolicyField, ValueField};
pub use measure::{Atom, DensityFamily, LevyMeasure};
pub use model::{CostModel, DynamicsParams, EconomicModel, GeneratorMatrix, JumpConvention, MarketModel, PriceMap};
pub use policy::{extract_policy, switching_curve, switching_function, SwitchingField};
pub use quadrature::{ContractionReport, QuadratureScheme};
pub use sim::{analytic_oracle, EstimateReport, PathRecord, Simulator, StartState};
pub use solver::{ControlSet, ConvergenceReport, HjbSolver, IterationOrder, SchemeCoefficients, SchemeMode, SolverConfig};
