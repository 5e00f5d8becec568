//! Market model: regime chain, price dynamics, jump measure and the
//! cost / profit / terminal value functions of the extraction problem.

use std::fmt;

use crate::error::{Error, Result};
use crate::measure::LevyMeasure;

/// Transition-rate matrix of the market regime chain.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorMatrix {
    rates: Vec<Vec<f64>>,
}

impl GeneratorMatrix {
    /// Wraps a square matrix. Generator properties are checked by [`validate_model`].
    pub fn new(rates: Vec<Vec<f64>>) -> Result<Self> {
        let m = rates.len();
        if m == 0 || rates.iter().any(|row| row.len() != m) {
            return Err(Error::Construction("generator matrix must be square and non-empty".into()));
        }
        Ok(GeneratorMatrix { rates })
    }

    /// The two-state bull/bear chain with exit rates `λ1`, `λ2`.
    pub fn two_state(lambda1: f64, lambda2: f64) -> Self {
        GeneratorMatrix {
            rates: vec![vec![-lambda1, lambda1], vec![lambda2, -lambda2]],
        }
    }

    /// A chain that never leaves its initial state.
    pub fn absorbing(regimes: usize) -> Self {
        GeneratorMatrix {
            rates: vec![vec![0.0; regimes]; regimes],
        }
    }

    pub fn dim(&self) -> usize {
        self.rates.len()
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.rates[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rates
    }

    /// Sum of the off-diagonal rates of row `i`.
    pub fn exit_rate(&self, i: usize) -> f64 {
        self.rates[i]
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, q)| q)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsParams {
    pub kappa: f64,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub gamma: Vec<f64>,
    pub discount_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriceMap {
    /// `price = e^x`
    Exponential,
    /// `price = x`
    Linear,
}

impl PriceMap {
    #[inline]
    pub fn price(self, x: f64) -> f64 {
        match self {
            PriceMap::Exponential => x.exp(),
            PriceMap::Linear => x,
        }
    }
}

/// How a jump of size `z` displaces the state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JumpConvention {
    /// `x → x + γ x z`
    Proportional,
    /// `x → x + γ z`
    Additive,
}

impl JumpConvention {
    /// Displacement `x' - x` produced by a jump of size `z`.
    #[inline]
    pub fn displacement(self, x: f64, gamma: f64, z: f64) -> f64 {
        match self {
            JumpConvention::Proportional => gamma * x * z,
            JumpConvention::Additive => gamma * z,
        }
    }
}

/// Extraction cost `C(t, y, u) = a + m u (b y + c)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModel {
    pub fixed: f64,
    pub scale: f64,
    pub reserve_slope: f64,
    pub unit: f64,
}

impl CostModel {
    #[inline]
    pub fn cost(&self, y: f64, u: f64) -> f64 {
        self.fixed + self.scale * u * (self.reserve_slope * y + self.unit)
    }

    /// `∂C/∂u = m (b y + c)`.
    #[inline]
    pub fn marginal(&self, y: f64) -> f64 {
        self.scale * (self.reserve_slope * y + self.unit)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EconomicModel {
    pub cost: CostModel,
    /// Maximum extraction rate `ū`.
    pub max_rate: f64,
    /// Field size `K`.
    pub reserve_cap: f64,
    /// Lease horizon `T`.
    pub horizon: f64,
    /// Price offset `m_T` in the terminal value.
    pub terminal_offset: f64,
}

#[derive(Clone, Debug)]
pub struct MarketModel {
    pub generator: GeneratorMatrix,
    pub dynamics: DynamicsParams,
    pub measure: LevyMeasure,
    pub price_map: PriceMap,
    pub jump_convention: JumpConvention,
    pub economics: EconomicModel,
}

/// List of violated model invariants; empty means well formed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        if !self.violations.contains(&msg) {
            self.violations.push(msg);
        }
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::Validation(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.violations.join("; "))
    }
}

const ROW_SUM_TOL: f64 = 1e-12;

/// Checks every model invariant and reports all violations at once.
pub fn validate_model(model: &MarketModel) -> ValidationReport {
    let mut report = ValidationReport::default();
    let m = model.generator.dim();
    for (i, row) in model.generator.rows().iter().enumerate() {
        for (j, q) in row.iter().enumerate() {
            if !q.is_finite() {
                report.push("generator entries must be finite");
            } else if i != j && *q < 0.0 {
                report.push("generator off-diagonal rates must be nonnegative");
            }
        }
        let sum: f64 = row.iter().sum();
        if sum.abs() > ROW_SUM_TOL * (1.0 + row.iter().map(|q| q.abs()).sum::<f64>()) {
            report.push("generator rows must sum to zero");
        }
    }

    let d = &model.dynamics;
    for (name, v) in [("mu", &d.mu), ("sigma", &d.sigma), ("gamma", &d.gamma)] {
        if v.len() != m {
            report.push(format!("{name} must have one entry per regime ({m})"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            report.push(format!("{name} entries must be finite"));
        }
    }
    if !(d.kappa.is_finite() && d.kappa >= 0.0) {
        report.push("mean-reversion rate must be nonnegative");
    }
    if d.sigma.iter().any(|s| *s < 0.0) {
        report.push("volatility must be nonnegative");
    }
    if !(d.discount_rate.is_finite() && d.discount_rate > 0.0) {
        report.push("discount rate must be positive");
    }

    for v in model.measure.violations() {
        report.push(v);
    }

    let e = &model.economics;
    let c = &e.cost;
    if !(c.fixed.is_finite() && c.fixed >= 0.0) {
        report.push("fixed cost must be nonnegative");
    }
    if !(c.scale.is_finite() && c.scale > 0.0) {
        report.push("cost scale must be positive");
    }
    if !(c.reserve_slope.is_finite() && c.unit.is_finite()) {
        report.push("cost coefficients must be finite");
    }
    if !(e.max_rate.is_finite() && e.max_rate >= 0.0) {
        report.push("maximum extraction rate must be nonnegative");
    }
    if !(e.reserve_cap.is_finite() && e.reserve_cap > 0.0) {
        report.push("reserve capacity must be positive");
    }
    if !(e.horizon.is_finite() && e.horizon > 0.0) {
        report.push("horizon must be positive");
    }
    if !e.terminal_offset.is_finite() {
        report.push("terminal offset must be finite");
    }
    report
}

impl MarketModel {
    pub fn regimes(&self) -> usize {
        self.generator.dim()
    }

    #[inline]
    pub fn price(&self, x: f64) -> f64 {
        self.price_map.price(x)
    }

    /// `L(t, x, y, u) = price(x) u - C(t, y, u)` without domain checks.
    #[inline]
    pub fn profit_rate_unchecked(&self, x: f64, y: f64, u: f64) -> f64 {
        self.price(x) * u - self.economics.cost.cost(y, u)
    }

    /// Profit rate of operating at `(t, x, y)` with extraction rate `u` in regime `i`.
    pub fn profit_rate(&self, _t: f64, x: f64, y: f64, u: f64, _regime: usize) -> Result<f64> {
        let e = &self.economics;
        if !(0.0..=e.max_rate).contains(&u) {
            return Err(Error::Domain(format!("extraction rate {u} outside [0, {}]", e.max_rate)));
        }
        self.check_reserve(y)?;
        Ok(self.profit_rate_unchecked(x, y, u))
    }

    /// Marginal profit `∂L/∂u = price(x) - ∂C/∂u`.
    #[inline]
    pub fn marginal_profit(&self, x: f64, y: f64) -> f64 {
        self.price(x) - self.economics.cost.marginal(y)
    }

    #[inline]
    pub fn terminal_value_unchecked(&self, x: f64, y: f64) -> f64 {
        let e = &self.economics;
        (e.reserve_cap - y) * (self.price(x) - e.terminal_offset)
    }

    /// `Ψ(T, x, y) = (K - y)(price(x) - m_T)`.
    pub fn terminal_value(&self, x: f64, y: f64) -> Result<f64> {
        self.check_reserve(y)?;
        Ok(self.terminal_value_unchecked(x, y))
    }

    fn check_reserve(&self, y: f64) -> Result<()> {
        let k = self.economics.reserve_cap;
        if !(0.0..=k).contains(&y) {
            return Err(Error::Domain(format!("reserve {y} outside [0, {k}]")));
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn reference_like() -> MarketModel {
        MarketModel {
            generator: GeneratorMatrix::two_state(0.01, 0.15),
            dynamics: DynamicsParams {
                kappa: 0.01,
                mu: vec![55.0, 35.0],
                sigma: vec![0.2, 0.3],
                gamma: vec![0.1, 0.1],
                discount_rate: 0.05,
            },
            measure: LevyMeasure::uniform(-1.0, 1.0, 0.5),
            price_map: PriceMap::Exponential,
            jump_convention: JumpConvention::Proportional,
            economics: EconomicModel {
                cost: CostModel {
                    fixed: 5.0,
                    scale: 1.0,
                    reserve_slope: 0.0,
                    unit: 20.0,
                },
                max_rate: 50_000.0,
                reserve_cap: 10.0,
                horizon: 10.0,
                terminal_offset: 20.0,
            },
        }
    }

    #[test]
    fn reference_parameters_validate() {
        let m = reference_like();
        let r = validate_model(&m);
        assert!(r.is_valid(), "{r}");
    }

    #[test]
    fn row_sum_violation() {
        let mut m = reference_like();
        m.generator = GeneratorMatrix::new(vec![vec![-0.01, 0.03], vec![0.15, -0.15]]).unwrap();
        let r = validate_model(&m);
        assert_eq!(r.violations, vec!["generator rows must sum to zero".to_string()]);
    }

    #[test]
    fn negative_volatility_violation() {
        let mut m = reference_like();
        m.dynamics.sigma[1] = -0.2;
        let r = validate_model(&m);
        assert_eq!(r.violations, vec!["volatility must be nonnegative".to_string()]);
    }

    #[test]
    fn all_violations_reported_together() {
        let mut m = reference_like();
        m.dynamics.sigma[0] = -1.0;
        m.dynamics.discount_rate = 0.0;
        m.economics.cost.scale = 0.0;
        let r = validate_model(&m);
        assert_eq!(r.violations.len(), 3);
        assert!(r.into_result().is_err());
    }

    #[test]
    fn profit_rate_examples() {
        let mut m = reference_like();
        let p = m.profit_rate(0.0, 30f64.ln(), 5.0, 1.0, 0).unwrap();
        assert!((p - 5.0).abs() < 1e-12);
        assert_eq!(m.profit_rate(0.0, 3.0, 5.0, 0.0, 0).unwrap(), -5.0);
        m.price_map = PriceMap::Linear;
        assert_eq!(m.profit_rate(0.0, 20.0, 5.0, 1.0, 0).unwrap(), -5.0);
    }

    #[test]
    fn profit_rate_domain_errors() {
        let m = reference_like();
        assert!(matches!(m.profit_rate(0.0, 1.0, 5.0, -1.0, 0), Err(Error::Domain(_))));
        assert!(matches!(m.profit_rate(0.0, 1.0, 5.0, 60_000.0, 0), Err(Error::Domain(_))));
        assert!(matches!(m.profit_rate(0.0, 1.0, 11.0, 1.0, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn terminal_value_examples() {
        let mut m = reference_like();
        m.price_map = PriceMap::Linear;
        assert_eq!(m.terminal_value(30.0, 4.0).unwrap(), 60.0);
        assert_eq!(m.terminal_value(123.0, 10.0).unwrap(), 0.0);
        assert_eq!(m.terminal_value(20.0, 3.0).unwrap(), 0.0);
        assert!(m.terminal_value(20.0, -0.1).is_err());
    }

    #[test]
    fn marginal_cost_matches_derivative() {
        let c = CostModel {
            fixed: 5.0,
            scale: 2.0,
            reserve_slope: 0.5,
            unit: 3.0,
        };
        let y = 4.0;
        let du = 1e-3;
        let fd = (c.cost(y, 1.0 + du) - c.cost(y, 1.0)) / du;
        assert!((fd - c.marginal(y)).abs() < 1e-9);
    }
}
