//! Composite Simpson approximation of the jump integral.
//!
//! The jump operator is split as
//! `∫ f(x + γxz) ν(dz) - ∂f/∂x ∫_{-1}^{1} γxz ν(dz) - f(x) Γ`;
//! the first integral is discretized by weights `c_j` at nodes `z_j` over the
//! truncated support, the compensator by weights `d_j` over `[-1, 1]`.

use crate::error::{Error, Result};
use crate::measure::{LevyMeasure, TruncatedDensity};
use crate::model::JumpConvention;

#[derive(Clone, Debug)]
pub struct QuadratureScheme {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    compensator_nodes: Vec<f64>,
    compensator_weights: Vec<f64>,
    step: f64,
    truncation: f64,
    total_mass: f64,
    truncated_mass_fraction: Option<f64>,
    measure: LevyMeasure,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContractionReport {
    /// `|Σ c_j - Γ| / r`
    pub value: f64,
    pub weight_sum: f64,
    pub total_mass: f64,
    pub rate: f64,
    pub pass: bool,
}

impl ContractionReport {
    pub fn into_result(self) -> Result<Self> {
        if self.pass {
            Ok(self)
        } else {
            Err(Error::Contraction {
                value: self.value,
                weight_sum: self.weight_sum,
                total_mass: self.total_mass,
                rate: self.rate,
            })
        }
    }
}

/// Appends composite Simpson nodes/weights for `∫_lo^hi f`, with the interval
/// count rounded up to the next even number.
fn simpson_piece(
    lo: f64,
    hi: f64,
    step: f64,
    density: impl Fn(f64) -> f64,
    nodes: &mut Vec<f64>,
    weights: &mut Vec<f64>,
) -> Result<()> {
    let width = hi - lo;
    if width <= 0.0 {
        return Ok(());
    }
    let mut n = (width / step - 1e-9).ceil().max(2.0) as usize;
    if n % 2 == 1 {
        n += 1;
    }
    let hh = width / n as f64;
    for j in 0..=n {
        let z = if j == n { hi } else { lo + j as f64 * hh };
        let f = density(z);
        if !f.is_finite() || f < 0.0 {
            return Err(Error::Construction(format!(
                "jump density must be finite and nonnegative (value {f} at z = {z})"
            )));
        }
        let w = if j == 0 || j == n {
            1.0
        } else if j % 2 == 1 {
            4.0
        } else {
            2.0
        };
        nodes.push(z);
        weights.push(w * hh / 3.0 * f);
    }
    Ok(())
}

fn simpson_over(
    density: &TruncatedDensity,
    lo: f64,
    hi: f64,
    step: f64,
    nodes: &mut Vec<f64>,
    weights: &mut Vec<f64>,
) -> Result<()> {
    for (k, p) in density.pieces().iter().enumerate() {
        let a = p.lower.max(lo);
        let b = p.upper.min(hi);
        if b > a {
            simpson_piece(a, b, step, |z| density.eval_on_piece(k, z), nodes, weights)?;
        }
    }
    Ok(())
}

impl QuadratureScheme {
    /// Builds the `c_j` / `d_j` families for a measure at target step `ξ` and truncation `Z`.
    pub fn build(measure: &LevyMeasure, step: f64, truncation: f64) -> Result<Self> {
        if !(step > 0.0 && step < 1.0) {
            return Err(Error::Construction(format!("quadrature step must lie in (0,1), got {step}")));
        }
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut compensator_nodes = Vec::new();
        let mut compensator_weights = Vec::new();
        let mut truncated_mass_fraction = None;

        match measure {
            LevyMeasure::Null => {}
            LevyMeasure::Atoms(atoms) => {
                for a in atoms.iter().filter(|a| a.mass > 0.0) {
                    nodes.push(a.size);
                    weights.push(a.mass);
                    if a.size.abs() < 1.0 {
                        compensator_nodes.push(a.size);
                        compensator_weights.push(a.mass);
                    }
                }
                if atoms.iter().any(|a| a.mass < 0.0) {
                    return Err(Error::Construction("jump atom masses must be nonnegative".into()));
                }
            }
            LevyMeasure::Density { .. } => {
                if !(truncation >= 1.0) {
                    return Err(Error::Construction(format!(
                        "density truncation must be >= 1 to cover the compensator window, got {truncation}"
                    )));
                }
                let density = measure
                    .truncated(truncation)
                    .expect("density measure has a truncated form");
                truncated_mass_fraction = density.truncated_mass_fraction();
                simpson_over(&density, -truncation, truncation, step, &mut nodes, &mut weights)?;
                simpson_over(&density, -1.0, 1.0, step, &mut compensator_nodes, &mut compensator_weights)?;
            }
        }

        Ok(QuadratureScheme {
            nodes,
            weights,
            compensator_nodes,
            compensator_weights,
            step,
            truncation,
            total_mass: measure.total_mass(),
            truncated_mass_fraction,
            measure: measure.clone(),
        })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn compensator_nodes(&self) -> &[f64] {
        &self.compensator_nodes
    }

    pub fn compensator_weights(&self) -> &[f64] {
        &self.compensator_weights
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    /// Declared `Γ`.
    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn truncated_mass_fraction(&self) -> Option<f64> {
        self.truncated_mass_fraction
    }

    pub fn measure(&self) -> &LevyMeasure {
        &self.measure
    }

    /// `Σ c_j`
    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `Σ d_j`
    pub fn compensator_sum(&self) -> f64 {
        self.compensator_weights.iter().sum()
    }

    /// `Σ d_j z_j`, the small-jump first moment.
    pub fn compensator_moment(&self) -> f64 {
        self.compensator_nodes
            .iter()
            .zip(&self.compensator_weights)
            .map(|(z, d)| z * d)
            .sum()
    }

    /// Contraction certificate for the discrete fixed-point map at discount rate `r`.
    pub fn check_contraction(&self, rate: f64) -> ContractionReport {
        let weight_sum = self.weight_sum();
        let value = (weight_sum - self.total_mass).abs() / rate;
        ContractionReport {
            value,
            weight_sum,
            total_mass: self.total_mass,
            rate,
            pass: rate > 0.0 && value < 1.0,
        }
    }

    /// Discrete jump operator at state `x`:
    /// `Σ c_j f(x + δ(z_j)) - f'(x) Σ d_j δ(z_j) - f(x) Γ`, where `δ` is the
    /// displacement of the jump convention and `f'` is supplied by the caller.
    pub fn apply_integral(
        &self,
        slice: impl Fn(f64) -> f64,
        x: f64,
        gamma: f64,
        forward_diff: f64,
        convention: JumpConvention,
    ) -> f64 {
        if self.nodes.is_empty() && self.total_mass == 0.0 {
            return 0.0;
        }
        let jumps: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(z, c)| c * slice(x + convention.displacement(x, gamma, *z)))
            .sum();
        let drift: f64 = self
            .compensator_nodes
            .iter()
            .zip(&self.compensator_weights)
            .map(|(z, d)| d * convention.displacement(x, gamma, *z))
            .sum();
        jumps - forward_diff * drift - slice(x) * self.total_mass
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::Atom;

    #[test]
    fn null_measure_is_empty() {
        let q = QuadratureScheme::build(&LevyMeasure::Null, 0.1, 5.0).unwrap();
        assert_eq!(q.weight_sum(), 0.0);
        assert_eq!(q.compensator_sum(), 0.0);
        assert_eq!(q.total_mass(), 0.0);
        let c = q.check_contraction(0.05);
        assert_eq!(c.value, 0.0);
        assert!(c.pass);
        assert_eq!(q.apply_integral(|x| x * x + 3.0, 2.0, 0.1, 7.0, JumpConvention::Proportional), 0.0);
    }

    #[test]
    fn uniform_unit_density_exact() {
        let m = LevyMeasure::uniform(-1.0, 1.0, 2.0);
        let q = QuadratureScheme::build(&m, 0.01, 5.0).unwrap();
        assert!((q.weight_sum() - 2.0).abs() < 1e-8);
        assert!((q.compensator_sum() - 2.0).abs() < 1e-8);
        assert!(q.weights().iter().all(|c| *c >= 0.0));
        let c = q.check_contraction(0.05);
        assert!(c.pass && c.value < 1.0);
    }

    #[test]
    fn single_atom_bookkeeping() {
        let m = LevyMeasure::Atoms(vec![Atom { size: 0.5, mass: 2.0 }]);
        let q = QuadratureScheme::build(&m, 0.1, 5.0).unwrap();
        assert_eq!(q.nodes(), &[0.5]);
        assert_eq!(q.weights(), &[2.0]);
        assert_eq!(q.compensator_sum(), 2.0);
        assert_eq!(q.total_mass(), 2.0);
        // 2 f(1.5) - 1 * (2 * 0.5) - 2 f(1) = 3 - 1 - 2
        let v = q.apply_integral(|x| x, 1.0, 1.0, 1.0, JumpConvention::Proportional);
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn atoms_outside_unit_window_skip_compensator() {
        let m = LevyMeasure::Atoms(vec![
            Atom { size: -2.0, mass: 1.0 },
            Atom { size: 0.25, mass: 0.5 },
        ]);
        let q = QuadratureScheme::build(&m, 0.1, 5.0).unwrap();
        assert_eq!(q.compensator_nodes(), &[0.25]);
        assert_eq!(q.weight_sum(), 1.5);
    }

    #[test]
    fn constant_slice_leaves_quadrature_residual() {
        let m = LevyMeasure::double_exponential(0.5, 3.0, 3.0, 1.2);
        let q = QuadratureScheme::build(&m, 0.2, 4.0).unwrap();
        let c = 7.5;
        let v = q.apply_integral(|_| c, 3.0, 0.1, 0.0, JumpConvention::Proportional);
        assert!(v.abs() <= (q.weight_sum() - q.total_mass()).abs() * c + 1e-12);
    }

    #[test]
    fn invalid_inputs_rejected() {
        let m = LevyMeasure::uniform(-1.0, 1.0, 1.0);
        assert!(QuadratureScheme::build(&m, 0.0, 5.0).is_err());
        assert!(QuadratureScheme::build(&m, 1.0, 5.0).is_err());
        assert!(QuadratureScheme::build(&m, 0.1, 0.5).is_err());
        let neg = LevyMeasure::Density {
            family: crate::measure::DensityFamily::Custom(std::sync::Arc::new(|z: f64| z)),
            total_mass: 1.0,
        };
        assert!(matches!(QuadratureScheme::build(&neg, 0.1, 2.0), Err(Error::Construction(_))));
    }

    #[test]
    fn odd_interval_count_rounded_up() {
        // width 2 with step 0.3 -> 7 intervals -> rounded to 8 -> 9 nodes
        let m = LevyMeasure::uniform(-1.0, 1.0, 1.0);
        let q = QuadratureScheme::build(&m, 0.3, 1.0).unwrap();
        assert_eq!(q.nodes().len(), 9);
        assert!((q.weight_sum() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn coarse_step_can_fail_contraction() {
        // Non-polynomial density: Simpson error grows with the step.
        let m = LevyMeasure::double_exponential(0.5, 40.0, 40.0, 400.0);
        let fine = QuadratureScheme::build(&m, 0.001, 1.0).unwrap();
        assert!(fine.check_contraction(0.05).pass);
        let mut step = 0.001;
        let mut failed = None;
        while step < 1.0 {
            let q = QuadratureScheme::build(&m, step, 1.0).unwrap();
            let c = q.check_contraction(0.05);
            if !c.pass {
                failed = Some(c);
                break;
            }
            step *= 1.5;
        }
        let c = failed.expect("some coarse step fails the contraction check");
        assert!(c.value >= 1.0);
        assert!(c.into_result().is_err());
    }
}
