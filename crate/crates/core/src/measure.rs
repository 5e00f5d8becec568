//! Finite-intensity Lévy measures for the jump part of the price state.
//!
//! Density families are always used truncated to `[-Z, Z]` and rescaled so
//! that the truncated density carries the full declared mass `Γ`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

/// A point mass of the jump measure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Atom {
    pub size: f64,
    pub mass: f64,
}

/// Shape of an absolutely continuous jump measure.
#[derive(Clone)]
pub enum DensityFamily {
    /// Constant density on `[lower, upper]`.
    Uniform { lower: f64, upper: f64 },
    /// Asymmetric double exponential: upward jumps with probability `up_probability`
    /// and rate `up_rate`, downward jumps with rate `down_rate`.
    DoubleExponential {
        up_probability: f64,
        up_rate: f64,
        down_rate: f64,
    },
    /// User supplied density, used as given on `[-Z, Z]` (no rescaling).
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for DensityFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DensityFamily::Uniform { lower, upper } => f
                .debug_struct("Uniform")
                .field("lower", lower)
                .field("upper", upper)
                .finish(),
            DensityFamily::DoubleExponential {
                up_probability,
                up_rate,
                down_rate,
            } => f
                .debug_struct("DoubleExponential")
                .field("up_probability", up_probability)
                .field("up_rate", up_rate)
                .field("down_rate", down_rate)
                .finish(),
            DensityFamily::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

#[derive(Clone, Debug)]
pub enum LevyMeasure {
    Null,
    Atoms(Vec<Atom>),
    Density {
        family: DensityFamily,
        total_mass: f64,
    },
}

/// One smooth piece of a truncated density.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Piece {
    pub lower: f64,
    pub upper: f64,
}

/// A density family restricted to `[-Z, Z]` and scaled to its declared mass.
#[derive(Clone, Debug)]
pub struct TruncatedDensity {
    family: DensityFamily,
    scale: f64,
    truncation: f64,
    pieces: Vec<Piece>,
    truncated_mass_fraction: Option<f64>,
}

impl LevyMeasure {
    pub fn uniform(lower: f64, upper: f64, total_mass: f64) -> Self {
        LevyMeasure::Density {
            family: DensityFamily::Uniform { lower, upper },
            total_mass,
        }
    }

    pub fn double_exponential(up_probability: f64, up_rate: f64, down_rate: f64, total_mass: f64) -> Self {
        LevyMeasure::Density {
            family: DensityFamily::DoubleExponential {
                up_probability,
                up_rate,
                down_rate,
            },
            total_mass,
        }
    }

    /// Total intensity `Γ = ν(ℝ)`.
    pub fn total_mass(&self) -> f64 {
        match self {
            LevyMeasure::Null => 0.0,
            LevyMeasure::Atoms(atoms) => atoms.iter().map(|a| a.mass).sum(),
            LevyMeasure::Density { total_mass, .. } => *total_mass,
        }
    }

    pub fn is_null(&self) -> bool {
        self.total_mass() == 0.0
    }

    /// Structural problems with the measure parameters, as human readable strings.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            LevyMeasure::Null => {}
            LevyMeasure::Atoms(atoms) => {
                for a in atoms {
                    if !(a.size.is_finite() && a.mass.is_finite()) {
                        out.push("jump atoms must be finite".to_string());
                    } else if a.mass < 0.0 {
                        out.push("jump atom masses must be nonnegative".to_string());
                    }
                }
            }
            LevyMeasure::Density { family, total_mass } => {
                if !(total_mass.is_finite() && *total_mass >= 0.0) {
                    out.push("jump measure total mass must be finite and nonnegative".to_string());
                }
                match family {
                    DensityFamily::Uniform { lower, upper } => {
                        if !(lower < upper) {
                            out.push("uniform jump density needs lower < upper".to_string());
                        }
                    }
                    DensityFamily::DoubleExponential {
                        up_probability,
                        up_rate,
                        down_rate,
                    } => {
                        if !(0.0..=1.0).contains(up_probability) {
                            out.push("double-exponential up probability must lie in [0,1]".to_string());
                        }
                        if !(*up_rate > 0.0 && *down_rate > 0.0) {
                            out.push("double-exponential rates must be positive".to_string());
                        }
                    }
                    DensityFamily::Custom(_) => {}
                }
            }
        }
        out
    }

    /// Analytic `ν([lo, hi] ∩ [-Z, Z])` for measures that admit one.
    ///
    /// Atoms are counted on the open interval `(lo, hi)`, which matches the
    /// `|z| < 1` window of the compensator.
    pub fn mass_between(&self, lo: f64, hi: f64, truncation: f64) -> Option<f64> {
        match self {
            LevyMeasure::Null => Some(0.0),
            LevyMeasure::Atoms(atoms) => Some(
                atoms
                    .iter()
                    .filter(|a| a.size > lo && a.size < hi)
                    .map(|a| a.mass)
                    .sum(),
            ),
            LevyMeasure::Density { .. } => {
                let d = self.truncated(truncation)?;
                d.analytic_mass(lo, hi)
            }
        }
    }

    /// The truncated density, or `None` for non-density measures.
    pub fn truncated(&self, truncation: f64) -> Option<TruncatedDensity> {
        let LevyMeasure::Density { family, total_mass } = self else {
            return None;
        };
        let z = truncation;
        let (pieces, norm, fraction) = match family {
            DensityFamily::Uniform { lower, upper } => {
                let lo = lower.max(-z);
                let hi = upper.min(z);
                let width = (hi - lo).max(0.0);
                let pieces = if width > 0.0 {
                    vec![Piece { lower: lo, upper: hi }]
                } else {
                    Vec::new()
                };
                (pieces, width, Some(1.0 - width / (upper - lower)))
            }
            DensityFamily::DoubleExponential {
                up_probability,
                up_rate,
                down_rate,
            } => {
                let kept = up_probability * (1.0 - (-up_rate * z).exp())
                    + (1.0 - up_probability) * (1.0 - (-down_rate * z).exp());
                let pieces = vec![
                    Piece { lower: -z, upper: 0.0 },
                    Piece { lower: 0.0, upper: z },
                ];
                (pieces, kept, Some(1.0 - kept))
            }
            DensityFamily::Custom(_) => (vec![Piece { lower: -z, upper: z }], 1.0, None),
        };
        let scale = match family {
            DensityFamily::Custom(_) => 1.0,
            _ if norm > 0.0 => total_mass / norm,
            _ => 0.0,
        };
        Some(TruncatedDensity {
            family: family.clone(),
            scale,
            truncation: z,
            pieces,
            truncated_mass_fraction: fraction,
        })
    }

    /// Draws one jump size from `ν/Γ` truncated to `[-Z, Z]`.
    ///
    /// Returns `None` for custom densities, which have no closed-form sampler.
    pub fn sample_size<R: Rng + ?Sized>(&self, rng: &mut R, truncation: f64) -> Option<f64> {
        match self {
            LevyMeasure::Null => None,
            LevyMeasure::Atoms(atoms) => {
                let total: f64 = atoms.iter().map(|a| a.mass).sum();
                if total <= 0.0 {
                    return None;
                }
                let mut target = rng.random::<f64>() * total;
                for a in atoms {
                    if target < a.mass {
                        return Some(a.size);
                    }
                    target -= a.mass;
                }
                atoms.last().map(|a| a.size)
            }
            LevyMeasure::Density { family, .. } => match family {
                DensityFamily::Uniform { lower, upper } => {
                    let lo = lower.max(-truncation);
                    let hi = upper.min(truncation);
                    Some(lo + (hi - lo) * rng.random::<f64>())
                }
                DensityFamily::DoubleExponential {
                    up_probability,
                    up_rate,
                    down_rate,
                } => {
                    let z = truncation;
                    let up_mass = up_probability * (1.0 - (-up_rate * z).exp());
                    let down_mass = (1.0 - up_probability) * (1.0 - (-down_rate * z).exp());
                    let pick_up = rng.random::<f64>() * (up_mass + down_mass) < up_mass;
                    let u: f64 = rng.random();
                    // inverse CDF of an exponential truncated to [0, Z]
                    let draw = |rate: f64| -(1.0 - u * (1.0 - (-rate * z).exp())).ln() / rate;
                    Some(if pick_up { draw(*up_rate) } else { -draw(*down_rate) })
                }
                DensityFamily::Custom(_) => None,
            },
        }
    }
}

impl TruncatedDensity {
    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    /// Fraction of the untruncated family's mass that lies outside `[-Z, Z]`
    /// and was removed by the rescaling. Unknown for custom densities.
    pub fn truncated_mass_fraction(&self) -> Option<f64> {
        self.truncated_mass_fraction
    }

    /// Density value on a given piece; endpoints take the piece's one-sided limit.
    pub fn eval_on_piece(&self, piece: usize, z: f64) -> f64 {
        let p = self.pieces[piece];
        if z < p.lower || z > p.upper {
            return 0.0;
        }
        match &self.family {
            DensityFamily::Uniform { .. } => self.scale,
            DensityFamily::DoubleExponential {
                up_probability,
                up_rate,
                down_rate,
            } => {
                if p.lower >= 0.0 {
                    self.scale * up_probability * up_rate * (-up_rate * z).exp()
                } else {
                    self.scale * (1.0 - up_probability) * down_rate * (down_rate * z).exp()
                }
            }
            DensityFamily::Custom(f) => f(z),
        }
    }

    /// Closed-form mass of `[lo, hi]` under the truncated density.
    pub fn analytic_mass(&self, lo: f64, hi: f64) -> Option<f64> {
        let lo = lo.max(-self.truncation);
        let hi = hi.min(self.truncation);
        if hi <= lo {
            return Some(0.0);
        }
        match &self.family {
            DensityFamily::Uniform { .. } => Some(
                self.pieces
                    .iter()
                    .map(|p| (hi.min(p.upper) - lo.max(p.lower)).max(0.0) * self.scale)
                    .sum(),
            ),
            DensityFamily::DoubleExponential {
                up_probability,
                up_rate,
                down_rate,
            } => {
                let mut m = 0.0;
                if hi > 0.0 {
                    let a = lo.max(0.0);
                    m += up_probability * ((-up_rate * a).exp() - (-up_rate * hi).exp());
                }
                if lo < 0.0 {
                    let b = hi.min(0.0);
                    m += (1.0 - up_probability) * ((down_rate * b).exp() - (down_rate * lo).exp());
                }
                Some(self.scale * m)
            }
            DensityFamily::Custom(_) => None,
        }
    }
}
