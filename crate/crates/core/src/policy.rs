//! Switching function, bang-bang policy and switching curves.
//!
//! `G = -Δ_y V + price(x) - ∂C/∂u` is the coefficient of `u/r` in the discrete
//! Hamiltonian, so extracting at capacity is optimal exactly where `G > 0`.

use std::io::Write;

use crate::error::Result;
use crate::grid::{Grid4D, PolicyField, ValueField};
use crate::model::MarketModel;
use crate::solver::SchemeMode;

#[derive(Clone, Debug, PartialEq)]
pub struct SwitchingField {
    grid: Grid4D,
    values: Vec<f64>,
}

impl SwitchingField {
    pub fn from_values(grid: Grid4D, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.len());
        SwitchingField { grid, values }
    }

    pub fn grid(&self) -> &Grid4D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, s: usize, x: usize, y: usize, regime: usize) -> f64 {
        self.values[self.grid.index(s, x, y, regime)]
    }

    /// Full dump: `s,x,y,regime,G,u_star`, ordered like the value field CSV.
    pub fn write_policy_csv<W: Write>(&self, policy: &PolicyField, out: W) -> Result<()> {
        let g = &self.grid;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["s", "x", "y", "regime", "G", "u_star"])?;
        for s in 0..g.n_time {
            for x in 0..g.n_price {
                for y in 0..g.n_reserve {
                    for i in 0..g.regimes {
                        w.write_record(&[
                            g.time(s).to_string(),
                            g.price_state(x).to_string(),
                            g.reserve(y).to_string(),
                            i.to_string(),
                            self.get(s, x, y, i).to_string(),
                            policy.get(s, x, y, i).to_string(),
                        ])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `G` on every node, with the reserve difference taken from the same side the
/// solver used in `mode` (clamped at the boundary).
pub fn switching_function(v: &ValueField, model: &MarketModel, mode: SchemeMode) -> SwitchingField {
    let g = *v.grid();
    let l = g.reserve_step;
    let values = (0..g.len())
        .map(|k| {
            let y = k % g.n_reserve;
            let x = (k / g.n_reserve) % g.n_price;
            let here = v.values()[k];
            let diff = match mode {
                SchemeMode::Upwind => {
                    let below = if y == 0 { here } else { v.values()[k - 1] };
                    (here - below) / l
                }
                SchemeMode::PaperFaithful => {
                    let above = if y + 1 == g.n_reserve { here } else { v.values()[k + 1] };
                    (above - here) / l
                }
            };
            -diff + model.marginal_profit(g.price_state(x), g.reserve(y))
        })
        .collect();
    SwitchingField { grid: g, values }
}

/// `ū` where `G > 0` and `y > 0`, otherwise `0`.
pub fn extract_policy(sw: &SwitchingField, model: &MarketModel) -> PolicyField {
    let um = model.economics.max_rate;
    PolicyField::from_fn(sw.grid, |s, x, y, i| {
        if y > 0 && sw.get(s, x, y, i) > 0.0 {
            um
        } else {
            0.0
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    /// First `G ≤ 0 → G > 0` crossing in increasing `x`.
    pub threshold: Option<f64>,
    /// Number of sign changes along the x-axis.
    pub sign_changes: usize,
    pub diagnostics: Vec<String>,
}

/// Scans the price axis at fixed `(s, y, regime)`.
pub fn switching_curve(sw: &SwitchingField, s: usize, y: usize, regime: usize) -> CurvePoint {
    let g = &sw.grid;
    let h = g.price_step;
    let mut threshold = None;
    let mut crossings = Vec::new();
    for x in 1..g.n_price {
        let (g0, g1) = (sw.get(s, x - 1, y, regime), sw.get(s, x, y, regime));
        if (g0 > 0.0) != (g1 > 0.0) {
            let at = g.price_state(x - 1) + h * g0 / (g0 - g1);
            crossings.push(at);
            if threshold.is_none() && g1 > 0.0 {
                threshold = Some(at);
            }
        }
    }
    let diagnostics = if crossings.len() > 1 {
        vec![format!(
            "s={} y={} regime={}: {} sign changes at x = {:?}",
            g.time(s),
            g.reserve(y),
            regime,
            crossings.len(),
            crossings
        )]
    } else {
        Vec::new()
    };
    CurvePoint {
        threshold,
        sign_changes: crossings.len(),
        diagnostics,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub s: usize,
    pub y: usize,
    pub regime: usize,
    pub point: CurvePoint,
}

/// Time indices nearest to `{0, 0.4, 0.7, 1}·T`.
pub fn figure_slices(grid: &Grid4D) -> Vec<usize> {
    let mut v: Vec<usize> = [0.0, 0.4, 0.7, 1.0]
        .iter()
        .map(|f| grid.time_index_at(f * grid.horizon))
        .collect();
    v.dedup();
    v
}

pub fn switching_curves(sw: &SwitchingField, slices: &[usize]) -> Vec<CurveRow> {
    let g = &sw.grid;
    let mut rows = Vec::new();
    for &s in slices {
        for y in 0..g.n_reserve {
            for regime in 0..g.regimes {
                rows.push(CurveRow {
                    s,
                    y,
                    regime,
                    point: switching_curve(sw, s, y, regime),
                });
            }
        }
    }
    rows
}

/// `s,y,regime,x_star`; `x_star` is empty when there is no crossing.
pub fn write_curve_csv<W: Write>(grid: &Grid4D, rows: &[CurveRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["s", "y", "regime", "x_star"])?;
    for r in rows {
        w.write_record(&[
            grid.time(r.s).to_string(),
            grid.reserve(r.y).to_string(),
            r.regime.to_string(),
            r.point.threshold.map(|x| x.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
