//! The bounded computational domain `[0,T] × [0,R] × [0,K] × regimes` and
//! the fields stored on it.
//!
//! Storage is one contiguous array per field, regime-major, then time, then
//! price, with reserve as the fastest index. Out-of-range neighbours replicate
//! the nearest boundary node.

use std::io::Write;

use crate::error::{Error, Result};
use crate::model::MarketModel;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid4D {
    pub time_step: f64,
    pub price_step: f64,
    pub reserve_step: f64,
    pub horizon: f64,
    pub price_cap: f64,
    pub reserve_cap: f64,
    pub regimes: usize,
    pub n_time: usize,
    pub n_price: usize,
    pub n_reserve: usize,
}

fn node_count(extent: f64, step: f64, what: &str) -> Result<usize> {
    let ratio = extent / step;
    let n = ratio.round();
    if (ratio - n).abs() > 1e-9 * ratio.max(1.0) || n < 1.0 {
        return Err(Error::Construction(format!(
            "{what} step {step} must divide the extent {extent} into a whole number of intervals"
        )));
    }
    Ok(n as usize + 1)
}

impl Grid4D {
    pub fn new(model: &MarketModel, time_step: f64, price_step: f64, reserve_step: f64, price_cap: f64) -> Result<Self> {
        for s in [time_step, price_step, reserve_step] {
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::Construction(format!("step size must lie in (0,1), got {s}")));
            }
        }
        let e = &model.economics;
        if !(price_cap > 0.0 && e.horizon > 0.0 && e.reserve_cap > 0.0) {
            return Err(Error::Construction("price cap, horizon and reserve cap must be positive".into()));
        }
        Ok(Grid4D {
            time_step,
            price_step,
            reserve_step,
            horizon: e.horizon,
            price_cap,
            reserve_cap: e.reserve_cap,
            regimes: model.regimes(),
            n_time: node_count(e.horizon, time_step, "time")?,
            n_price: node_count(price_cap, price_step, "price")?,
            n_reserve: node_count(e.reserve_cap, reserve_step, "reserve")?,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.regimes * self.n_time * self.n_price * self.n_reserve
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Nodes in one (regime, time) slice.
    #[inline]
    pub fn slice_len(&self) -> usize {
        self.n_price * self.n_reserve
    }

    #[inline]
    pub fn terminal_index(&self) -> usize {
        self.n_time - 1
    }

    #[inline]
    pub fn index(&self, s: usize, x: usize, y: usize, regime: usize) -> usize {
        ((regime * self.n_time + s) * self.n_price + x) * self.n_reserve + y
    }

    /// Offset of the first node of slice `(regime, s)`.
    #[inline]
    pub fn slice_offset(&self, s: usize, regime: usize) -> usize {
        (regime * self.n_time + s) * self.slice_len()
    }

    #[inline]
    pub fn time(&self, s: usize) -> f64 {
        tidy(s as f64 * self.time_step)
    }

    #[inline]
    pub fn price_state(&self, x: usize) -> f64 {
        tidy(x as f64 * self.price_step)
    }

    #[inline]
    pub fn reserve(&self, y: usize) -> f64 {
        tidy(y as f64 * self.reserve_step)
    }

    /// Bracketing nodes and weight of the upper one for a price-state query,
    /// clamped to `[0, R]`.
    #[inline]
    pub fn interpolation_weights(&self, x: f64) -> (usize, usize, f64) {
        let last = self.n_price - 1;
        if !(x > 0.0) {
            return (0, 0, 0.0);
        }
        let pos = x / self.price_step;
        if pos >= last as f64 {
            return (last, last, 0.0);
        }
        let lo = pos.floor() as usize;
        let theta = pos - lo as f64;
        if theta == 0.0 {
            (lo, lo, 0.0)
        } else {
            (lo, lo + 1, theta)
        }
    }

    /// Nearest node index along each axis, clamped.
    pub fn nearest(&self, t: f64, x: f64, y: f64) -> (usize, usize, usize) {
        let near = |v: f64, step: f64, n: usize| ((v / step).round().max(0.0) as usize).min(n - 1);
        (
            near(t, self.time_step, self.n_time),
            near(x, self.price_step, self.n_price),
            near(y, self.reserve_step, self.n_reserve),
        )
    }

    /// Closest time index to a fraction of the horizon.
    pub fn time_index_at(&self, t: f64) -> usize {
        self.nearest(t, 0.0, 0.0).0
    }
}

/// Drops the last bits of multiplication noise so `7 * 0.1` prints as `0.7`.
#[inline]
fn tidy(v: f64) -> f64 {
    (v * 1e12).round() / 1e12
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Real value per grid node.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueField {
    grid: Grid4D,
    values: Vec<f64>,
}

impl ValueField {
    pub fn zeros(grid: Grid4D) -> Self {
        ValueField {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid4D, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut values = vec![0.0; grid.len()];
        for i in 0..grid.regimes {
            for s in 0..grid.n_time {
                for x in 0..grid.n_price {
                    for y in 0..grid.n_reserve {
                        values[grid.index(s, x, y, i)] = f(s, x, y, i);
                    }
                }
            }
        }
        ValueField { grid, values }
    }

    pub fn from_values(grid: Grid4D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Construction(format!(
                "field has {} values, grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        Ok(ValueField { grid, values })
    }

    /// `Ψ` broadcast over every time slice.
    pub fn terminal_broadcast(grid: Grid4D, model: &MarketModel) -> Self {
        Self::from_fn(grid, |_, x, y, _| {
            model.terminal_value_unchecked(grid.price_state(x), grid.reserve(y))
        })
    }

    pub fn grid(&self) -> &Grid4D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, s: usize, x: usize, y: usize, regime: usize) -> f64 {
        self.values[self.grid.index(s, x, y, regime)]
    }

    #[inline]
    pub fn set(&mut self, s: usize, x: usize, y: usize, regime: usize, v: f64) {
        let i = self.grid.index(s, x, y, regime);
        self.values[i] = v;
    }

    /// Replicate-boundary read: indices outside the grid clamp to the nearest node.
    #[inline]
    pub fn neighbor(&self, s: isize, x: isize, y: isize, regime: usize) -> f64 {
        let g = &self.grid;
        self.get(
            clamp_index(s, g.n_time),
            clamp_index(x, g.n_price),
            clamp_index(y, g.n_reserve),
            regime,
        )
    }

    /// Linear interpolation in the price state; queries outside `[0, R]` clamp.
    #[inline]
    pub fn lookup_interpolated(&self, s: usize, x: f64, y: usize, regime: usize) -> f64 {
        let (lo, hi, theta) = self.grid.interpolation_weights(x);
        let a = self.get(s, lo, y, regime);
        if theta == 0.0 {
            a
        } else {
            (1.0 - theta) * a + theta * self.get(s, hi, y, regime)
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Largest absolute pointwise difference.
    pub fn sup_distance(&self, other: &ValueField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Writes `s,x,y,regime,value` rows for the time indices in `times`
    /// (all slices when `None`), ordered by s, then x, then y, then regime.
    pub fn write_csv<W: Write>(&self, out: W, times: Option<&[usize]>) -> Result<()> {
        write_field_csv(&self.grid, &self.values, "value", out, times)
    }
}

pub(crate) fn write_field_csv<W: Write>(
    grid: &Grid4D,
    values: &[f64],
    column: &str,
    out: W,
    times: Option<&[usize]>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["s", "x", "y", "regime", column])?;
    let all: Vec<usize> = (0..grid.n_time).collect();
    for &s in times.unwrap_or(&all) {
        for x in 0..grid.n_price {
            for y in 0..grid.n_reserve {
                for i in 0..grid.regimes {
                    w.write_record(&[
                        grid.time(s).to_string(),
                        grid.price_state(x).to_string(),
                        grid.reserve(y).to_string(),
                        i.to_string(),
                        values[grid.index(s, x, y, i)].to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Extraction rate per grid node.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyField {
    grid: Grid4D,
    controls: Vec<f64>,
}

impl PolicyField {
    pub fn from_fn(grid: Grid4D, f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let v = ValueField::from_fn(grid, f);
        PolicyField {
            grid,
            controls: v.into_values(),
        }
    }

    pub fn constant(grid: Grid4D, u: f64) -> Self {
        Self::from_fn(grid, |_, _, y, _| if y == 0 { 0.0 } else { u })
    }

    pub fn grid(&self) -> &Grid4D {
        &self.grid
    }

    pub fn controls(&self) -> &[f64] {
        &self.controls
    }

    #[inline]
    pub fn get(&self, s: usize, x: usize, y: usize, regime: usize) -> f64 {
        self.controls[self.grid.index(s, x, y, regime)]
    }

    /// Control at the nearest node in `(t, x, y)` for the exact regime.
    pub fn lookup_nearest(&self, t: f64, x: f64, y: f64, regime: usize) -> f64 {
        let (s, xi, yi) = self.grid.nearest(t, x, y);
        self.get(s, xi, yi, regime)
    }
}
