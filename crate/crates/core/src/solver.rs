//! Fixed-point solver for the discretized HJB equation.
//!
//! For a node `(s, x, y, i)` below the horizon and a control `u`, the scheme
//! couples the node to its time successor, its two price neighbours, one
//! reserve neighbour, the jump destinations and the other regimes:
//!
//! ```text
//! (1 + c(u)) V = V(s+k)/(rk) + a V(x+h) + b V(x-h) + w(u) V(y±l)
//!                + Σ_j (c_j/r) V(x + δ(z_j)) + Σ_{j≠i} (q_ij/r) V(·, j) + L(u)/r
//! ```
//!
//! and the node value is the maximum of the right-hand side over controls,
//! each normalized by its own `1 + c(u)`. That map has the same fixed points as
//! the operator `F_ξ(V) = Δ_s V / r + sup_u(...)` and is a sup-norm contraction
//! exactly when `|Σ c_j - Γ| / r < 1`.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Grid4D, PolicyField, ValueField};
use crate::model::MarketModel;
use crate::quadrature::{ContractionReport, QuadratureScheme};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchemeMode {
    /// Forward differences for drift and reserve, coefficients taken verbatim.
    /// Only conditionally monotone.
    PaperFaithful,
    /// Drift upwinded on its sign, reserve differenced backward along `dY = -u dt`.
    Upwind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IterationOrder {
    /// Whole-grid sweeps `V^(j+1) = F(V^(j))`.
    Jacobi,
    /// Time slices solved to tolerance one at a time, backward from the horizon.
    BackwardSlices,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControlSet {
    /// `{0, ū}`
    Endpoints,
    /// `n ≥ 2` equally spaced rates on `[0, ū]`.
    Dense(usize),
}

impl ControlSet {
    pub fn rates(self, max_rate: f64) -> Vec<f64> {
        match self {
            ControlSet::Endpoints => {
                if max_rate > 0.0 {
                    vec![0.0, max_rate]
                } else {
                    vec![0.0]
                }
            }
            ControlSet::Dense(n) => {
                let n = n.max(2);
                (0..n).map(|j| max_rate * j as f64 / (n - 1) as f64).collect()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub mode: SchemeMode,
    pub order: IterationOrder,
    pub controls: ControlSet,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tolerance: 1e-6,
            max_iterations: 5000,
            mode: SchemeMode::Upwind,
            order: IterationOrder::Jacobi,
            controls: ControlSet::Endpoints,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("solver tolerance must be positive".into()));
        }
        if self.max_iterations < 1 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Coefficients of the discrete operator at one price node and control.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchemeCoefficients {
    /// weight on `V(s, x+h, y, i)`
    pub a: f64,
    /// weight on `V(s, x-h, y, i)`
    pub b: f64,
    /// center coefficient
    pub c: f64,
    /// signed weight on the reserve neighbour (`y+l` paper-faithful, `y-l` upwind)
    pub reserve: f64,
    /// extra weight on `V(s, x+h, y, i)` from the small-jump compensator
    /// (paper-faithful only; folded into the drift when upwinding)
    pub compensator: f64,
}

/// Coefficients `a`, `b`, `c` at price state `x`, regime `i`, control `u`.
///
/// Paper-faithful mode refuses nodes where `a ≤ 0` or `b ≤ 0`.
pub fn scheme_coefficients(
    x: f64,
    regime: usize,
    u: f64,
    grid: &Grid4D,
    model: &MarketModel,
    scheme: &QuadratureScheme,
    mode: SchemeMode,
) -> Result<SchemeCoefficients> {
    let d = &model.dynamics;
    let r = d.discount_rate;
    let (k, h, l) = (grid.time_step, grid.price_step, grid.reserve_step);
    let sigma2 = d.sigma[regime] * d.sigma[regime];
    let gamma = d.gamma[regime];
    let mean_drift = d.kappa * (d.mu[regime] - x);
    let comp: f64 = scheme
        .compensator_nodes()
        .iter()
        .zip(scheme.compensator_weights())
        .map(|(z, w)| w * model.jump_convention.displacement(x, gamma, *z))
        .sum();
    let diffusion = sigma2 / (2.0 * r * h * h);
    let escape = scheme.total_mass() / r + model.generator.exit_rate(regime) / r;
    let x_index = (x / h).round().max(0.0) as usize;
    match mode {
        SchemeMode::PaperFaithful => {
            let a = diffusion + mean_drift / (r * h);
            let b = diffusion;
            if !(b > 0.0) {
                return Err(Error::Monotonicity {
                    x,
                    x_index,
                    regime,
                    detail: format!("b = sigma^2/(2rh^2) = {b} must be positive (needs sigma > 0)"),
                });
            }
            if !(a > 0.0) {
                let bound = sigma2 / (2.0 * d.kappa * (x - d.mu[regime]));
                return Err(Error::Monotonicity {
                    x,
                    x_index,
                    regime,
                    detail: format!(
                        "a = {a:.6} <= 0; positivity needs h < sigma^2/(2 kappa (x - mu)) = {bound:.6} (h = {h})"
                    ),
                });
            }
            Ok(SchemeCoefficients {
                a,
                b,
                c: 1.0 / (r * k) + sigma2 / (r * h * h) + mean_drift / (r * h) - comp / (r * h) - u / (r * l)
                    + escape,
                reserve: -u / (r * l),
                compensator: -comp / (r * h),
            })
        }
        SchemeMode::Upwind => {
            let drift = mean_drift - comp;
            let a = diffusion + drift.max(0.0) / (r * h);
            let b = diffusion + (-drift).max(0.0) / (r * h);
            Ok(SchemeCoefficients {
                a,
                b,
                c: 1.0 / (r * k) + a + b + u / (r * l) + escape,
                reserve: u / (r * l),
                compensator: 0.0,
            })
        }
    }
}

/// Per-(regime, price node) stencil shared by all times and reserves.
#[derive(Clone, Debug)]
struct Stencil {
    up: f64,
    down: f64,
    center: f64,
    price: f64,
    jumps: Vec<(usize, f64)>,
}

/// Outcome of the coefficient checks run when the solver is assembled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoefficientReport {
    pub min_a: f64,
    pub min_b: f64,
    /// smallest `1 + c(u)` over nodes and controls
    pub min_normalizer: f64,
    /// every neighbour weight nonnegative for every control
    pub monotone: bool,
    /// bound on the sup-norm contraction constant of one sweep
    pub contraction_factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub order: IterationOrder,
    pub mode: SchemeMode,
    /// Whole-grid sweeps (Jacobi) or slice sweeps (backward).
    pub iterations: usize,
    /// Sup-norm update per sweep (Jacobi) or final update per time slice (backward).
    pub residuals: Vec<f64>,
    /// `‖F(V) - V‖` of the returned field.
    pub final_residual: f64,
    pub contraction: ContractionReport,
}

impl ConvergenceReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "residual"])?;
        for (j, r) in self.residuals.iter().enumerate() {
            w.write_record(&[(j + 1).to_string(), r.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct HjbSolver {
    model: MarketModel,
    grid: Grid4D,
    scheme: QuadratureScheme,
    config: SolverConfig,
    controls: Vec<f64>,
    stencils: Vec<Stencil>,
    couplings: Vec<Vec<(usize, f64)>>,
    inv_rk: f64,
    inv_r: f64,
    inv_rl: f64,
    terminal: Vec<f64>,
    contraction: ContractionReport,
    coefficients: CoefficientReport,
}

impl HjbSolver {
    /// Assembles the scheme, running the contraction and coefficient checks.
    pub fn new(model: &MarketModel, grid: Grid4D, scheme: QuadratureScheme, config: SolverConfig) -> Result<Self> {
        crate::model::validate_model(model).into_result()?;
        config.validate()?;
        if grid.regimes != model.regimes() {
            return Err(Error::Construction("grid and model regime counts differ".into()));
        }
        let r = model.dynamics.discount_rate;
        let contraction = scheme.check_contraction(r).into_result()?;
        let controls = config.controls.rates(model.economics.max_rate);
        let (inv_rk, inv_r, inv_rl) = (1.0 / (r * grid.time_step), 1.0 / r, 1.0 / (r * grid.reserve_step));

        let mut stencils = Vec::with_capacity(grid.regimes * grid.n_price);
        let mut min_a = f64::INFINITY;
        let mut min_b = f64::INFINITY;
        let mut min_normalizer = f64::INFINITY;
        let mut monotone = true;
        let mut factor: f64 = 0.0;
        let extra_regime: Vec<f64> = (0..grid.regimes).map(|i| model.generator.exit_rate(i) * inv_r).collect();
        for (i, &regime_exit) in extra_regime.iter().enumerate() {
            let gamma = model.dynamics.gamma[i];
            for xi in 0..grid.n_price {
                let x = grid.price_state(xi);
                let base = scheme_coefficients(x, i, 0.0, &grid, model, &scheme, config.mode)?;
                min_a = min_a.min(base.a);
                min_b = min_b.min(base.b);
                let up = base.a + base.compensator;
                let down = base.b;
                if up < 0.0 || down < 0.0 {
                    monotone = false;
                }
                let mut merged = vec![0.0; grid.n_price];
                let mut touched = Vec::new();
                for (z, c) in scheme.nodes().iter().zip(scheme.weights()) {
                    let dest = x + model.jump_convention.displacement(x, gamma, *z);
                    let (lo, hi, theta) = grid.interpolation_weights(dest);
                    for (node, w) in [(lo, (1.0 - theta) * c * inv_r), (hi, theta * c * inv_r)] {
                        if w != 0.0 {
                            if merged[node] == 0.0 {
                                touched.push(node);
                            }
                            merged[node] += w;
                        }
                    }
                }
                touched.sort_unstable();
                touched.dedup();
                let jumps: Vec<(usize, f64)> = touched.iter().map(|&n| (n, merged[n])).collect();
                let jump_total: f64 = jumps.iter().map(|(_, w)| w.abs()).sum();

                for &u in &controls {
                    let coef = scheme_coefficients(x, i, u, &grid, model, &scheme, config.mode)?;
                    let norm = 1.0 + coef.c;
                    min_normalizer = min_normalizer.min(norm);
                    if coef.reserve < 0.0 {
                        monotone = false;
                    }
                    let total = inv_rk + up.abs() + down.abs() + jump_total + regime_exit + coef.reserve.abs();
                    factor = factor.max(total / norm);
                }
                stencils.push(Stencil {
                    up,
                    down,
                    center: base.c,
                    price: model.price(x),
                    jumps,
                });
            }
        }
        if config.mode == SchemeMode::PaperFaithful && !(min_normalizer > 0.0) {
            return Err(Error::Monotonicity {
                x: f64::NAN,
                x_index: 0,
                regime: 0,
                detail: format!(
                    "1 + c(u) = {min_normalizer:.6e} <= 0 for u = {}; the forward reserve difference needs u/(rl) < 1 + 1/(rk) + ...",
                    model.economics.max_rate
                ),
            });
        }
        let couplings = (0..grid.regimes)
            .map(|i| {
                (0..grid.regimes)
                    .filter(|&j| j != i && model.generator.rate(i, j) != 0.0)
                    .map(|j| (j, model.generator.rate(i, j) * inv_r))
                    .collect()
            })
            .collect();
        let terminal = (0..grid.slice_len())
            .map(|n| {
                let (xi, yi) = (n / grid.n_reserve, n % grid.n_reserve);
                model.terminal_value_unchecked(grid.price_state(xi), grid.reserve(yi))
            })
            .collect();

        Ok(HjbSolver {
            model: model.clone(),
            grid,
            scheme,
            config,
            controls,
            stencils,
            couplings,
            inv_rk,
            inv_r,
            inv_rl,
            terminal,
            contraction,
            coefficients: CoefficientReport {
                min_a,
                min_b,
                min_normalizer,
                monotone,
                contraction_factor: factor,
            },
        })
    }

    pub fn grid(&self) -> &Grid4D {
        &self.grid
    }

    pub fn model(&self) -> &MarketModel {
        &self.model
    }

    pub fn scheme(&self) -> &QuadratureScheme {
        &self.scheme
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn controls(&self) -> &[f64] {
        &self.controls
    }

    pub fn contraction(&self) -> ContractionReport {
        self.contraction
    }

    pub fn coefficient_report(&self) -> CoefficientReport {
        self.coefficients
    }

    /// `Ψ` broadcast over all time slices, the default initial guess.
    pub fn initial_guess(&self) -> ValueField {
        ValueField::terminal_broadcast(self.grid, &self.model)
    }

    /// Index of the reserve neighbour and the sign of its weight for this mode.
    #[inline]
    fn reserve_neighbor(&self, y: usize) -> (usize, f64) {
        match self.config.mode {
            SchemeMode::Upwind => (y.saturating_sub(1), 1.0),
            SchemeMode::PaperFaithful => ((y + 1).min(self.grid.n_reserve - 1), -1.0),
        }
    }

    /// Everything on the right-hand side that does not depend on the control,
    /// for all reserves of one `(s, x, i)` row.
    fn common_row(&self, src: &[f64], s: usize, xi: usize, i: usize, out: &mut [f64]) {
        let g = &self.grid;
        let ny = g.n_reserve;
        let st = &self.stencils[i * g.n_price + xi];
        let cur = g.slice_offset(s, i);
        let next = g.slice_offset(s + 1, i);
        let row = |off: usize, x: usize| &src[off + x * ny..off + (x + 1) * ny];
        let up = row(cur, (xi + 1).min(g.n_price - 1));
        let down = row(cur, xi.saturating_sub(1));
        let succ = row(next, xi);
        for y in 0..ny {
            out[y] = self.inv_rk * succ[y] + st.up * up[y] + st.down * down[y];
        }
        for &(node, w) in &st.jumps {
            let v = row(cur, node);
            for y in 0..ny {
                out[y] += w * v[y];
            }
        }
        for &(j, w) in &self.couplings[i] {
            let v = row(g.slice_offset(s, j), xi);
            for y in 0..ny {
                out[y] += w * v[y];
            }
        }
    }

    /// Normalized value of control `u` given the common part.
    #[inline]
    #[allow(clippy::too_many_arguments)]
    fn control_value(&self, common: f64, st: &Stencil, reserve_value: f64, sign: f64, y: f64, u: f64, bonus: f64) -> f64 {
        let w = sign * u * self.inv_rl;
        let profit = st.price * u - self.model.economics.cost.cost(y, u);
        let um = self.model.economics.max_rate;
        let extra = if bonus != 0.0 && um > 0.0 {
            4.0 * bonus * (u / um) * (1.0 - u / um)
        } else {
            0.0
        };
        (common + w * reserve_value + (profit + extra) * self.inv_r) / (1.0 + st.center + w)
    }

    /// New values for slice `(s, i)` from `src`.
    fn update_slice(&self, src: &[f64], s: usize, i: usize, out: &mut [f64]) {
        let g = &self.grid;
        let ny = g.n_reserve;
        if s == g.terminal_index() {
            out.copy_from_slice(&self.terminal);
            return;
        }
        let cur = g.slice_offset(s, i);
        let mut common = vec![0.0; ny];
        for xi in 0..g.n_price {
            self.common_row(src, s, xi, i, &mut common);
            let st = &self.stencils[i * g.n_price + xi];
            let row = &src[cur + xi * ny..cur + (xi + 1) * ny];
            for y in 0..ny {
                let (nb, sign) = self.reserve_neighbor(y);
                let yv = g.reserve(y);
                let mut best = self.control_value(common[y], st, row[nb], sign, yv, 0.0, 0.0);
                if y > 0 {
                    for &u in &self.controls[1..] {
                        let v = self.control_value(common[y], st, row[nb], sign, yv, u, 0.0);
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[xi * ny + y] = best;
            }
        }
    }

    /// Scalar evaluation at one node over an arbitrary control list.
    /// Returns `(normalized value, maximizing control)`.
    #[allow(clippy::too_many_arguments)]
    fn node_update(&self, src: &[f64], s: usize, xi: usize, y: usize, i: usize, controls: &[f64], bonus: f64) -> (f64, f64) {
        let g = &self.grid;
        if s == g.terminal_index() {
            return (self.terminal[xi * g.n_reserve + y], 0.0);
        }
        let common = self.common_at(src, s, xi, y, i);
        let st = &self.stencils[i * g.n_price + xi];
        let (nb, sign) = self.reserve_neighbor(y);
        let nbv = src[g.index(s, xi, nb, i)];
        let yv = g.reserve(y);
        let mut best = (self.control_value(common, st, nbv, sign, yv, 0.0, bonus), 0.0);
        if y > 0 {
            for &u in controls.iter().filter(|u| **u > 0.0) {
                let v = self.control_value(common, st, nbv, sign, yv, u, bonus);
                if v > best.0 {
                    best = (v, u);
                }
            }
        }
        best
    }

    fn common_at(&self, src: &[f64], s: usize, xi: usize, y: usize, i: usize) -> f64 {
        let g = &self.grid;
        let st = &self.stencils[i * g.n_price + xi];
        let at = |s: usize, x: usize, j: usize| src[g.index(s, x, y, j)];
        let mut v = self.inv_rk * at(s + 1, xi, i)
            + st.up * at(s, (xi + 1).min(g.n_price - 1), i)
            + st.down * at(s, xi.saturating_sub(1), i);
        for &(node, w) in &st.jumps {
            v += w * at(s, node, i);
        }
        for &(j, w) in &self.couplings[i] {
            v += w * at(s, xi, j);
        }
        v
    }

    fn check_grid(&self, field: &ValueField) -> Result<()> {
        if field.grid() != &self.grid {
            return Err(Error::Construction("field grid does not match solver grid".into()));
        }
        Ok(())
    }

    /// One whole-grid sweep of the normalized operator; the terminal slice is reset to `Ψ`.
    pub fn sweep(&self, input: &ValueField) -> Result<ValueField> {
        self.check_grid(input)?;
        let mut out = vec![0.0; self.grid.len()];
        self.sweep_into(input.values(), &mut out);
        ValueField::from_values(self.grid, out)
    }

    /// Sweep returning the sup-norm change `‖out - src‖`.
    fn sweep_into(&self, src: &[f64], out: &mut [f64]) -> f64 {
        let g = &self.grid;
        out.par_chunks_mut(g.slice_len())
            .enumerate()
            .map(|(k, chunk)| {
                let (i, s) = (k / g.n_time, k % g.n_time);
                self.update_slice(src, s, i, chunk);
                let base = g.slice_offset(s, i);
                chunk
                    .iter()
                    .zip(&src[base..base + chunk.len()])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max)
    }

    /// The operator `F_ξ(V)` on slice `s` exactly as written (not normalized):
    /// `V(s+k)/(rk) + sup_u [a V(x+h) + b V(x-h) - c(u) V + w(u) V(y±l) + jumps + L/r + regimes]`.
    /// Returns the `(x, y, regime)` slice in storage order; `Ψ` on the terminal slice.
    pub fn fixed_point_operator(&self, field: &ValueField, s: usize) -> Result<Vec<f64>> {
        self.check_grid(field)?;
        let g = &self.grid;
        let src = field.values();
        let mut out = Vec::with_capacity(g.slice_len() * g.regimes);
        for i in 0..g.regimes {
            if s == g.terminal_index() {
                out.extend_from_slice(&self.terminal);
                continue;
            }
            for xi in 0..g.n_price {
                let st = &self.stencils[i * g.n_price + xi];
                for y in 0..g.n_reserve {
                    let common = self.common_at(src, s, xi, y, i);
                    let center = src[g.index(s, xi, y, i)];
                    let (nb, sign) = self.reserve_neighbor(y);
                    let nbv = src[g.index(s, xi, nb, i)];
                    let yv = g.reserve(y);
                    let mut best = f64::NEG_INFINITY;
                    for &u in self.controls.iter().filter(|u| y > 0 || **u == 0.0) {
                        let w = sign * u * self.inv_rl;
                        let profit = st.price * u - self.model.economics.cost.cost(yv, u);
                        let v = common - (st.center + w) * center + w * nbv + profit * self.inv_r;
                        best = best.max(v);
                    }
                    out.push(best);
                }
            }
        }
        Ok(out)
    }

    /// Sweep with the control at every node fixed by `policy`.
    pub fn sweep_with_policy(&self, input: &ValueField, policy: &PolicyField) -> Result<ValueField> {
        self.check_grid(input)?;
        let g = &self.grid;
        let src = input.values();
        let out = ValueField::from_fn(*g, |s, xi, y, i| {
            if s == g.terminal_index() {
                return self.terminal[xi * g.n_reserve + y];
            }
            let u = if y == 0 { 0.0 } else { policy.get(s, xi, y, i) };
            let st = &self.stencils[i * g.n_price + xi];
            let (nb, sign) = self.reserve_neighbor(y);
            self.control_value(
                self.common_at(src, s, xi, y, i),
                st,
                src[g.index(s, xi, nb, i)],
                sign,
                g.reserve(y),
                u,
                0.0,
            )
        });
        Ok(out)
    }

    /// The control the solver's own maximization picks at every node of `field`.
    pub fn argmax_policy(&self, field: &ValueField) -> PolicyField {
        let src = field.values();
        PolicyField::from_fn(self.grid, |s, x, y, i| self.node_update(src, s, x, y, i, &self.controls, 0.0).1)
    }

    pub fn solve(&self) -> Result<(ValueField, ConvergenceReport)> {
        self.solve_from(self.initial_guess())
    }

    pub fn solve_from(&self, initial: ValueField) -> Result<(ValueField, ConvergenceReport)> {
        self.check_grid(&initial)?;
        let (values, iterations, residuals) = match self.config.order {
            IterationOrder::Jacobi => self.solve_jacobi(initial.into_values())?,
            IterationOrder::BackwardSlices => self.solve_backward(initial.into_values())?,
        };
        let field = ValueField::from_values(self.grid, values)?;
        let mut scratch = vec![0.0; self.grid.len()];
        let final_residual = self.sweep_into(field.values(), &mut scratch);
        let report = ConvergenceReport {
            order: self.config.order,
            mode: self.config.mode,
            iterations,
            residuals,
            final_residual,
            contraction: self.contraction,
        };
        Ok((field, report))
    }

    fn first_non_finite(&self, values: &[f64]) -> Result<()> {
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            let g = &self.grid;
            let y = k % g.n_reserve;
            let x = (k / g.n_reserve) % g.n_price;
            let s = (k / g.slice_len()) % g.n_time;
            let regime = k / (g.slice_len() * g.n_time);
            return Err(Error::Numeric {
                value: values[k],
                s,
                x,
                y,
                regime,
            });
        }
        Ok(())
    }

    fn solve_jacobi(&self, mut cur: Vec<f64>) -> Result<(Vec<f64>, usize, Vec<f64>)> {
        let mut next = vec![0.0; cur.len()];
        let mut residuals = Vec::new();
        for iter in 1..=self.config.max_iterations {
            let residual = self.sweep_into(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
            residuals.push(residual);
            if !residual.is_finite() {
                self.first_non_finite(&cur)?;
            }
            log::debug!("jacobi sweep {iter}: residual {residual:.3e}");
            if residual < self.config.tolerance {
                self.first_non_finite(&cur)?;
                return Ok((cur, iter, residuals));
            }
        }
        Err(Error::Convergence {
            iterations: self.config.max_iterations,
            residuals,
        })
    }

    fn solve_backward(&self, mut cur: Vec<f64>) -> Result<(Vec<f64>, usize, Vec<f64>)> {
        let g = self.grid;
        let len = g.slice_len();
        let inner_tol = 0.1 * self.config.tolerance;
        let mut tmp = vec![0.0; len * g.regimes];
        let mut residuals = vec![0.0; g.n_time - 1];
        let mut sweeps = 0;
        for i in 0..g.regimes {
            let off = g.slice_offset(g.terminal_index(), i);
            cur[off..off + len].copy_from_slice(&self.terminal);
        }
        for s in (0..g.terminal_index()).rev() {
            let mut converged = false;
            let mut history = Vec::new();
            for _ in 0..self.config.max_iterations {
                sweeps += 1;
                tmp.par_chunks_mut(len)
                    .enumerate()
                    .for_each(|(i, chunk)| self.update_slice(&cur, s, i, chunk));
                let mut residual: f64 = 0.0;
                for i in 0..g.regimes {
                    let off = g.slice_offset(s, i);
                    let fresh = &tmp[i * len..(i + 1) * len];
                    for (dst, v) in cur[off..off + len].iter_mut().zip(fresh) {
                        residual = residual.max((*dst - v).abs());
                        *dst = *v;
                    }
                }
                if !residual.is_finite() {
                    self.first_non_finite(&cur)?;
                }
                history.push(residual);
                if residual < inner_tol {
                    residuals[s] = residual;
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::Convergence {
                    iterations: self.config.max_iterations,
                    residuals: history,
                });
            }
        }
        self.first_non_finite(&cur)?;
        Ok((cur, sweeps, residuals))
    }

    /// Largest one-step recursion mismatch `|V(n) - F(V)(n)|` over `nodes`
    /// `(s, x, y, regime)`; terminal nodes contribute zero.
    pub fn dpp_residual(&self, field: &ValueField, nodes: &[(usize, usize, usize, usize)]) -> Result<f64> {
        self.check_grid(field)?;
        let src = field.values();
        Ok(nodes
            .iter()
            .map(|&(s, x, y, i)| {
                if s == self.grid.terminal_index() {
                    0.0
                } else {
                    (self.node_update(src, s, x, y, i, &self.controls, 0.0).0 - field.get(s, x, y, i)).abs()
                }
            })
            .fold(0.0, f64::max))
    }

    /// Compares the endpoint maximization with a dense control grid at `nodes`.
    pub fn bang_bang_audit(&self, field: &ValueField, nodes: &[(usize, usize, usize, usize)], audit: BangBangAudit) -> Result<BangBangReport> {
        self.check_grid(field)?;
        let src = field.values();
        let dense = ControlSet::Dense(audit.dense_points).rates(self.model.economics.max_rate);
        let endpoints = ControlSet::Endpoints.rates(self.model.economics.max_rate);
        let mut report = BangBangReport::default();
        for &(s, x, y, i) in nodes {
            let (e, _) = self.node_update(src, s, x, y, i, &endpoints, audit.interior_bonus);
            let (d, u) = self.node_update(src, s, x, y, i, &dense, audit.interior_bonus);
            let gap = (d - e).abs();
            if gap > report.max_gap {
                report.max_gap = gap;
                report.worst_node = Some((s, x, y, i));
            }
            if u > 0.0 && u < self.model.economics.max_rate {
                report.interior_maximizers += 1;
            }
            report.nodes += 1;
        }
        Ok(report)
    }
}

/// Options for [`HjbSolver::bang_bang_audit`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BangBangAudit {
    pub dense_points: usize,
    /// Fault injection: adds `4 β (u/ū)(1 - u/ū)` to the profit, which breaks
    /// affinity in `u`. Zero for a genuine audit.
    pub interior_bonus: f64,
}

impl Default for BangBangAudit {
    fn default() -> Self {
        BangBangAudit {
            dense_points: 51,
            interior_bonus: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BangBangReport {
    pub nodes: usize,
    pub max_gap: f64,
    pub worst_node: Option<(usize, usize, usize, usize)>,
    pub interior_maximizers: usize,
}

/// Builds the quadrature and solver, then solves.
pub fn solve(
    model: &MarketModel,
    grid: Grid4D,
    quadrature_step: f64,
    truncation: f64,
    config: SolverConfig,
) -> Result<(ValueField, ConvergenceReport)> {
    let scheme = QuadratureScheme::build(&model.measure, quadrature_step, truncation)?;
    HjbSolver::new(model, grid, scheme, config)?.solve()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::LevyMeasure;
    use crate::model::tests::reference_like;
    use crate::model::{GeneratorMatrix, PriceMap};

    fn small_model() -> MarketModel {
        let mut m = reference_like();
        m.price_map = PriceMap::Linear;
        m.economics.horizon = 1.0;
        m.economics.max_rate = 5.0;
        m
    }

    fn setup(model: &MarketModel, mode: SchemeMode) -> Result<HjbSolver> {
        let grid = Grid4D::new(model, 0.25, 0.5, 0.5, 10.0)?;
        let scheme = QuadratureScheme::build(&model.measure, 0.1, 1.0)?;
        HjbSolver::new(
            model,
            grid,
            scheme,
            SolverConfig {
                mode,
                ..SolverConfig::default()
            },
        )
    }

    fn coefficient_fixture(kappa: f64) -> (MarketModel, Grid4D, QuadratureScheme) {
        let mut m = reference_like();
        m.dynamics.kappa = kappa;
        m.dynamics.sigma = vec![0.2, 0.2];
        m.measure = LevyMeasure::Null;
        let g = Grid4D::new(&m, 0.1, 0.5, 0.5, 100.0).unwrap();
        let q = QuadratureScheme::build(&m.measure, 0.1, 5.0).unwrap();
        (m, g, q)
    }

    #[test]
    fn diffusion_coefficient_value() {
        let (m, g, q) = coefficient_fixture(0.0);
        let c = scheme_coefficients(35.0, 0, 0.0, &g, &m, &q, SchemeMode::PaperFaithful).unwrap();
        assert!((c.b - 1.6).abs() < 1e-12);
    }

    #[test]
    fn drift_coefficient_value() {
        let (m, g, q) = coefficient_fixture(0.01);
        let c = scheme_coefficients(35.0, 0, 0.0, &g, &m, &q, SchemeMode::PaperFaithful).unwrap();
        assert!((c.a - 9.6).abs() < 1e-12);
        assert!((c.b - 1.6).abs() < 1e-12);
    }

    #[test]
    fn negative_drift_coefficient_refused() {
        let (m, g, q) = coefficient_fixture(0.01);
        let err = scheme_coefficients(60.0, 0, 0.0, &g, &m, &q, SchemeMode::PaperFaithful).unwrap_err();
        match err {
            Error::Monotonicity { detail, x, .. } => {
                assert_eq!(x, 60.0);
                assert!(detail.contains("-0.4"), "{detail}");
                assert!(detail.contains("0.4000"), "{detail}");
            }
            e => panic!("unexpected {e}"),
        }
        let up = scheme_coefficients(60.0, 0, 0.0, &g, &m, &q, SchemeMode::Upwind).unwrap();
        assert!(up.a > 0.0 && up.b > 0.0);
        assert!((up.b - (1.6 + 0.05 / (0.05 * 0.5))).abs() < 1e-12);
    }

    #[test]
    fn faithful_center_coefficient_formula() {
        let (mut m, g, _) = coefficient_fixture(0.01);
        m.measure = LevyMeasure::uniform(-1.0, 1.0, 0.5);
        let q = QuadratureScheme::build(&m.measure, 0.1, 5.0).unwrap();
        let (r, k, h, l) = (0.05, 0.1, 0.5, 0.5);
        let x = 30.0;
        let u = 3.0;
        let c = scheme_coefficients(x, 1, u, &g, &m, &q, SchemeMode::PaperFaithful).unwrap();
        let expect = 1.0 / (r * k) + 0.04 / (r * h * h) + 0.01 * (35.0 - x) / (r * h) - u / (r * l) + 0.5 / r + 0.15 / r;
        assert!((c.c - expect).abs() < 1e-9);
        assert!((c.reserve + u / (r * l)).abs() < 1e-12);
    }

    #[test]
    fn zero_field_maps_to_zero_when_profit_vanishes() {
        // Ψ cannot vanish identically, so check the non-terminal slices only.
        let mut m = small_model();
        m.economics.cost.fixed = 0.0;
        m.economics.max_rate = 0.0;
        m.measure = LevyMeasure::Null;
        let solver = setup(&m, SchemeMode::Upwind).unwrap();
        let g = *solver.grid();
        let zero = ValueField::zeros(g);
        assert!(solver.fixed_point_operator(&zero, 0).unwrap().iter().all(|v| *v == 0.0));
        let swept = solver.sweep(&zero).unwrap();
        for i in 0..g.regimes {
            for s in 0..g.terminal_index() {
                for x in 0..g.n_price {
                    for y in 0..g.n_reserve {
                        assert_eq!(swept.get(s, x, y, i), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn constant_field_verbatim_operator_returns_zero() {
        // null measure, Q = 0, L ≡ 0, u = 0: 1/(rk) + a + b - c = 0
        let mut m = small_model();
        m.generator = GeneratorMatrix::absorbing(2);
        m.measure = LevyMeasure::Null;
        m.economics.cost.fixed = 0.0;
        m.economics.max_rate = 0.0;
        let solver = setup(&m, SchemeMode::Upwind).unwrap();
        let g = *solver.grid();
        let c = 42.0;
        let field = ValueField::from_fn(g, |_, _, _, _| c);
        let raw = solver.fixed_point_operator(&field, 1).unwrap();
        assert!(raw.iter().all(|v| v.abs() < 1e-9), "{:?}", &raw[..4]);
        // normalized map: C c/(1+c) at every node
        let swept = solver.sweep(&field).unwrap();
        for xi in [0, 5, g.n_price - 1] {
            let coef = scheme_coefficients(g.price_state(xi), 0, 0.0, &g, &m, solver.scheme(), SchemeMode::Upwind).unwrap();
            let expect = c * coef.c / (1.0 + coef.c);
            assert!((swept.get(1, xi, 3, 0) - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn raw_and_normalized_share_fixed_point() {
        let m = small_model();
        let solver = setup(&m, SchemeMode::Upwind).unwrap();
        let (v, _) = solver.solve().unwrap();
        let g = *solver.grid();
        let raw = solver.fixed_point_operator(&v, 1).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..g.regimes {
            for xi in 0..g.n_price {
                for y in 0..g.n_reserve {
                    let k = (i * g.n_price + xi) * g.n_reserve + y;
                    let coef = scheme_coefficients(g.price_state(xi), i, 5.0, &g, &m, solver.scheme(), SchemeMode::Upwind).unwrap();
                    worst = worst.max((raw[k] - v.get(1, xi, y, i)).abs() / (1.0 + coef.c));
                }
            }
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn jacobi_and_backward_agree() {
        let m = small_model();
        let jac = setup(&m, SchemeMode::Upwind).unwrap();
        let (vj, rj) = jac.solve().unwrap();
        let grid = *jac.grid();
        let back = HjbSolver::new(
            &m,
            grid,
            jac.scheme().clone(),
            SolverConfig {
                order: IterationOrder::BackwardSlices,
                ..SolverConfig::default()
            },
        )
        .unwrap();
        let (vb, rb) = back.solve().unwrap();
        assert!(vj.sup_distance(&vb) < 2.0 * 1e-6, "{}", vj.sup_distance(&vb));
        assert!(rj.final_residual < 1e-6 && rb.final_residual < 1e-6);
    }

    #[test]
    fn residuals_nonincreasing() {
        let m = small_model();
        let solver = setup(&m, SchemeMode::Upwind).unwrap();
        let (_, report) = solver.solve().unwrap();
        for w in report.residuals.windows(2).skip(1) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", w);
        }
        assert!(solver.coefficient_report().contraction_factor < 1.0);
    }

    #[test]
    fn terminal_slice_exact() {
        let m = small_model();
        let solver = setup(&m, SchemeMode::Upwind).unwrap();
        let (v, _) = solver.solve().unwrap();
        let g = *solver.grid();
        for i in 0..g.regimes {
            for x in 0..g.n_price {
                for y in 0..g.n_reserve {
                    let psi = m.terminal_value(g.price_state(x), g.reserve(y)).unwrap();
                    assert_eq!(v.get(g.terminal_index(), x, y, i), psi);
                }
            }
        }
    }

    #[test]
    fn dense_controls_match_endpoints() {
        let m = small_model();
        let end = setup(&m, SchemeMode::Upwind).unwrap();
        let (ve, _) = end.solve().unwrap();
        let dense = HjbSolver::new(
            &m,
            *end.grid(),
            end.scheme().clone(),
            SolverConfig {
                controls: ControlSet::Dense(21),
                ..SolverConfig::default()
            },
        )
        .unwrap();
        let (vd, _) = dense.solve().unwrap();
        assert!(ve.sup_distance(&vd) < 1e-6);
    }

    #[test]
    fn bang_bang_fault_is_detected() {
        let m = small_model();
        let solver = setup(&m, SchemeMode::Upwind).unwrap();
        let (v, _) = solver.solve().unwrap();
        let nodes: Vec<_> = (0..4).map(|s| (s, 10, 6, 0)).collect();
        let clean = solver.bang_bang_audit(&v, &nodes, BangBangAudit::default()).unwrap();
        assert!(clean.max_gap < 1e-9);
        let broken = solver
            .bang_bang_audit(
                &v,
                &nodes,
                BangBangAudit {
                    interior_bonus: 100.0,
                    ..BangBangAudit::default()
                },
            )
            .unwrap();
        assert!(broken.max_gap > 1e-3);
        assert!(broken.interior_maximizers > 0);
    }

    #[test]
    fn dpp_detects_perturbation() {
        let m = small_model();
        let solver = setup(&m, SchemeMode::Upwind).unwrap();
        let (mut v, _) = solver.solve().unwrap();
        let g = *solver.grid();
        let terminal: Vec<_> = (0..g.n_price).map(|x| (g.terminal_index(), x, 2, 0)).collect();
        assert_eq!(solver.dpp_residual(&v, &terminal).unwrap(), 0.0);
        let node = (1, 8, 4, 1);
        assert!(solver.dpp_residual(&v, &[node]).unwrap() < 1e-6);
        let old = v.get(node.0, node.1, node.2, node.3);
        v.set(node.0, node.1, node.2, node.3, old + 1.0);
        assert!(solver.dpp_residual(&v, &[node]).unwrap() >= 0.5);
    }

    #[test]
    fn faithful_mode_refuses_large_extraction() {
        let mut m = small_model();
        m.economics.max_rate = 50_000.0;
        m.dynamics.kappa = 0.0;
        let err = setup(&m, SchemeMode::PaperFaithful).unwrap_err();
        assert!(matches!(err, Error::Monotonicity { .. }));
    }

    #[test]
    fn faithful_mode_runs_when_checks_pass() {
        let mut m = small_model();
        m.dynamics.kappa = 0.0;
        m.economics.max_rate = 0.0;
        let solver = setup(&m, SchemeMode::PaperFaithful).unwrap();
        assert!(solver.coefficient_report().monotone);
        let (_, report) = solver.solve().unwrap();
        assert!(report.final_residual < 1e-6);
        m.economics.max_rate = 1.0;
        let solver = setup(&m, SchemeMode::PaperFaithful).unwrap();
        assert!(!solver.coefficient_report().monotone);
    }

    #[test]
    fn contraction_failure_refuses_to_run() {
        let mut m = small_model();
        m.measure = LevyMeasure::double_exponential(0.5, 40.0, 40.0, 400.0);
        let grid = Grid4D::new(&m, 0.25, 0.5, 0.5, 10.0).unwrap();
        let scheme = QuadratureScheme::build(&m.measure, 0.5, 1.0).unwrap();
        assert!(!scheme.check_contraction(0.05).pass);
        let err = HjbSolver::new(&m, grid, scheme, SolverConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Contraction { .. }));
    }

    #[test]
    fn non_convergence_reports_history() {
        let m = small_model();
        let grid = Grid4D::new(&m, 0.25, 0.5, 0.5, 10.0).unwrap();
        let scheme = QuadratureScheme::build(&m.measure, 0.1, 1.0).unwrap();
        let solver = HjbSolver::new(
            &m,
            grid,
            scheme,
            SolverConfig {
                max_iterations: 2,
                ..SolverConfig::default()
            },
        )
        .unwrap();
        match solver.solve().unwrap_err() {
            Error::Convergence { iterations, residuals } => {
                assert_eq!(iterations, 2);
                assert_eq!(residuals.len(), 2);
            }
            e => panic!("unexpected {e}"),
        }
    }
}
