//! Programmatic verification checks, shared by the `verify` command and the
//! acceptance suite.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grid::{Grid4D, ValueField};
use crate::measure::LevyMeasure;
use crate::model::{CostModel, DynamicsParams, EconomicModel, GeneratorMatrix, JumpConvention, MarketModel, PriceMap};
use crate::policy::{extract_policy, figure_slices, switching_curves, switching_function};
use crate::quadrature::QuadratureScheme;
use crate::sim::{analytic_oracle, EstimateReport, Simulator, StartState};
use crate::solver::{BangBangAudit, ConvergenceReport, HjbSolver, IterationOrder, SchemeMode, SolverConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub bound: f64,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, value: f64, bound: f64, pass: bool, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            pass,
            value,
            bound,
            detail,
        }
    }

    fn at_most(name: &str, value: f64, bound: f64, detail: String) -> Self {
        Self::new(name, value, bound, value <= bound, detail)
    }
}

/// Uniformly sampled nodes `(s, x, y, regime)`.
pub fn random_nodes(grid: &Grid4D, count: usize, seed: u64) -> Vec<(usize, usize, usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            (
                rng.random_range(0..grid.n_time),
                rng.random_range(0..grid.n_price),
                rng.random_range(0..grid.n_reserve),
                rng.random_range(0..grid.regimes),
            )
        })
        .collect()
}

/// A solved configuration.
pub struct SolvedRun {
    pub config: RunConfig,
    pub model: MarketModel,
    pub solver: HjbSolver,
    pub field: ValueField,
    pub report: ConvergenceReport,
    pub seconds: f64,
}

impl SolvedRun {
    pub fn solve(config: &RunConfig) -> Result<Self> {
        let model = config.validate()?;
        let grid = config.grid(&model)?;
        let scheme = config.quadrature(&model)?;
        let solver = HjbSolver::new(&model, grid, scheme, config.solver_config())?;
        let start = Instant::now();
        let (field, report) = solver.solve()?;
        Ok(SolvedRun {
            config: config.clone(),
            model,
            solver,
            field,
            report,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    pub fn grid(&self) -> &Grid4D {
        self.solver.grid()
    }

    pub fn mode(&self) -> SchemeMode {
        self.solver.config().mode
    }
}

/// Restricted model with a closed-form value: one regime, no jumps, no
/// extraction, linear price, no fixed cost.
pub fn oracle_model() -> MarketModel {
    MarketModel {
        generator: GeneratorMatrix::absorbing(1),
        dynamics: DynamicsParams {
            kappa: 0.01,
            mu: vec![55.0],
            sigma: vec![0.2],
            gamma: vec![0.0],
            discount_rate: 0.05,
        },
        measure: LevyMeasure::Null,
        price_map: PriceMap::Linear,
        jump_convention: JumpConvention::Proportional,
        economics: EconomicModel {
            cost: CostModel {
                fixed: 0.0,
                scale: 1.0,
                reserve_slope: 0.0,
                unit: 20.0,
            },
            max_rate: 0.0,
            reserve_cap: 10.0,
            horizon: 1.0,
            terminal_offset: 20.0,
        },
    }
}

pub const ORACLE_PRICE_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleError {
    pub steps: (f64, f64, f64),
    pub max_relative_error: f64,
    pub nodes: usize,
    pub seconds: f64,
}

/// Max relative error against the closed form over interior nodes:
/// `x ∈ [R/4, 3R/4]`, `y ≤ K - l`, `s < T`.
pub fn oracle_error(k: f64, h: f64, l: f64, tolerance: f64) -> Result<OracleError> {
    let model = oracle_model();
    let grid = Grid4D::new(&model, k, h, l, ORACLE_PRICE_CAP)?;
    let scheme = QuadratureScheme::build(&model.measure, 0.1, 1.0)?;
    let solver = HjbSolver::new(
        &model,
        grid,
        scheme,
        SolverConfig {
            tolerance,
            order: IterationOrder::BackwardSlices,
            ..SolverConfig::default()
        },
    )?;
    let start = Instant::now();
    let (v, _) = solver.solve()?;
    let seconds = start.elapsed().as_secs_f64();
    let mut worst: f64 = 0.0;
    let mut nodes = 0;
    let (lo, hi) = (0.25 * ORACLE_PRICE_CAP, 0.75 * ORACLE_PRICE_CAP);
    for s in 0..grid.terminal_index() {
        for x in 0..grid.n_price {
            let xv = grid.price_state(x);
            if xv < lo - 1e-9 || xv > hi + 1e-9 {
                continue;
            }
            for y in 0..grid.n_reserve - 1 {
                let exact = analytic_oracle(&model, grid.time(s), xv, grid.reserve(y))?;
                worst = worst.max(((v.get(s, x, y, 0) - exact) / exact).abs());
                nodes += 1;
            }
        }
    }
    Ok(OracleError {
        steps: (k, h, l),
        max_relative_error: worst,
        nodes,
        seconds,
    })
}

/// Criterion: error below 2% at `(0.01, 0.25, 0.25)` and at least 30% smaller
/// with every step halved.
pub fn check_oracle(tolerance: f64) -> Result<CheckResult> {
    let coarse = oracle_error(0.01, 0.25, 0.25, tolerance)?;
    let fine = oracle_error(0.005, 0.125, 0.125, tolerance)?;
    let reduction = 1.0 - fine.max_relative_error / coarse.max_relative_error;
    let pass = coarse.max_relative_error < 0.02 && reduction >= 0.3;
    Ok(CheckResult::new(
        "oracle",
        coarse.max_relative_error,
        0.02,
        pass,
        format!(
            "relative error {:.3e} ({} nodes) -> {:.3e} halved, reduction {:.1}%, {:.1}s",
            coarse.max_relative_error,
            coarse.nodes,
            fine.max_relative_error,
            100.0 * reduction,
            coarse.seconds + fine.seconds
        ),
    ))
}

pub fn check_bang_bang(run: &SolvedRun, nodes: usize, seed: u64, interior_bonus: f64) -> Result<CheckResult> {
    let sample = random_nodes(run.grid(), nodes, seed);
    let audit = run.solver.bang_bang_audit(
        &run.field,
        &sample,
        BangBangAudit {
            dense_points: 51,
            interior_bonus,
        },
    )?;
    let eps = run.solver.config().tolerance;
    Ok(CheckResult::at_most(
        "bang-bang",
        audit.max_gap,
        eps,
        format!(
            "dense(51) vs endpoints over {} nodes: max gap {:.3e}, interior maximizers {}",
            audit.nodes, audit.max_gap, audit.interior_maximizers
        ),
    ))
}

pub fn check_contraction(run: &SolvedRun) -> CheckResult {
    let r = &run.report;
    let eps = run.solver.config().tolerance;
    let mut increases = 0;
    if r.order == IterationOrder::Jacobi {
        for (j, w) in r.residuals.windows(2).enumerate() {
            // residual j+2 compared with j+1; only after iteration 2
            if j >= 1 && w[1] > w[0] {
                increases += 1;
            }
        }
    }
    let reached = r.residuals.last().is_some_and(|v| *v < eps);
    let c = r.contraction;
    CheckResult::new(
        "contraction",
        c.value,
        1.0,
        c.pass && increases == 0 && reached,
        format!(
            "|sum c_j - Gamma|/r = {:.3e}, {} sweeps, final residual {:.3e}, {} increases after sweep 2",
            c.value,
            r.iterations,
            r.residuals.last().copied().unwrap_or(f64::NAN),
            increases
        ),
    )
}

/// Random ordered pairs `W1 ≤ W2` around the solved field; counts nodes where
/// one sweep breaks the order.
pub fn monotonicity_violations(solver: &HjbSolver, base: &ValueField, trials: usize, seed: u64) -> Result<(usize, usize)> {
    let grid = *solver.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut compared = 0;
    let scale = base.values().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for _ in 0..trials {
        let mut lower = Vec::with_capacity(grid.len());
        let mut upper = Vec::with_capacity(grid.len());
        for &v in base.values() {
            let a = v + scale * (rng.random::<f64>() - 0.5);
            lower.push(a);
            upper.push(a + scale * rng.random::<f64>());
        }
        let f1 = solver.sweep(&ValueField::from_values(grid, lower)?)?;
        let f2 = solver.sweep(&ValueField::from_values(grid, upper)?)?;
        violations += f1.values().iter().zip(f2.values()).filter(|(a, b)| a > b).count();
        compared += grid.len();
    }
    Ok((violations, compared))
}

pub fn check_monotonicity(run: &SolvedRun, trials: usize, seed: u64) -> Result<CheckResult> {
    let (violations, compared) = monotonicity_violations(&run.solver, &run.field, trials, seed)?;
    Ok(CheckResult::new(
        "monotonicity",
        violations as f64,
        0.0,
        violations == 0,
        format!("{trials} ordered pairs, {compared} node comparisons, {violations} violations"),
    ))
}

/// `|V - mean| ≤ 3 SE + C (h + k + l)` for one start state.
#[derive(Clone, Debug, PartialEq)]
pub struct McComparison {
    pub start: StartState,
    pub value: f64,
    pub estimate: EstimateReport,
    pub gap: f64,
    pub bound: f64,
}

impl McComparison {
    pub fn pass(&self) -> bool {
        self.gap <= self.bound
    }
}

/// Solver value at a start state; time and reserve must sit on grid nodes,
/// price is interpolated.
pub fn value_at(field: &ValueField, start: &StartState) -> Result<f64> {
    let g = field.grid();
    let s = start.time / g.time_step;
    let y = start.reserve / g.reserve_step;
    if (s - s.round()).abs() > 1e-9 || (y - y.round()).abs() > 1e-9 {
        return Err(Error::Domain(format!(
            "start time {} and reserve {} must lie on grid nodes",
            start.time, start.reserve
        )));
    }
    Ok(field.lookup_interpolated(s.round() as usize, start.price, y.round() as usize, start.regime))
}

pub fn mc_comparisons(run: &SolvedRun, seed: u64) -> Result<Vec<McComparison>> {
    let sw = switching_function(&run.field, &run.model, run.mode());
    let policy = extract_policy(&sw, &run.model);
    let sim = Simulator::new(&run.model, run.solver.scheme());
    let g = run.grid();
    let sc = &run.config.simulation;
    let slack = sc.error_constant * (g.price_step + g.time_step + g.reserve_step);
    run.config
        .starts()
        .into_iter()
        .map(|start| {
            let value = value_at(&run.field, &start)?;
            let estimate = sim.estimate_value(&policy, start, sc.paths, sc.time_step, seed, sc.antithetic)?;
            let gap = (value - estimate.mean).abs();
            let bound = 3.0 * estimate.standard_error + slack;
            Ok(McComparison {
                start,
                value,
                estimate,
                gap,
                bound,
            })
        })
        .collect()
}

pub fn check_monte_carlo(run: &SolvedRun, seed: u64) -> Result<(CheckResult, Vec<McComparison>)> {
    let start = Instant::now();
    let rows = mc_comparisons(run, seed)?;
    let worst = rows.iter().map(|r| r.gap / r.bound).fold(0.0, f64::max);
    let detail = rows
        .iter()
        .map(|r| {
            format!(
                "(s={}, x={}, y={}, i={}): V={:.4} mc={:.4} se={:.4} gap={:.4} bound={:.4}",
                r.start.time, r.start.price, r.start.reserve, r.start.regime, r.value, r.estimate.mean, r.estimate.standard_error, r.gap, r.bound
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    Ok((
        CheckResult::new(
            "monte-carlo",
            worst,
            1.0,
            rows.iter().all(McComparison::pass),
            format!("C = {}, {:.1}s: {detail}", run.config.simulation.error_constant, start.elapsed().as_secs_f64()),
        ),
        rows,
    ))
}

/// Quadrature masses at `ξ = 1e-3` for a truncated uniform and an asymmetric
/// double exponential, plus the symmetric first moment.
pub fn check_quadrature() -> Result<CheckResult> {
    let step = 1e-3;
    let z = 5.0;
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    let cases = [
        ("uniform[-2,3]", LevyMeasure::uniform(-2.0, 3.0, 1.5)),
        ("double-exp", LevyMeasure::double_exponential(0.3, 2.0, 3.0, 0.8)),
    ];
    for (name, m) in cases.iter() {
        let q = QuadratureScheme::build(m, step, z)?;
        let gamma = m.total_mass();
        let mass_err = (q.weight_sum() - gamma).abs() / gamma;
        let small = m.mass_between(-1.0, 1.0, z).unwrap_or(0.0);
        let comp_err = (q.compensator_sum() - small).abs() / small.max(1.0);
        worst = worst.max(mass_err).max(comp_err);
        notes.push(format!("{name}: mass {mass_err:.2e}, small-jump mass {comp_err:.2e}"));
    }
    let mut moment: f64 = 0.0;
    for m in [LevyMeasure::uniform(-1.0, 1.0, 0.5), LevyMeasure::double_exponential(0.5, 2.0, 2.0, 1.0)] {
        moment = moment.max(QuadratureScheme::build(&m, step, z)?.compensator_moment().abs());
    }
    notes.push(format!("symmetric |sum d_j z_j| {moment:.2e}"));
    Ok(CheckResult::new(
        "quadrature",
        worst,
        1e-4,
        worst < 1e-4 && moment < 1e-10,
        notes.join("; "),
    ))
}

pub fn check_dpp(run: &SolvedRun, nodes: usize, seed: u64) -> Result<CheckResult> {
    let sample = random_nodes(run.grid(), nodes, seed);
    let residual = run.solver.dpp_residual(&run.field, &sample)?;
    let bound = 10.0 * run.solver.config().tolerance;
    Ok(CheckResult::at_most("dpp", residual, bound, format!("max one-step mismatch over {nodes} nodes {residual:.3e}")))
}

pub fn check_switching(run: &SolvedRun) -> CheckResult {
    let sw = switching_function(&run.field, &run.model, run.mode());
    let rows = switching_curves(&sw, &figure_slices(run.grid()));
    let mut bad = Vec::new();
    for r in &rows {
        // at most one crossing, and it must go from G ≤ 0 to G > 0 upward in x
        let downward = r.point.sign_changes == 1 && r.point.threshold.is_none();
        if !r.point.diagnostics.is_empty() || downward {
            bad.push(format!("(s={}, y={}, i={}): {} changes", r.s, r.y, r.regime, r.point.sign_changes));
        }
    }
    let crossings = rows.iter().filter(|r| r.point.threshold.is_some()).count();
    CheckResult::new(
        "switching-curve",
        bad.len() as f64,
        0.0,
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} curves, {crossings} with a single upward crossing", rows.len())
        } else {
            bad.into_iter().take(5).collect::<Vec<_>>().join("; ")
        },
    )
}

pub fn check_terminal(run: &SolvedRun) -> Result<CheckResult> {
    let g = run.grid();
    let mut mismatches = 0;
    for i in 0..g.regimes {
        for x in 0..g.n_price {
            for y in 0..g.n_reserve {
                let psi = run.model.terminal_value(g.price_state(x), g.reserve(y))?;
                if run.field.get(g.terminal_index(), x, y, i) != psi {
                    mismatches += 1;
                }
            }
        }
    }
    Ok(CheckResult::new(
        "terminal",
        mismatches as f64,
        0.0,
        mismatches == 0,
        format!("{} terminal nodes, {mismatches} differ from the terminal payoff", g.slice_len() * g.regimes),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub sample_nodes: usize,
    pub monotonicity_trials: usize,
    pub interior_bonus: f64,
    pub monte_carlo: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 7,
            sample_nodes: 1000,
            monotonicity_trials: 100,
            interior_bonus: 0.0,
            monte_carlo: true,
        }
    }
}

/// Every check against `run`, in a fixed order.
pub fn run_checks(run: &SolvedRun, opts: VerifyOptions) -> Result<Vec<CheckResult>> {
    let mut out = vec![check_oracle(run.solver.config().tolerance)?];
    out.push(check_bang_bang(run, opts.sample_nodes, opts.seed, opts.interior_bonus)?);
    out.push(check_contraction(run));
    out.push(check_monotonicity(run, opts.monotonicity_trials, opts.seed)?);
    if opts.monte_carlo {
        out.push(check_monte_carlo(run, run.config.simulation.seed)?.0);
    }
    out.push(check_quadrature()?);
    out.push(check_dpp(run, opts.sample_nodes, opts.seed.wrapping_add(1))?);
    out.push(check_switching(run));
    out.push(check_terminal(run)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_nodes_in_range_and_reproducible() {
        let m = oracle_model();
        let g = Grid4D::new(&m, 0.1, 0.5, 0.5, 10.0).unwrap();
        let a = random_nodes(&g, 200, 3);
        assert_eq!(a, random_nodes(&g, 200, 3));
        assert!(a.iter().all(|&(s, x, y, i)| s < g.n_time && x < g.n_price && y < g.n_reserve && i == 0));
    }

    #[test]
    fn quadrature_check_passes() {
        let c = check_quadrature().unwrap();
        assert!(c.pass, "{}", c.detail);
    }

    #[test]
    fn value_at_requires_nodes() {
        let m = oracle_model();
        let g = Grid4D::new(&m, 0.1, 0.5, 0.5, 10.0).unwrap();
        let v = ValueField::from_fn(g, |_, x, _, _| x as f64);
        let start = StartState {
            time: 0.2,
            price: 1.25,
            reserve: 1.0,
            regime: 0,
        };
        assert!((value_at(&v, &start).unwrap() - 2.5).abs() < 1e-12);
        assert!(value_at(&v, &StartState { reserve: 0.3, ..start }).is_err());
    }
}
