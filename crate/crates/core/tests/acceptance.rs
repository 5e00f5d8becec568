//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::process::ExitCode;
use std::time::Instant;

use extraction_core::config::RunConfig;
use extraction_core::measure::LevyMeasure;
use extraction_core::model::PriceMap;
use extraction_core::verify::{self, CheckResult, SolvedRun};
use extraction_core::{HjbSolver, Grid4D, QuadratureScheme, SchemeMode, SolverConfig};

const SEED: u64 = 7;

fn report(index: usize, label: &str, result: &CheckResult, failures: &mut usize) {
    if !result.pass {
        *failures += 1;
    }
    println!(
        "[{}] {index}. {label}: value {:.4e} (bound {:.4e}) | {}",
        if result.pass { "PASS" } else { "FAIL" },
        result.value,
        result.bound,
        result.detail
    );
}

/// Paper-faithful mode on a configuration whose coefficient checks pass.
fn paper_faithful_monotonicity() -> CheckResult {
    let mut cfg = RunConfig::reference();
    cfg.model.economics.max_rate = 0.0;
    cfg.model.kappa = 0.0;
    cfg.model.economics.horizon = 1.0;
    let mut model = cfg.market_model().unwrap();
    model.price_map = PriceMap::Linear;
    model.measure = LevyMeasure::uniform(-1.0, 1.0, 0.5);
    let grid = Grid4D::new(&model, 0.1, 0.5, 0.5, 100.0).unwrap();
    let scheme = QuadratureScheme::build(&model.measure, 0.05, 5.0).unwrap();
    let cfg_solver = SolverConfig {
        mode: SchemeMode::PaperFaithful,
        ..SolverConfig::default()
    };
    let solver = match HjbSolver::new(&model, grid, scheme, cfg_solver) {
        Ok(s) => s,
        Err(e) => {
            return CheckResult {
                name: "monotonicity".into(),
                pass: false,
                value: f64::NAN,
                bound: 0.0,
                detail: format!("paper-faithful coefficient check failed: {e}"),
            }
        }
    };
    let base = solver.initial_guess();
    let (violations, compared) = verify::monotonicity_violations(&solver, &base, 20, SEED).unwrap();
    CheckResult {
        name: "monotonicity".into(),
        pass: violations == 0 && solver.coefficient_report().monotone,
        value: violations as f64,
        bound: 0.0,
        detail: format!("paper-faithful (checks pass, u-bar = 0): 20 pairs, {compared} comparisons, {violations} violations"),
    }
}

fn main() -> ExitCode {
    let total = Instant::now();
    let mut failures = 0;
    let cfg = RunConfig::reference();
    let run = SolvedRun::solve(&cfg).expect("reference solve");
    println!(
        "reference solve: {} sweeps in {:.1}s, final residual {:.3e}",
        run.report.iterations, run.seconds, run.report.final_residual
    );

    let t = Instant::now();
    let oracle = verify::check_oracle(1e-6).expect("oracle solve");
    report(1, "analytic oracle", &oracle, &mut failures);
    println!("    runtime {:.1}s (limit 60s)", t.elapsed().as_secs_f64());

    let bb = verify::check_bang_bang(&run, 1000, SEED, 0.0).unwrap();
    report(2, "bang-bang audit", &bb, &mut failures);

    report(3, "contraction and residual decay", &verify::check_contraction(&run), &mut failures);

    let mut mono = verify::check_monotonicity(&run, 100, SEED).unwrap();
    let pf = paper_faithful_monotonicity();
    mono.pass &= pf.pass;
    mono.detail = format!("upwind: {}; {}", mono.detail, pf.detail);
    report(4, "scheme monotonicity", &mono, &mut failures);

    let t = Instant::now();
    let (mc, _) = verify::check_monte_carlo(&run, cfg.simulation.seed).unwrap();
    report(5, "Monte Carlo consistency", &mc, &mut failures);
    println!("    runtime {:.1}s (limit 300s)", t.elapsed().as_secs_f64());

    report(6, "quadrature accuracy", &verify::check_quadrature().unwrap(), &mut failures);
    report(7, "DPP residual", &verify::check_dpp(&run, 1000, SEED + 1).unwrap(), &mut failures);
    report(8, "switching curve shape", &verify::check_switching(&run), &mut failures);
    report(9, "terminal exactness", &verify::check_terminal(&run).unwrap(), &mut failures);

    println!("{} of 9 criteria passed in {:.1}s", 9 - failures, total.elapsed().as_secs_f64());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
