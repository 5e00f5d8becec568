use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde_json::{json, Value};

use extraction_core::config::{ModeName, RunConfig};
use extraction_core::policy::{extract_policy, figure_slices, switching_curves, switching_function, write_curve_csv};
use extraction_core::sim::Simulator;
use extraction_core::verify::{self, CheckResult, SolvedRun, VerifyOptions};
use extraction_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "extract", version, about = "Optimal extraction value function, policy and Monte Carlo checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; the bundled reference is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides `output.directory`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Simulation seed (overrides `simulation.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,

    /// Number of simulated paths per start state to write as CSV.
    #[arg(long, global = true, default_value_t = 0)]
    dump_paths: usize,

    #[arg(long, global = true, value_enum, hide = true)]
    inject_fault: Option<Fault>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Solve for the value field.
    Solve,
    /// Solve, then write the bang-bang policy and switching curves.
    Policy,
    /// Solve, then compare Monte Carlo estimates under the policy with the solver value.
    Simulate,
    /// Run every verification check and print a pass/fail table.
    Verify,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ModeArg {
    PaperFaithful,
    Upwind,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Fault {
    BangBang,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_toml(&fs::read_to_string(path)?)?,
        None => RunConfig::reference(),
    };
    if let Some(seed) = cli.seed {
        cfg.simulation.seed = seed;
    }
    if let Some(mode) = cli.mode {
        cfg.solver.mode = match mode {
            ModeArg::PaperFaithful => ModeName::PaperFaithful,
            ModeArg::Upwind => ModeName::Upwind,
        };
    }
    if let Some(out) = &cli.out {
        cfg.output.directory = out.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn manifest(command: Command, run: &SolvedRun, started: Instant, extra: Value) -> Value {
    let r = &run.report;
    let coef = run.solver.coefficient_report();
    json!({
        "command": format!("{command:?}").to_lowercase(),
        "version": env!("CARGO_PKG_VERSION"),
        "config": run.config,
        "config_toml": run.config.to_toml(),
        "mode": format!("{:?}", r.mode),
        "order": format!("{:?}", r.order),
        "price_map": format!("{:?}", run.model.price_map),
        "contraction_value": r.contraction.value,
        "quadrature_weight_sum": r.contraction.weight_sum,
        "total_mass": r.contraction.total_mass,
        "truncated_mass_fraction": run.solver.scheme().truncated_mass_fraction(),
        "iterations": r.iterations,
        "last_update": r.residuals.last(),
        "final_residual": r.final_residual,
        "tolerance": run.solver.config().tolerance,
        "residual_below_tolerance": r.final_residual < run.solver.config().tolerance,
        "monotone_coefficients": coef.monotone,
        "contraction_factor": coef.contraction_factor,
        "solve_seconds": run.seconds,
        "wall_seconds": started.elapsed().as_secs_f64(),
        "details": extra,
    })
}

fn write_manifest(dir: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(())
}

fn solve(cfg: &RunConfig, dir: &Path) -> Result<SolvedRun> {
    let run = SolvedRun::solve(cfg)?;
    info!(
        "solved in {} sweeps ({:.2}s), final residual {:.3e}",
        run.report.iterations, run.seconds, run.report.final_residual
    );
    run.field.write_csv(create(dir, "value.csv")?, None)?;
    run.report.write_csv(create(dir, "convergence.csv")?)?;
    Ok(run)
}

fn print_checks(checks: &[CheckResult]) {
    println!("{:<16} {:<6} {:>12} {:>12}  detail", "check", "result", "value", "bound");
    for c in checks {
        println!(
            "{:<16} {:<6} {:>12.4e} {:>12.4e}  {}",
            c.name,
            if c.pass { "pass" } else { "FAIL" },
            c.value,
            c.bound,
            c.detail
        );
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let started = Instant::now();
    let cfg = load_config(cli)?;
    cfg.validate()?;
    let dir = PathBuf::from(&cfg.output.directory);
    fs::create_dir_all(&dir)?;
    let run = solve(&cfg, &dir)?;

    match cli.command {
        Command::Solve => {
            write_manifest(&dir, &manifest(cli.command, &run, started, json!({})))?;
            println!(
                "value.csv, convergence.csv, manifest.json written to {} ({} sweeps, residual {:.3e})",
                dir.display(),
                run.report.iterations,
                run.report.final_residual
            );
            Ok(true)
        }
        Command::Policy => {
            let sw = switching_function(&run.field, &run.model, run.mode());
            let policy = extract_policy(&sw, &run.model);
            sw.write_policy_csv(&policy, create(&dir, "policy.csv")?)?;
            let grid = *run.grid();
            let rows = switching_curves(&sw, &figure_slices(&grid));
            write_curve_csv(&grid, &rows, create(&dir, "switching_curve.csv")?)?;
            let near_cap = rows
                .iter()
                .filter(|r| r.point.threshold.is_some_and(|x| x >= grid.price_cap - grid.price_step))
                .count();
            if near_cap > 0 {
                warn!("{near_cap} switching curves reach the price cap R = {}; consider a larger R", grid.price_cap);
            }
            let diagnostics: Vec<&String> = rows.iter().flat_map(|r| &r.point.diagnostics).collect();
            for d in &diagnostics {
                warn!("multiple crossings: {d}");
            }
            write_manifest(
                &dir,
                &manifest(
                    cli.command,
                    &run,
                    started,
                    json!({ "figure_slices": figure_slices(&grid).iter().map(|s| grid.time(*s)).collect::<Vec<_>>(),
                            "curves_at_cap": near_cap,
                            "diagnostics": diagnostics }),
                ),
            )?;
            println!("policy.csv, switching_curve.csv written to {}", dir.display());
            Ok(true)
        }
        Command::Simulate => {
            let rows = verify::mc_comparisons(&run, cfg.simulation.seed)?;
            let mut w = csv::Writer::from_writer(create(&dir, "simulate.csv")?);
            w.write_record(["s", "x", "y", "regime", "value", "mc_mean", "standard_error", "gap", "bound", "pass"])?;
            for r in &rows {
                w.write_record(&[
                    r.start.time.to_string(),
                    r.start.price.to_string(),
                    r.start.reserve.to_string(),
                    r.start.regime.to_string(),
                    r.value.to_string(),
                    r.estimate.mean.to_string(),
                    r.estimate.standard_error.to_string(),
                    r.gap.to_string(),
                    r.bound.to_string(),
                    r.pass().to_string(),
                ])?;
            }
            w.flush()?;
            if cli.dump_paths > 0 {
                let sw = switching_function(&run.field, &run.model, run.mode());
                let policy = extract_policy(&sw, &run.model);
                let sim = Simulator::new(&run.model, run.solver.scheme());
                for (k, start) in cfg.starts().iter().enumerate() {
                    for p in 0..cli.dump_paths {
                        let path = sim.simulate_path(&policy, *start, cfg.simulation.time_step, cfg.simulation.seed, p as u64)?;
                        path.write_csv(create(&dir, &format!("path_{k}_{p}.csv"))?)?;
                    }
                }
            }
            let all = rows.iter().all(|r| r.pass());
            let summary: Vec<Value> = rows
                .iter()
                .map(|r| {
                    json!({ "start": [r.start.time, r.start.price, r.start.reserve, r.start.regime],
                            "value": r.value, "mean": r.estimate.mean, "standard_error": r.estimate.standard_error,
                            "gap": r.gap, "bound": r.bound, "clamps": r.estimate.clamps, "jumps": r.estimate.jumps })
                })
                .collect();
            write_manifest(
                &dir,
                &manifest(
                    cli.command,
                    &run,
                    started,
                    json!({ "seed": cfg.simulation.seed, "paths": cfg.simulation.paths,
                            "error_constant": cfg.simulation.error_constant, "starts": summary }),
                ),
            )?;
            for r in &rows {
                println!(
                    "start (s={}, x={}, y={}, i={}): V = {:.4}, MC = {:.4} ± {:.4}, gap {:.4} (bound {:.4}) {}",
                    r.start.time,
                    r.start.price,
                    r.start.reserve,
                    r.start.regime,
                    r.value,
                    r.estimate.mean,
                    r.estimate.standard_error,
                    r.gap,
                    r.bound,
                    if r.pass() { "pass" } else { "FAIL" }
                );
            }
            Ok(all)
        }
        Command::Verify => {
            let opts = VerifyOptions {
                interior_bonus: if cli.inject_fault == Some(Fault::BangBang) { 1.0e3 } else { 0.0 },
                ..VerifyOptions::default()
            };
            let checks = verify::run_checks(&run, opts)?;
            print_checks(&checks);
            let mut w = csv::Writer::from_writer(create(&dir, "verify.csv")?);
            w.write_record(["check", "pass", "value", "bound", "detail"])?;
            for c in &checks {
                w.write_record(&[c.name.clone(), c.pass.to_string(), c.value.to_string(), c.bound.to_string(), c.detail.clone()])?;
            }
            w.flush()?;
            let pass = checks.iter().all(|c| c.pass);
            write_manifest(
                &dir,
                &manifest(
                    cli.command,
                    &run,
                    started,
                    json!({ "error_constant": cfg.simulation.error_constant, "all_pass": pass,
                            "checks": checks.iter().map(|c| json!({"name": c.name, "pass": c.pass, "value": c.value, "bound": c.bound})).collect::<Vec<_>>() }),
                ),
            )?;
            Ok(pass)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: one or more checks failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Convergence { residuals, .. } = &e {
                eprintln!("residual history (last 5): {:?}", &residuals[residuals.len().saturating_sub(5)..]);
            }
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
