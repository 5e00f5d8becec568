//! Monte Carlo simulation of the controlled state process.
//!
//! Between events the price follows an Euler–Maruyama step; jump and regime
//! switch times are drawn exactly from their exponential clocks and applied at
//! the end of the step that contains them. Path `n` draws from ChaCha stream
//! `n` of the run seed, so results do not depend on the number of workers.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::PolicyField;
use crate::measure::LevyMeasure;
use crate::model::{GeneratorMatrix, MarketModel, PriceMap};
use crate::quadrature::QuadratureScheme;

/// Extraction rate as a function of `(t, x, y, regime)`.
pub trait ControlLaw: Sync {
    fn rate(&self, t: f64, x: f64, y: f64, regime: usize) -> f64;
}

impl ControlLaw for PolicyField {
    fn rate(&self, t: f64, x: f64, y: f64, regime: usize) -> f64 {
        self.lookup_nearest(t, x, y, regime)
    }
}

impl<F: Fn(f64, f64, f64, usize) -> f64 + Sync> ControlLaw for F {
    fn rate(&self, t: f64, x: f64, y: f64, regime: usize) -> f64 {
        self(t, x, y, regime)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StartState {
    pub time: f64,
    pub price: f64,
    pub reserve: f64,
    pub regime: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegimeSwitch {
    pub time: f64,
    pub from: usize,
    pub to: usize,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Time of the next event of a clock with the given rate, or `+∞`.
fn next_event<R: Rng>(rng: &mut R, now: f64, rate: f64) -> f64 {
    if rate > 0.0 {
        now + Exp::new(rate).expect("positive rate").sample(rng)
    } else {
        f64::INFINITY
    }
}

fn next_state<R: Rng>(rng: &mut R, q: &GeneratorMatrix, i: usize) -> usize {
    let exit = q.exit_rate(i);
    let mut target = rng.random::<f64>() * exit;
    let mut last = i;
    for j in (0..q.dim()).filter(|&j| j != i && q.rate(i, j) > 0.0) {
        last = j;
        if target < q.rate(i, j) {
            return j;
        }
        target -= q.rate(i, j);
    }
    last
}

/// Switch times of the regime chain on `[start, horizon]` starting in `i0`.
pub fn simulate_regime_chain(q: &GeneratorMatrix, i0: usize, start: f64, horizon: f64, seed: u64) -> Result<Vec<RegimeSwitch>> {
    if i0 >= q.dim() {
        return Err(Error::Domain(format!("regime {i0} outside 0..{}", q.dim())));
    }
    let mut rng = stream_rng(seed, 0);
    let mut out = Vec::new();
    let mut i = i0;
    let mut t = next_event(&mut rng, start, q.exit_rate(i));
    while t <= horizon {
        let j = next_state(&mut rng, q, i);
        out.push(RegimeSwitch { time: t, from: i, to: j });
        i = j;
        t = next_event(&mut rng, t, q.exit_rate(i));
    }
    Ok(out)
}

/// One simulated trajectory, sampled at the Euler grid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PathRecord {
    pub times: Vec<f64>,
    pub price: Vec<f64>,
    pub reserve: Vec<f64>,
    pub regime: Vec<usize>,
    /// rate applied on `[t_n, t_{n+1})`; zero on the last row
    pub control: Vec<f64>,
    /// discounted running profit accumulated up to `t_n`
    pub discounted_profit: Vec<f64>,
    /// `e^{-r(T-s0)} Ψ(X(T), Y(T))`
    pub terminal_payoff: f64,
    pub switches: Vec<RegimeSwitch>,
    pub jumps: usize,
    pub clamps: usize,
}

impl PathRecord {
    pub fn payoff(&self) -> f64 {
        self.discounted_profit.last().copied().unwrap_or(0.0) + self.terminal_payoff
    }

    /// `t,x,y,regime,u,discounted_profit`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x", "y", "regime", "u", "discounted_profit"])?;
        for n in 0..self.times.len() {
            w.write_record(&[
                self.times[n].to_string(),
                self.price[n].to_string(),
                self.reserve[n].to_string(),
                self.regime[n].to_string(),
                self.control[n].to_string(),
                self.discounted_profit[n].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-path totals used by the estimator.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PathSummary {
    pub payoff: f64,
    pub jumps: usize,
    pub clamps: usize,
    pub switches: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimateReport {
    pub mean: f64,
    pub standard_error: f64,
    pub paths: usize,
    pub seed: u64,
    pub antithetic: bool,
    pub clamps: usize,
    pub jumps: usize,
}

enum JumpSampler {
    None,
    Exact(LevyMeasure),
    Table { nodes: Vec<f64>, cumulative: Vec<f64> },
}

/// Model plus the jump data the simulator needs.
pub struct Simulator {
    model: MarketModel,
    truncation: f64,
    jump_rate: f64,
    compensator: f64,
    sampler: JumpSampler,
}

impl Simulator {
    /// Uses the quadrature for the jump rate, the small-jump drift and, for
    /// custom densities, a discrete jump-size distribution.
    pub fn new(model: &MarketModel, scheme: &QuadratureScheme) -> Self {
        let jump_rate = scheme.total_mass();
        let sampler = if jump_rate <= 0.0 {
            JumpSampler::None
        } else if model.measure.sample_size(&mut stream_rng(0, 0), scheme.truncation()).is_some() {
            JumpSampler::Exact(model.measure.clone())
        } else {
            let mut acc = 0.0;
            let cumulative = scheme
                .weights()
                .iter()
                .map(|w| {
                    acc += w;
                    acc
                })
                .collect();
            JumpSampler::Table {
                nodes: scheme.nodes().to_vec(),
                cumulative,
            }
        };
        Simulator {
            model: model.clone(),
            truncation: scheme.truncation(),
            jump_rate,
            compensator: scheme.compensator_moment(),
            sampler,
        }
    }

    pub fn model(&self) -> &MarketModel {
        &self.model
    }

    fn jump_size<R: Rng>(&self, rng: &mut R) -> f64 {
        match &self.sampler {
            JumpSampler::None => 0.0,
            JumpSampler::Exact(m) => m.sample_size(rng, self.truncation).unwrap_or(0.0),
            JumpSampler::Table { nodes, cumulative } => {
                let target = rng.random::<f64>() * cumulative.last().copied().unwrap_or(0.0);
                let k = cumulative.partition_point(|c| *c <= target).min(nodes.len() - 1);
                nodes[k]
            }
        }
    }

    fn check_start(&self, start: &StartState, dt: f64) -> Result<()> {
        let e = &self.model.economics;
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("time step must be positive, got {dt}")));
        }
        if !(0.0..=e.horizon).contains(&start.time) {
            return Err(Error::Domain(format!("start time {} outside [0, {}]", start.time, e.horizon)));
        }
        if !(start.price >= 0.0 && start.price.is_finite()) {
            return Err(Error::Domain(format!("start price state {} must be nonnegative", start.price)));
        }
        if !(0.0..=e.reserve_cap).contains(&start.reserve) {
            return Err(Error::Domain(format!("start reserve {} outside [0, {}]", start.reserve, e.reserve_cap)));
        }
        if start.regime >= self.model.regimes() {
            return Err(Error::Domain(format!("start regime {} outside 0..{}", start.regime, self.model.regimes())));
        }
        Ok(())
    }

    fn run<R: Rng, C: ControlLaw + ?Sized>(
        &self,
        policy: &C,
        start: &StartState,
        dt: f64,
        rng: &mut R,
        sign: f64,
        mut record: Option<&mut PathRecord>,
    ) -> PathSummary {
        let m = &self.model;
        let d = &m.dynamics;
        let e = &m.economics;
        let span = e.horizon - start.time;
        let ratio = span / dt;
        let steps = if (ratio - ratio.round()).abs() < 1e-9 { ratio.round() } else { ratio.ceil() } as usize;
        let step = if steps > 0 { span / steps as f64 } else { 0.0 };
        let sqrt_step = step.sqrt();
        let step_discount = (-d.discount_rate * step).exp();

        let (mut x, mut y, mut i) = (start.price, start.reserve, start.regime);
        let mut t = start.time;
        let mut discount = 1.0;
        let mut profit = 0.0;
        let mut summary = PathSummary::default();
        let mut next_jump = next_event(rng, t, self.jump_rate);
        let mut next_switch = next_event(rng, t, m.generator.exit_rate(i));

        for n in 0..steps {
            let t_end = if n + 1 == steps { e.horizon } else { start.time + (n + 1) as f64 * step };
            let u = if y > 0.0 { policy.rate(t, x, y, i).clamp(0.0, e.max_rate) } else { 0.0 };
            let u = u.min(y / step);
            if let Some(r) = record.as_deref_mut() {
                r.times.push(t);
                r.price.push(x);
                r.reserve.push(y);
                r.regime.push(i);
                r.control.push(u);
                r.discounted_profit.push(profit);
            }
            profit += discount * m.profit_rate_unchecked(x, y, u) * step;

            let z: f64 = StandardNormal.sample(rng);
            let drift = d.kappa * (d.mu[i] - x) - m.jump_convention.displacement(x, d.gamma[i], self.compensator);
            x += drift * step + sign * d.sigma[i] * sqrt_step * z;
            while next_jump <= t_end {
                let size = self.jump_size(rng);
                x += m.jump_convention.displacement(x, d.gamma[i], size);
                summary.jumps += 1;
                next_jump = next_event(rng, next_jump, self.jump_rate);
            }
            if x < 0.0 {
                x = 0.0;
                summary.clamps += 1;
            }
            y = (y - u * step).max(0.0);
            while next_switch <= t_end {
                let j = next_state(rng, &m.generator, i);
                if let Some(r) = record.as_deref_mut() {
                    r.switches.push(RegimeSwitch {
                        time: next_switch,
                        from: i,
                        to: j,
                    });
                }
                i = j;
                summary.switches += 1;
                next_switch = next_event(rng, next_switch, m.generator.exit_rate(i));
            }
            discount *= step_discount;
            t = t_end;
        }
        let terminal = (-d.discount_rate * span).exp() * m.terminal_value_unchecked(x, y);
        if let Some(r) = record {
            r.times.push(t);
            r.price.push(x);
            r.reserve.push(y);
            r.regime.push(i);
            r.control.push(0.0);
            r.discounted_profit.push(profit);
            r.terminal_payoff = terminal;
            r.jumps = summary.jumps;
            r.clamps = summary.clamps;
        }
        summary.payoff = profit + terminal;
        summary
    }

    /// Full trajectory of path `stream` for `seed`.
    pub fn simulate_path<C: ControlLaw + ?Sized>(&self, policy: &C, start: StartState, dt: f64, seed: u64, stream: u64) -> Result<PathRecord> {
        self.check_start(&start, dt)?;
        let mut record = PathRecord::default();
        let mut rng = stream_rng(seed, stream);
        self.run(policy, &start, dt, &mut rng, 1.0, Some(&mut record));
        Ok(record)
    }

    /// Totals for paths `0..n`; with `antithetic`, paths `2k` and `2k+1` share
    /// stream `k` with mirrored Gaussian increments.
    pub fn simulate_summaries<C: ControlLaw + ?Sized>(
        &self,
        policy: &C,
        start: StartState,
        n: usize,
        dt: f64,
        seed: u64,
        antithetic: bool,
    ) -> Result<Vec<PathSummary>> {
        self.check_start(&start, dt)?;
        Ok((0..n)
            .into_par_iter()
            .map(|p| {
                let (stream, sign) = if antithetic {
                    ((p / 2) as u64, if p % 2 == 0 { 1.0 } else { -1.0 })
                } else {
                    (p as u64, 1.0)
                };
                let mut rng = stream_rng(seed, stream);
                self.run(policy, &start, dt, &mut rng, sign, None)
            })
            .collect())
    }

    pub fn estimate_value<C: ControlLaw + ?Sized>(
        &self,
        policy: &C,
        start: StartState,
        paths: usize,
        dt: f64,
        seed: u64,
        antithetic: bool,
    ) -> Result<EstimateReport> {
        if paths < 2 {
            return Err(Error::Domain(format!("need at least 2 paths, got {paths}")));
        }
        if antithetic && !paths.is_multiple_of(2) {
            return Err(Error::Domain(format!("antithetic estimation needs an even path count, got {paths}")));
        }
        let runs = self.simulate_summaries(policy, start, paths, dt, seed, antithetic)?;
        let samples: Vec<f64> = if antithetic {
            runs.chunks(2).map(|p| 0.5 * (p[0].payoff + p[1].payoff)).collect()
        } else {
            runs.iter().map(|r| r.payoff).collect()
        };
        let (mean, standard_error) = mean_and_standard_error(&samples);
        Ok(EstimateReport {
            mean,
            standard_error,
            paths,
            seed,
            antithetic,
            clamps: runs.iter().map(|r| r.clamps).sum(),
            jumps: runs.iter().map(|r| r.jumps).sum(),
        })
    }
}

/// Sum in a fixed binary-tree order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        xs.iter().sum()
    } else {
        let (a, b) = xs.split_at(xs.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

/// Sample mean and `stdev / sqrt(n)`.
pub fn mean_and_standard_error(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = xs.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Closed-form value of the uncontrolled, jump-free, single-regime problem
/// with linear price and no fixed cost:
/// `e^{-r(T-s)}(K-y)(μ + (x-μ)e^{-κ(T-s)} - m_T)`.
pub fn analytic_oracle(model: &MarketModel, s: f64, x: f64, y: f64) -> Result<f64> {
    let e = &model.economics;
    let mut why = Vec::new();
    if model.regimes() != 1 {
        why.push("single regime");
    }
    if model.measure.total_mass() != 0.0 {
        why.push("no jumps");
    }
    if e.max_rate != 0.0 {
        why.push("zero maximum extraction rate");
    }
    if model.price_map != PriceMap::Linear {
        why.push("linear price map");
    }
    if e.cost.fixed != 0.0 {
        why.push("zero fixed cost");
    }
    if !why.is_empty() {
        return Err(Error::Domain(format!("analytic oracle requires {}", why.join(", "))));
    }
    if !(0.0..=e.horizon).contains(&s) {
        return Err(Error::Domain(format!("time {s} outside [0, {}]", e.horizon)));
    }
    let d = &model.dynamics;
    let tau = e.horizon - s;
    let mean = d.mu[0] + (x - d.mu[0]) * (-d.kappa * tau).exp();
    Ok((-d.discount_rate * tau).exp() * (e.reserve_cap - y) * (mean - e.terminal_offset))
}
