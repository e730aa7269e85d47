//! Monte Carlo execution of a solved policy.
//!
//! Paths follow Euler–Maruyama dynamics under the stored allocation codes;
//! transfer regions act by projecting the state along its transfer ray to
//! the nearest continuation cell (accruing proportional costs), and the
//! deadline applies the coupled transfer plan of the nearest cell. Results
//! are bitwise reproducible for a given seed regardless of thread count:
//! every path uses its own counter-based RNG stream and the reduction is a
//! fixed-shape pairwise sum.

use crate::model::{cholesky_vol, supersolution_bound};
use crate::regions::RegionLabel;
use crate::solve::SolveOutput;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    pub seed: u64,
    pub n_paths: usize,
    /// Simulation substep; must divide both periods' grid time steps.
    /// `None` uses a tenth of each period's grid step.
    pub dt: Option<f64>,
    pub initial: [f64; 2],
}

#[derive(Debug, Clone, Error)]
pub enum SimError {
    #[error("simulation config mismatch: {reason}")]
    ConfigMismatch { reason: String },
}

/// Discounted cost components, averaged over paths. Their sum equals the
/// mean objective up to floating-point reduction error.
#[derive(Debug, Clone)]
pub struct SimBreakdown {
    /// Mean discounted weighted shortfall per goal, deadline order.
    pub shortfalls: Vec<f64>,
    pub transfer_in_cost: f64,
    pub transfer_out_cost: f64,
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub mean_objective: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub breakdown: SimBreakdown,
}

#[derive(Clone, Copy, Default)]
struct PathOutcome {
    shortfall1: f64,
    shortfall2: f64,
    cost_in: f64,
    cost_out: f64,
}

impl PathOutcome {
    fn objective(&self) -> f64 {
        self.shortfall1 + self.shortfall2 + self.cost_in + self.cost_out
    }
}

struct SimPlan {
    dt1: f64,
    steps1: usize,
    dt2: f64,
    steps2: usize,
}

fn plan(out: &SolveOutput, cfg: &SimConfig) -> Result<SimPlan, SimError> {
    if cfg.n_paths == 0 {
        return Err(SimError::ConfigMismatch {
            reason: "n_paths must be positive".into(),
        });
    }
    if !(cfg.initial[0].is_finite() && cfg.initial[1].is_finite())
        || cfg.initial[0] < 0.0
        || cfg.initial[1] < 0.0
    {
        return Err(SimError::ConfigMismatch {
            reason: format!("initial wealth {:?} must be finite and nonnegative", cfg.initial),
        });
    }
    let sub = |grid_dt: f64| -> Result<(f64, usize), SimError> {
        match cfg.dt {
            None => Ok((grid_dt / 10.0, 10)),
            Some(d) => {
                if d <= 0.0 {
                    return Err(SimError::ConfigMismatch {
                        reason: "dt must be positive".into(),
                    });
                }
                let per = grid_dt / d;
                if (per - per.round()).abs() > 1e-9 * per.max(1.0) || per < 1.0 - 1e-9 {
                    return Err(SimError::ConfigMismatch {
                        reason: format!(
                            "dt = {d} must evenly divide the grid time step {grid_dt}"
                        ),
                    });
                }
                Ok((d, per.round() as usize))
            }
        }
    };
    let (dt1, per1) = sub(out.times_two_goal.step)?;
    let (dt2, per2) = sub(out.times_last.step)?;
    Ok(SimPlan {
        dt1,
        steps1: per1 * (out.times_two_goal.count - 1),
        dt2,
        steps2: per2 * (out.times_last.count - 1),
    })
}

/// Per-code portfolio drift and volatility exposure to the two Brownian
/// factors (Cholesky coordinates, shared across portfolios).
struct CodeDynamics {
    drift: Vec<f64>,
    vol1: Vec<f64>,
    vol2: Vec<f64>,
}

impl CodeDynamics {
    fn new(out: &SolveOutput, codes: &[[f64; 2]]) -> Self {
        let m = &out.market;
        let chol = cholesky_vol(m);
        let mut drift = Vec::with_capacity(codes.len());
        let mut vol1 = Vec::with_capacity(codes.len());
        let mut vol2 = Vec::with_capacity(codes.len());
        for w in codes {
            drift.push(m.risk_free + (m.drift[0] - m.risk_free) * w[0] + (m.drift[1] - m.risk_free) * w[1]);
            vol1.push(w[0] * chol[0][0] + w[1] * chol[1][0]);
            vol2.push(w[1] * chol[1][1]);
        }
        CodeDynamics { drift, vol1, vol2 }
    }
}

struct TraceSink<'a> {
    writer: &'a mut dyn Write,
    path: usize,
}

impl TraceSink<'_> {
    fn event(&mut self, t: f64, x1: f64, x2: f64, event: &str) {
        let _ = writeln!(
            self.writer,
            "{},{:.6},{:.6},{:.6},{}",
            self.path, t, x1, x2, event
        );
    }
}

fn simulate_path(
    out: &SolveOutput,
    plan: &SimPlan,
    dyn2: &CodeDynamics,
    dyn_last: &CodeDynamics,
    cfg: &SimConfig,
    path_index: usize,
    mut trace: Option<&mut TraceSink>,
) -> PathOutcome {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng.set_stream(path_index as u64);
    let normal = StandardNormal;
    let axis = &out.axis;
    let n = axis.count;
    let h = axis.step;
    let beta = out.market.discount;
    let goal1 = out.ladder.goals[0];
    let goal2 = out.ladder.goals[1];
    let t1 = goal1.deadline;
    let mut outcome = PathOutcome::default();
    let (mut x1, mut x2) = (cfg.initial[0], cfg.initial[1]);
    if let Some(tr) = trace.as_deref_mut() {
        tr.event(0.0, x1, x2, "start");
    }

    let grid_dt1 = out.times_two_goal.step;
    for step in 0..plan.steps1 {
        let t = step as f64 * plan.dt1;
        let k = (((t + 1e-12) / grid_dt1) as usize).min(out.times_two_goal.count - 2);
        let labels = out.two_goal.labels_at(k);
        // Project along the transfer ray to the nearest continuation cell.
        let discount = (-beta * t).exp();
        loop {
            let (i, j) = (axis.index_of(x1), axis.index_of(x2));
            match labels[i * n + j] {
                RegionLabel::TransferIntoGoal if j > 0 && i + 1 < n && x2 > 0.0 => {
                    let amount = h.min(x2);
                    x1 += amount;
                    x2 -= amount;
                    outcome.cost_in += discount * goal1.penalty_in * amount;
                    if let Some(tr) = trace.as_deref_mut() {
                        tr.event(t, x1, x2, "transfer_in");
                    }
                    if amount < h {
                        break;
                    }
                }
                RegionLabel::TransferOutOfGoal if i > 0 && j + 1 < n && x1 > 0.0 => {
                    let amount = h.min(x1);
                    x1 -= amount;
                    x2 += amount;
                    outcome.cost_out += discount * goal1.penalty_out * amount;
                    if let Some(tr) = trace.as_deref_mut() {
                        tr.event(t, x1, x2, "transfer_out");
                    }
                    if amount < h {
                        break;
                    }
                }
                _ => break,
            }
        }
        let (i, j) = (axis.index_of(x1), axis.index_of(x2));
        let codes = out.two_goal.codes_at(k)[i * n + j];
        let z1: f64 = normal.sample(&mut rng);
        let z2: f64 = normal.sample(&mut rng);
        let sq = plan.dt1.sqrt();
        let (c1, c2) = (codes[0] as usize, codes[1] as usize);
        let g1 = 1.0 + dyn2.drift[c1] * plan.dt1 + (dyn2.vol1[c1] * z1 + dyn2.vol2[c1] * z2) * sq;
        let g2 = 1.0 + dyn2.drift[c2] * plan.dt1 + (dyn2.vol1[c2] * z1 + dyn2.vol2[c2] * z2) * sq;
        x1 = (x1 * g1).max(0.0);
        x2 = (x2 * g2).max(0.0);
    }

    // Deadline: apply the coupled plan of the nearest cell, clamped to the
    // wealth actually available, then settle the dated goal.
    let discount1 = (-beta * t1).exp();
    let (i, j) = (axis.index_of(x1), axis.index_of(x2));
    let c = i * n + j;
    let l = (out.coupled.transfer_in[c] as f64 * h).min(x2);
    let m = (out.coupled.transfer_out[c] as f64 * h).min(x1);
    x1 += l - m;
    x2 += m - l;
    outcome.cost_in += discount1 * goal1.penalty_in * l;
    outcome.cost_out += discount1 * goal1.penalty_out * m;
    outcome.shortfall1 = discount1 * goal1.weight * (goal1.target - x1).max(0.0);
    if let Some(tr) = trace.as_deref_mut() {
        tr.event(t1, x1, x2, "deadline");
    }

    let grid_dt2 = out.times_last.step;
    for step in 0..plan.steps2 {
        let t_local = step as f64 * plan.dt2;
        let k = (((t_local + 1e-12) / grid_dt2) as usize).min(out.times_last.count - 2);
        let i = axis.index_of(x2);
        let code = out.last.codes_at(k)[i] as usize;
        let z1: f64 = normal.sample(&mut rng);
        let z2: f64 = normal.sample(&mut rng);
        let sq = plan.dt2.sqrt();
        let g = 1.0
            + dyn_last.drift[code] * plan.dt2
            + (dyn_last.vol1[code] * z1 + dyn_last.vol2[code] * z2) * sq;
        x2 = (x2 * g).max(0.0);
    }
    let t_end = goal2.deadline;
    outcome.shortfall2 = (-beta * t_end).exp() * goal2.weight * (goal2.target - x2).max(0.0);
    if let Some(tr) = trace.as_deref_mut() {
        tr.event(t_end, x1, x2, "end");
    }
    outcome
}

/// Fixed-shape pairwise sum: the reduction tree depends only on the length,
/// so results do not depend on evaluation order or thread count.
fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

fn reduce(outcomes: &[PathOutcome]) -> SimResult {
    let n = outcomes.len();
    let objectives: Vec<f64> = outcomes.iter().map(|o| o.objective()).collect();
    let mean = pairwise_sum(&objectives) / n as f64;
    let sq: Vec<f64> = objectives.iter().map(|o| (o - mean) * (o - mean)).collect();
    let std_error = if n > 1 {
        (pairwise_sum(&sq) / ((n - 1) as f64) / n as f64).sqrt()
    } else {
        0.0
    };
    let mean_of = |f: fn(&PathOutcome) -> f64| -> f64 {
        let v: Vec<f64> = outcomes.iter().map(f).collect();
        pairwise_sum(&v) / n as f64
    };
    SimResult {
        mean_objective: mean,
        std_error,
        n_paths: n,
        breakdown: SimBreakdown {
            shortfalls: vec![mean_of(|o| o.shortfall1), mean_of(|o| o.shortfall2)],
            transfer_in_cost: mean_of(|o| o.cost_in),
            transfer_out_cost: mean_of(|o| o.cost_out),
        },
    }
}

/// Execute the stored policy over Monte Carlo paths.
pub fn run_policy(out: &SolveOutput, cfg: &SimConfig) -> Result<SimResult, SimError> {
    let plan = plan(out, cfg)?;
    let dyn2 = CodeDynamics::new(out, out.two_goal.policy_grid.codes());
    let dyn_last = CodeDynamics::new(out, out.last.policy_grid.codes());
    let outcomes: Vec<PathOutcome> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| simulate_path(out, &plan, &dyn2, &dyn_last, cfg, p, None))
        .collect();
    Ok(reduce(&outcomes))
}

/// As `run_policy`, but single-threaded and writing a `path,t,x1,x2,event`
/// CSV trace of starts, transfers, the deadline settlement, and path ends.
pub fn run_policy_traced(
    out: &SolveOutput,
    cfg: &SimConfig,
    writer: &mut dyn Write,
) -> Result<SimResult, SimError> {
    let plan = plan(out, cfg)?;
    let dyn2 = CodeDynamics::new(out, out.two_goal.policy_grid.codes());
    let dyn_last = CodeDynamics::new(out, out.last.policy_grid.codes());
    let _ = writeln!(writer, "path,t,x1,x2,event");
    let outcomes: Vec<PathOutcome> = (0..cfg.n_paths)
        .map(|p| {
            let mut sink = TraceSink { writer, path: p };
            simulate_path(out, &plan, &dyn2, &dyn_last, cfg, p, Some(&mut sink))
        })
        .collect();
    Ok(reduce(&outcomes))
}

/// Worst-case objective from zero wealth; useful as an exactness probe.
pub fn zero_wealth_objective(out: &SolveOutput) -> f64 {
    supersolution_bound(&out.ladder, &out.market, 0, 0.0)
}
