//! Brute-force dynamic-programming oracle on coarse grids.
//!
//! Independent cross-check for the PDE solver: discrete-time backward
//! induction where each Brownian increment is replaced by a two-point
//! (±√dt) variable, expectations are exact four-outcome sums, transfers
//! are resolved by a min-plus sweep along anti-diagonals, and the deadline
//! uses the same coupling operator as the solver. No finite differences,
//! no linear algebra, no policy iteration — errors cannot be shared.

use crate::coupling::couple_at_deadline;
use crate::grid::{step_count, AxisGrid, GridError};
use crate::hjb::PolicyGrid;
use crate::model::{cholesky_vol, GoalLadder, MarketParams};
use rayon::prelude::*;
use thiserror::Error;

/// Hard cap on interpolation evaluations so a mistyped grid cannot wedge
/// the process; the check runs before any allocation.
pub const DP_BUDGET: u64 = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseModel {
    /// Each factor increment is ±√dt with equal probability.
    TwoPoint,
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle budget exceeded: {required} evaluations needed, limit {limit}")]
    BudgetExceeded { required: u64, limit: u64 },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Value slices produced by the oracle at the instants that matter for a
/// cross-check: initial time, both sides of the first deadline.
#[derive(Debug, Clone)]
pub struct DpSolution {
    pub axis: AxisGrid,
    /// Two-goal value at t = 0, row-major over (x1, x2).
    pub t0: Vec<f64>,
    /// Two-goal value at the deadline after transfers and settlement.
    pub t1_before: Vec<f64>,
    /// Single-goal continuation at the deadline, indexed by x2.
    pub t1_after: Vec<f64>,
}

struct CodeExposure {
    growth: Vec<f64>,
    shock1: Vec<f64>,
    shock2: Vec<f64>,
}

fn exposures(market: &MarketParams, codes: &[[f64; 2]], dt: f64) -> CodeExposure {
    let chol = cholesky_vol(market);
    let sq = dt.sqrt();
    let mut growth = Vec::with_capacity(codes.len());
    let mut shock1 = Vec::with_capacity(codes.len());
    let mut shock2 = Vec::with_capacity(codes.len());
    for w in codes {
        let mu = market.risk_free
            + (market.drift[0] - market.risk_free) * w[0]
            + (market.drift[1] - market.risk_free) * w[1];
        growth.push(1.0 + mu * dt);
        shock1.push((w[0] * chol[0][0] + w[1] * chol[1][0]) * sq);
        shock2.push(w[1] * chol[1][1] * sq);
    }
    CodeExposure { growth, shock1, shock2 }
}

fn interp1(axis: &AxisGrid, v: &[f64], x: f64) -> f64 {
    let u = ((x.clamp(axis.min, axis.max)) - axis.min) / axis.step;
    let i = (u.floor() as usize).min(axis.count - 2);
    let w = u - i as f64;
    v[i] * (1.0 - w) + v[i + 1] * w
}

fn interp2(axis: &AxisGrid, v: &[f64], x1: f64, x2: f64) -> f64 {
    let n = axis.count;
    let u1 = ((x1.clamp(axis.min, axis.max)) - axis.min) / axis.step;
    let u2 = ((x2.clamp(axis.min, axis.max)) - axis.min) / axis.step;
    let i = (u1.floor() as usize).min(n - 2);
    let j = (u2.floor() as usize).min(n - 2);
    let a = u1 - i as f64;
    let b = u2 - j as f64;
    v[i * n + j] * (1.0 - a) * (1.0 - b)
        + v[i * n + j + 1] * (1.0 - a) * b
        + v[(i + 1) * n + j] * a * (1.0 - b)
        + v[(i + 1) * n + j + 1] * a * b
}

/// Instantaneous-transfer closure: along each anti-diagonal x1 + x2 = const,
/// allow any number of grid transfers at cost λh per step toward the dated
/// goal and θh per step away. Two linear sweeps give the exact min-plus
/// fixed point because both edge costs are positive.
fn resolve_transfers(axis: &AxisGrid, lambda: f64, theta: f64, bev: &[f64]) -> Vec<f64> {
    let n = axis.count;
    let h = axis.step;
    let mut out = bev.to_vec();
    for d in 0..=(2 * (n - 1)) {
        let i_lo = d.saturating_sub(n - 1);
        let i_hi = d.min(n - 1);
        let mut run = f64::INFINITY;
        for i in (i_lo..=i_hi).rev() {
            let c = i * n + (d - i);
            run = bev[c].min(run + lambda * h);
            if run < out[c] {
                out[c] = run;
            }
        }
        let mut run = f64::INFINITY;
        for i in i_lo..=i_hi {
            let c = i * n + (d - i);
            run = bev[c].min(run + theta * h);
            if run < out[c] {
                out[c] = run;
            }
        }
    }
    out
}

/// Discrete-time value of the benchmark two-goal problem by exhaustive
/// backward induction. `dt1`/`dt2` are the decision epochs in the two-goal
/// and final periods; `alloc_step` spaces the allocation lattice.
pub fn dp_value(
    market: &MarketParams,
    ladder: &GoalLadder,
    axis: &AxisGrid,
    dt1: f64,
    dt2: f64,
    alloc_step: f64,
    noise: NoiseModel,
) -> Result<DpSolution, OracleError> {
    let NoiseModel::TwoPoint = noise;
    let goal1 = &ladder.goals[0];
    let goal2 = &ladder.goals[1];
    let steps1 = step_count(goal1.deadline, dt1, "oracle first-period span")? ;
    let steps2 = step_count(goal2.deadline - goal1.deadline, dt2, "oracle final-period span")?;
    let pgrid = PolicyGrid::new(alloc_step)?;
    let n = axis.count as u64;
    let len = pgrid.len() as u64;
    let required = n * n * len * len * 4 * steps1 as u64 + n * len * 4 * steps2 as u64;
    if required > DP_BUDGET {
        return Err(OracleError::BudgetExceeded { required, limit: DP_BUDGET });
    }

    let n = axis.count;
    let beta = market.discount;

    // Final period: one-dimensional induction from the terminal shortfall.
    let exp2 = exposures(market, pgrid.codes(), dt2);
    let disc2 = (-beta * dt2).exp();
    let mut v1: Vec<f64> = (0..n)
        .map(|i| goal2.weight * (goal2.target - axis.coord(i)).max(0.0))
        .collect();
    for _ in 0..steps2 {
        let prev = v1;
        v1 = (0..n)
            .map(|i| {
                let x = axis.coord(i);
                let mut best = f64::INFINITY;
                for k in 0..pgrid.len() {
                    let mut acc = 0.0;
                    for (s1, s2) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                        let g = exp2.growth[k] + s1 * exp2.shock1[k] + s2 * exp2.shock2[k];
                        acc += interp1(axis, &prev, x * g);
                    }
                    let val = disc2 * 0.25 * acc;
                    if val < best {
                        best = val;
                    }
                }
                best
            })
            .collect();
    }
    let t1_after = v1;

    // Deadline: same coupling operator the solver uses.
    let coupled = couple_at_deadline(ladder, axis, &t1_after);
    let t1_before = coupled.values.clone();

    // Two-goal period: joint induction with shared factor shocks, then an
    // instantaneous-transfer closure at every decision epoch.
    let exp1 = exposures(market, pgrid.codes(), dt1);
    let disc1 = (-beta * dt1).exp();
    let mut v2 = t1_before.clone();
    for _ in 0..steps1 {
        let prev = v2;
        let bev: Vec<f64> = (0..n * n)
            .into_par_iter()
            .map(|c| {
                let (i, j) = (c / n, c % n);
                let x1 = axis.coord(i);
                let x2 = axis.coord(j);
                let mut best = f64::INFINITY;
                for k1 in 0..pgrid.len() {
                    let g1b = exp1.growth[k1];
                    let e11 = exp1.shock1[k1];
                    let e21 = exp1.shock2[k1];
                    for k2 in 0..pgrid.len() {
                        let g2b = exp1.growth[k2];
                        let e12 = exp1.shock1[k2];
                        let e22 = exp1.shock2[k2];
                        let mut acc = 0.0;
                        for (s1, s2) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                            let y1 = x1 * (g1b + s1 * e11 + s2 * e21);
                            let y2 = x2 * (g2b + s1 * e12 + s2 * e22);
                            acc += interp2(axis, &prev, y1, y2);
                        }
                        let val = disc1 * 0.25 * acc;
                        if val < best {
                            best = val;
                        }
                    }
                }
                best
            })
            .collect();
        v2 = resolve_transfers(axis, goal1.penalty_in, goal1.penalty_out, &bev);
    }

    Ok(DpSolution {
        axis: *axis,
        t0: v2,
        t1_before,
        t1_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::benchmark_ladder;

    fn coarse_axis() -> AxisGrid {
        AxisGrid {
            min: 0.0,
            max: 10.0,
            step: 0.5,
            count: 21,
        }
    }

    fn solve_coarse() -> DpSolution {
        dp_value(
            &MarketParams::default(),
            &benchmark_ladder(),
            &coarse_axis(),
            0.25,
            0.25,
            0.25,
            NoiseModel::TwoPoint,
        )
        .unwrap()
    }

    #[test]
    fn zero_wealth_equals_sum_of_weighted_goals() {
        let sol = solve_coarse();
        assert!((sol.t0[0] - 9.0).abs() < 1e-12, "got {}", sol.t0[0]);
    }

    #[test]
    fn saturated_corner_is_free() {
        let sol = solve_coarse();
        let n = sol.axis.count;
        assert_eq!(sol.t0[n * n - 1], 0.0);
        assert_eq!(sol.t1_after[n - 1], 0.0);
    }

    #[test]
    fn values_are_monotone_and_bounded() {
        let sol = solve_coarse();
        let n = sol.axis.count;
        for slice in [&sol.t0, &sol.t1_before] {
            for i in 0..n {
                for j in 0..n {
                    let v = slice[i * n + j];
                    assert!((-1e-9..=9.0 + 1e-9).contains(&v));
                    if i + 1 < n {
                        assert!(slice[(i + 1) * n + j] <= v + 1e-9);
                    }
                    if j + 1 < n {
                        assert!(slice[i * n + j + 1] <= v + 1e-9);
                    }
                }
            }
        }
        for i in 0..n - 1 {
            assert!(sol.t1_after[i + 1] <= sol.t1_after[i] + 1e-9);
        }
    }

    #[test]
    fn transfer_closure_respects_both_rates() {
        let sol = solve_coarse();
        let n = sol.axis.count;
        let h = sol.axis.step;
        let ladder = benchmark_ladder();
        let (lam, theta) = (ladder.goals[0].penalty_in, ladder.goals[0].penalty_out);
        for i in 0..n {
            for j in 0..n {
                let v = sol.t0[i * n + j];
                if i + 1 < n && j > 0 {
                    assert!(v <= lam * h + sol.t0[(i + 1) * n + j - 1] + 1e-9);
                }
                if i > 0 && j + 1 < n {
                    assert!(v <= theta * h + sol.t0[(i - 1) * n + j + 1] + 1e-9);
                }
            }
        }
    }

    #[test]
    fn budget_guard_rejects_fine_grids_before_allocating() {
        let fine = AxisGrid {
            min: 0.0,
            max: 10.0,
            step: 0.1,
            count: 101,
        };
        let err = dp_value(
            &MarketParams::default(),
            &benchmark_ladder(),
            &fine,
            0.01,
            0.01,
            0.01,
            NoiseModel::TwoPoint,
        )
        .unwrap_err();
        match err {
            OracleError::BudgetExceeded { required, limit } => {
                assert!(required > limit);
                assert_eq!(limit, DP_BUDGET);
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn halving_the_epoch_moves_values_only_slightly() {
        let coarse = solve_coarse();
        let fine = dp_value(
            &MarketParams::default(),
            &benchmark_ladder(),
            &coarse_axis(),
            0.125,
            0.125,
            0.25,
            NoiseModel::TwoPoint,
        )
        .unwrap();
        let max_diff = coarse
            .t0
            .iter()
            .zip(&fine.t0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        assert!(max_diff < 0.1, "epoch refinement moved values by {max_diff}");
    }
}
