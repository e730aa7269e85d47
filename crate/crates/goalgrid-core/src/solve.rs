//! End-to-end solve: last period, deadline coupling, two-portfolio period.

use crate::coupling::{couple_at_deadline, CoupledSlice};
use crate::grid::{build_grid, AxisGrid, TimeLine};
use crate::hjb::{
    solve_last_period, solve_two_goal_period, LastPeriodSolution, SolveError, SolverConfig,
    TwoGoalSolution,
};
use crate::model::{validate_ladder, validate_market, GoalLadder, MarketParams};

/// Discretization of the wealth and time axes. The wealth axis is shared by
/// every portfolio; each period has its own time step.
#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub x_max: f64,
    pub dx: f64,
    pub dt_two_goal: f64,
    pub dt_last: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            x_max: 10.0,
            dx: 0.2,
            dt_two_goal: 0.2,
            dt_last: 0.01,
        }
    }
}

/// Full solve artifact: both value surfaces, the coupled deadline slice,
/// stored policies, and iteration diagnostics.
#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub market: MarketParams,
    pub ladder: GoalLadder,
    pub solver: SolverConfig,
    pub axis: AxisGrid,
    pub times_two_goal: TimeLine,
    pub times_last: TimeLine,
    pub last: LastPeriodSolution,
    pub coupled: CoupledSlice,
    pub two_goal: TwoGoalSolution,
}

/// Solve the coupled system for a two-goal ladder: the single-portfolio
/// period on `[T₁, T]` first, then the deadline transfer, then the
/// two-portfolio variational inequality on `[0, T₁]`.
pub fn solve_full(
    market: &MarketParams,
    ladder: &GoalLadder,
    grid: &GridSpec,
    solver: &SolverConfig,
) -> Result<SolveOutput, SolveError> {
    validate_market(market)?;
    validate_ladder(ladder)?;
    if ladder.goals.len() != 2 {
        return Err(SolveError::UnsupportedLadder {
            reason: format!(
                "solver supports exactly one dated goal plus the fundamental goal, got {} goals",
                ladder.goals.len()
            ),
        });
    }
    let t1 = ladder.goals[0].deadline;
    let t = ladder.goals[1].deadline;
    let (axis, times_last) = build_grid(grid.x_max, grid.dx, t1, t, grid.dt_last)?;
    let (_, times_two_goal) = build_grid(grid.x_max, grid.dx, 0.0, t1, grid.dt_two_goal)?;
    let last = solve_last_period(market, ladder, &axis, &times_last, solver)?;
    let coupled = couple_at_deadline(ladder, &axis, last.surface.slice(0));
    let two_goal =
        solve_two_goal_period(market, ladder, &axis, &times_two_goal, &coupled.values, solver)?;
    Ok(SolveOutput {
        market: *market,
        ladder: ladder.clone(),
        solver: *solver,
        axis,
        times_two_goal,
        times_last,
        last,
        coupled,
        two_goal,
    })
}
