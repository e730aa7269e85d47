//! Numerical solver for goal-based portfolio selection with deadline-ordered
//! goals and costly transfers between mental accounts.
//!
//! Wealth is split across one portfolio per outstanding goal. Between
//! deadlines the value function satisfies a Hamilton–Jacobi–Bellman equation
//! with two-sided gradient constraints from proportional transfer costs; at a
//! goal deadline the shortfall penalty is charged and the remaining portfolios
//! are re-coupled through an unrestricted (but costly) transfer. This crate
//! discretizes that system on uniform grids, extracts the optimal investment
//! and transfer policies, and cross-checks them by Monte Carlo policy
//! execution and a brute-force dynamic-programming oracle.

pub mod coupling;
pub mod grid;
pub mod hjb;
pub mod linband;
pub mod model;
pub mod oracle;
pub mod regions;
pub mod simulate;
pub mod solve;

pub use grid::{build_grid, surface_to_csv, AxisGrid, GridError, Stencil, TimeLine, ValueSurface};
pub use model::{
    Allocation, GoalLadder, GoalSpec, MarketParams, ModelError, TransferDecision,
};
