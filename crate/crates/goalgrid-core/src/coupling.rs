//! Deadline coupling between solve periods.
//!
//! At the first deadline `T₁` the dated goal is settled: the agent may move
//! any amount between the goal portfolio and the fundamental portfolio at
//! proportional cost (`λ` into the goal, `θ` out of it), the shortfall
//! penalty `w·(G − x₁′)⁺` is charged on the post-transfer goal wealth, and
//! the remaining wealth continues with the last-period value. The coupled
//! slice is the exact minimum over all grid-quantized transfer plans:
//!
//! ```text
//! V₁(T₁, x₁, x₂) = min over l, m ≥ 0, l·m = 0 of
//!     λl + θm + w·(G − (x₁ + l − m))⁺ + V₂(T₁, x₂ − l + m),
//! ```
//!
//! with `l ≤ min(x₂, x_max − x₁)` and `m ≤ min(x₁, x_max − x₂)` so the post
//! state stays on the grid. Ties resolve toward the smallest transfer.

use crate::grid::AxisGrid;
use crate::model::GoalLadder;

/// The coupled value slice at a deadline together with the minimizing
/// transfer plan per cell, in grid steps.
#[derive(Debug, Clone)]
pub struct CoupledSlice {
    pub axis: AxisGrid,
    /// `values[i * n + j] = V₁(T₁, x₁ᵢ, x₂ⱼ)`.
    pub values: Vec<f64>,
    /// Steps moved into the goal portfolio (`l / h`).
    pub transfer_in: Vec<u32>,
    /// Steps moved out of the goal portfolio (`m / h`).
    pub transfer_out: Vec<u32>,
}

impl CoupledSlice {
    pub fn cell(&self, i: usize, j: usize) -> usize {
        i * self.axis.count + j
    }

    /// Post-transfer cell index of the plan at `(i, j)`.
    pub fn post_cell(&self, i: usize, j: usize) -> (usize, usize) {
        let c = self.cell(i, j);
        let l = self.transfer_in[c] as usize;
        let m = self.transfer_out[c] as usize;
        (i + l - m, j + m - l)
    }
}

/// Exhaustive quantized minimization of the deadline transfer problem for
/// the first goal of `ladder`. `fundamental_values` is the last-period value
/// `V₂(T₁, ·)` on `axis`. Transfers are enumerated by increasing magnitude
/// (in-transfer first), with strict improvement, so ties keep the smallest
/// plan.
pub fn couple_at_deadline(
    ladder: &GoalLadder,
    axis: &AxisGrid,
    fundamental_values: &[f64],
) -> CoupledSlice {
    let goal = ladder.goals[0];
    let n = axis.count;
    assert_eq!(fundamental_values.len(), n);
    let h = axis.step;
    let shortfall = |i: usize| goal.weight * (goal.target - axis.coord(i)).max(0.0);
    let mut values = vec![0.0; n * n];
    let mut transfer_in = vec![0u32; n * n];
    let mut transfer_out = vec![0u32; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut best = shortfall(i) + fundamental_values[j];
            let (mut bl, mut bm) = (0u32, 0u32);
            for s in 1..n {
                if s <= j && i + s < n {
                    let cand =
                        goal.penalty_in * (s as f64 * h) + shortfall(i + s) + fundamental_values[j - s];
                    if cand < best {
                        best = cand;
                        bl = s as u32;
                        bm = 0;
                    }
                }
                if s <= i && j + s < n {
                    let cand = goal.penalty_out * (s as f64 * h)
                        + shortfall(i - s)
                        + fundamental_values[j + s];
                    if cand < best {
                        best = cand;
                        bl = 0;
                        bm = s as u32;
                    }
                }
            }
            let c = i * n + j;
            values[c] = best;
            transfer_in[c] = bl;
            transfer_out[c] = bm;
        }
    }
    CoupledSlice {
        axis: *axis,
        values,
        transfer_in,
        transfer_out,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingCheck {
    /// Coupled value exceeds the no-transfer cost.
    Dominance,
    /// One-step in-transfer constraint `V[c] ≤ λh + V[c₊]` violated.
    StepIn,
    /// One-step out-transfer constraint `V[c] ≤ θh + V[c₋]` violated.
    StepOut,
    /// Active in-transfer not binding along the ray.
    BindingIn,
    /// Active out-transfer not binding along the ray.
    BindingOut,
    /// Post-transfer cell wants a further transfer.
    Idempotent,
}

#[derive(Debug, Clone)]
pub struct CouplingViolation {
    pub cell: usize,
    pub check: CouplingCheck,
    pub amount: f64,
}

/// Verify the discrete variational structure of a coupled slice: dominance
/// against the no-transfer cost, both one-step transfer constraints, exact
/// binding along active transfer rays, and idempotence of the plans.
pub fn verify_coupling_vi(
    slice: &CoupledSlice,
    ladder: &GoalLadder,
    fundamental_values: &[f64],
    tol: f64,
) -> Vec<CouplingViolation> {
    let goal = ladder.goals[0];
    let n = slice.axis.count;
    let h = slice.axis.step;
    let shortfall = |i: usize| goal.weight * (goal.target - slice.axis.coord(i)).max(0.0);
    let mut out = Vec::new();
    let mut push = |cell: usize, check: CouplingCheck, amount: f64| {
        if amount > tol {
            out.push(CouplingViolation {
                cell,
                check,
                amount,
            });
        }
    };
    for i in 0..n {
        for j in 0..n {
            let c = i * n + j;
            let v = slice.values[c];
            push(c, CouplingCheck::Dominance, v - (shortfall(i) + fundamental_values[j]));
            if i + 1 < n && j >= 1 {
                let step = goal.penalty_in * h + slice.values[(i + 1) * n + (j - 1)];
                push(c, CouplingCheck::StepIn, v - step);
                if slice.transfer_in[c] > 0 {
                    push(c, CouplingCheck::BindingIn, (v - step).abs());
                }
            }
            if i >= 1 && j + 1 < n {
                let step = goal.penalty_out * h + slice.values[(i - 1) * n + (j + 1)];
                push(c, CouplingCheck::StepOut, v - step);
                if slice.transfer_out[c] > 0 {
                    push(c, CouplingCheck::BindingOut, (v - step).abs());
                }
            }
            if slice.transfer_in[c] > 0 || slice.transfer_out[c] > 0 {
                let (pi, pj) = slice.post_cell(i, j);
                let pc = pi * n + pj;
                let residual_plan =
                    slice.transfer_in[pc].max(slice.transfer_out[pc]) as f64;
                push(c, CouplingCheck::Idempotent, residual_plan);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{benchmark_ladder, GoalLadder, GoalSpec};
    use proptest::prelude::*;

    fn unit_axis(n: usize) -> AxisGrid {
        AxisGrid {
            min: 0.0,
            max: (n - 1) as f64,
            step: 1.0,
            count: n,
        }
    }

    fn test_ladder() -> GoalLadder {
        GoalLadder {
            goals: vec![
                GoalSpec {
                    target: 5.0,
                    deadline: 1.0,
                    weight: 1.0,
                    penalty_in: 0.3,
                    penalty_out: 0.1,
                },
                GoalSpec {
                    target: 4.0,
                    deadline: 2.0,
                    weight: 1.0,
                    penalty_in: 0.0,
                    penalty_out: 0.0,
                },
            ],
        }
    }

    #[test]
    fn flat_fundamental_fills_goal_from_surplus() {
        let ladder = test_ladder();
        let axis = unit_axis(7);
        let vf = vec![0.0; 7];
        let slice = couple_at_deadline(&ladder, &axis, &vf);
        // From (0, 6): moving 5 into the goal costs 1.5 and clears the
        // 5.0 shortfall; moving more only adds cost.
        let c = slice.cell(0, 6);
        assert_eq!(slice.transfer_in[c], 5);
        assert_eq!(slice.transfer_out[c], 0);
        assert!((slice.values[c] - 1.5).abs() < 1e-12);
        // From (6, 0): the goal is met and the fundamental value is flat,
        // so any transfer is pure cost.
        let c = slice.cell(6, 0);
        assert_eq!((slice.transfer_in[c], slice.transfer_out[c]), (0, 0));
        assert_eq!(slice.values[c], 0.0);
    }

    #[test]
    fn unit_slope_fundamental_never_transfers_below_its_goal() {
        // With V₂ slope exactly −1 below the goal, a transfer out moves a
        // unit of shortfall between accounts and only pays the cost.
        let ladder = test_ladder();
        let axis = unit_axis(7);
        let vf: Vec<f64> = (0..7).map(|j| (4.0 - j as f64).max(0.0)).collect();
        let slice = couple_at_deadline(&ladder, &axis, &vf);
        let c = slice.cell(1, 1);
        assert_eq!((slice.transfer_in[c], slice.transfer_out[c]), (0, 0));
        assert!((slice.values[c] - 7.0).abs() < 1e-12);
        // Above the fundamental goal the slope is zero and filling the
        // dated goal gains w − λ per unit.
        let c = slice.cell(0, 6);
        assert_eq!(slice.transfer_in[c], 2);
        assert!((slice.values[c] - (0.6 + 3.0 + 0.0)).abs() < 1e-12);
    }

    #[test]
    fn benchmark_axis_coupling_is_monotone_for_monotone_input() {
        let ladder = benchmark_ladder();
        let axis = AxisGrid {
            min: 0.0,
            max: 10.0,
            step: 0.5,
            count: 21,
        };
        let vf: Vec<f64> = (0..21)
            .map(|j| (4.0 - axis.coord(j)).max(0.0) * 0.9)
            .collect();
        let slice = couple_at_deadline(&ladder, &axis, &vf);
        let n = axis.count;
        for i in 0..n {
            for j in 0..n {
                if i + 1 < n {
                    assert!(
                        slice.values[(i + 1) * n + j] <= slice.values[i * n + j] + 1e-12,
                        "monotone in x1 at ({i},{j})"
                    );
                }
                if j + 1 < n {
                    assert!(
                        slice.values[i * n + j + 1] <= slice.values[i * n + j] + 1e-12,
                        "monotone in x2 at ({i},{j})"
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn coupling_satisfies_variational_structure(
            raw in proptest::collection::vec(0.0f64..5.0, 9)
        ) {
            // Any nonincreasing fundamental value: sort descending.
            let mut vf = raw;
            vf.sort_by(|a, b| b.total_cmp(a));
            let ladder = test_ladder();
            let axis = unit_axis(9);
            let slice = couple_at_deadline(&ladder, &axis, &vf);
            let violations = verify_coupling_vi(&slice, &ladder, &vf, 1e-10);
            prop_assert!(violations.is_empty(), "violations: {violations:?}");
        }

        #[test]
        fn coupling_never_exceeds_no_transfer_cost(
            raw in proptest::collection::vec(0.0f64..5.0, 9)
        ) {
            let ladder = test_ladder();
            let axis = unit_axis(9);
            let slice = couple_at_deadline(&ladder, &axis, &raw);
            for i in 0..9 {
                for j in 0..9 {
                    let base = (5.0 - axis.coord(i)).max(0.0) + raw[j];
                    prop_assert!(slice.values[slice.cell(i, j)] <= base + 1e-12);
                }
            }
        }
    }
}
