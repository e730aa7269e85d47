//! Implicit finite-difference solvers for the two HJB problems.
//!
//! Between deadlines the value function of the two-portfolio period satisfies
//! the variational inequality
//!
//! ```text
//! max{ βV − ∂ₜV − H(x, DV, D²V),  ∂₂V − ∂₁V − λ,  ∂₁V − ∂₂V − θ } = 0,
//! ```
//!
//! where the Hamiltonian minimizes drift and diffusion terms over a quantized
//! allocation simplex per portfolio. After the first deadline a single
//! portfolio remains and the classical HJB equation applies. Both are solved
//! by backward Euler steps with Howard policy iteration: each cell is assigned
//! either its PDE row (with the minimizing allocation frozen) or a binding
//! transfer row, the resulting banded linear system is solved exactly, and the
//! assignment is refreshed until the value slice stops changing.
//!
//! Diffusion is discretized monotonically: upwinded first differences,
//! central second differences, and a sign-adapted 7-point mixed quotient
//! whose coefficient is clamped to `min(a₁₁, a₂₂)`. Every PDE row is then
//! strictly diagonally dominant with nonpositive off-diagonal entries, which
//! keeps the implicit steps order-preserving for either correlation sign.
//!
//! Transfer rows impose the zero-slack limit of the penalty formulation:
//! `V[c] − V[c₊] = λ·h` along the transfer ray. `penalized_residual` exposes
//! the finite-penalty residual for diagnostics and tests.

use crate::grid::{step_count, AxisGrid, GridError, Stencil, TimeLine, ValueSurface};
use crate::linband::BandMatrix;
use crate::model::{asset_covariance, supersolution_bound, GoalLadder, MarketParams, ModelError};
use crate::regions::RegionLabel;
use rayon::prelude::*;
use thiserror::Error;

/// Tunables of the policy-iteration scheme. Defaults reproduce the benchmark
/// discretization: fine allocation quantization in the single-portfolio
/// period, coarse 0.25 steps (15 simplex codes) in the two-portfolio period.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    /// Penalty slope used by `penalized_residual` diagnostics.
    pub penalty_scale: f64,
    /// Sup-norm change of a slice below which policy iteration stops.
    pub policy_tol: f64,
    pub max_policy_iters: usize,
    /// Allocation grid spacing for the last (single-portfolio) period.
    pub allocation_step_fine: f64,
    /// Allocation grid spacing for the two-portfolio period.
    pub allocation_step_coarse: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            penalty_scale: 1.0e6,
            policy_tol: 1.0e-7,
            max_policy_iters: 200,
            allocation_step_fine: 0.01,
            allocation_step_coarse: 0.25,
        }
    }
}

#[derive(Debug, Clone, Error)]
pub enum SolveError {
    #[error("policy iteration did not converge at t = {time}: deltas {history:?}")]
    PolicyIterationDiverged { time: f64, history: Vec<f64> },
    #[error("linear system singular at t = {time}")]
    Singular { time: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("unsupported ladder: {reason}")]
    UnsupportedLadder { reason: String },
}

/// Quantized allocation simplex for two assets: all weight vectors
/// `(k₁·s, k₂·s)` with nonnegative entries summing to at most one, enumerated
/// with the first weight outermost. With `s = 0.25` this yields the 15
/// strategy codes 0 ↦ (0,0), 1 ↦ (0,0.25), …, 5 ↦ (0.25,0), …, 14 ↦ (1,0).
#[derive(Debug, Clone)]
pub struct PolicyGrid {
    pub step: f64,
    codes: Vec<[f64; 2]>,
}

impl PolicyGrid {
    pub fn new(step: f64) -> Result<Self, GridError> {
        let n = step_count(1.0, step, "allocation simplex")?;
        let mut codes = Vec::new();
        for k1 in 0..=n {
            for k2 in 0..=(n - k1) {
                codes.push([k1 as f64 * step, k2 as f64 * step]);
            }
        }
        Ok(PolicyGrid { step, codes })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    #[inline]
    pub fn weights(&self, code: usize) -> [f64; 2] {
        self.codes[code]
    }

    pub fn codes(&self) -> &[[f64; 2]] {
        &self.codes
    }
}

/// Outcome of a pointwise Hamiltonian minimization: attained value and the
/// minimizing allocation code per active portfolio.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianEval {
    pub value: f64,
    pub codes: Vec<usize>,
}

/// Instantaneous covariance block of the portfolio value processes:
/// entry `(a,b)` is `(αₐxₐ)ᵀ σσᵀ (α_b x_b)`.
pub fn covariance_block(
    weights: &[[f64; 2]; 2],
    wealth: [f64; 2],
    market: &MarketParams,
) -> [[f64; 2]; 2] {
    let cov = asset_covariance(market);
    let mut out = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            let wa = weights[a];
            let wb = weights[b];
            let mut q = 0.0;
            for p in 0..2 {
                for r in 0..2 {
                    q += wa[p] * cov[p][r] * wb[r];
                }
            }
            out[a][b] = q * wealth[a] * wealth[b];
        }
    }
    out
}

/// Precomputed per-code drift and covariance quadratic forms.
struct HamTable {
    rate: f64,
    excess: Vec<f64>,
    /// `quad[a * len + b] = αₐᵀ σσᵀ α_b`.
    quad: Vec<f64>,
    len: usize,
}

impl HamTable {
    fn new(market: &MarketParams, pgrid: &PolicyGrid) -> Self {
        let cov = asset_covariance(market);
        let len = pgrid.len();
        let mu = market.drift;
        let r = market.risk_free;
        let excess: Vec<f64> = pgrid
            .codes()
            .iter()
            .map(|w| (mu[0] - r) * w[0] + (mu[1] - r) * w[1])
            .collect();
        let mut quad = vec![0.0; len * len];
        for a in 0..len {
            let wa = pgrid.weights(a);
            for b in a..len {
                let wb = pgrid.weights(b);
                let mut q = 0.0;
                for p in 0..2 {
                    for s in 0..2 {
                        q += wa[p] * cov[p][s] * wb[s];
                    }
                }
                quad[a * len + b] = q;
                quad[b * len + a] = q;
            }
        }
        HamTable {
            rate: r,
            excess,
            quad,
            len,
        }
    }

    /// Single-portfolio Hamiltonian: minimize
    /// `b(α)·D¹V + ½ q(α) x² D²V` with upwinded first difference. `cap`
    /// limits the positive drift coefficient (see `EDGE_DRIFT_FRACTION`).
    #[inline]
    fn eval1(&self, x: f64, cap: f64, d_fwd: f64, d_bwd: f64, second: f64) -> (f64, usize) {
        let mut best = f64::INFINITY;
        let mut code = 0usize;
        let half_xx_second = 0.5 * x * x * second;
        for c in 0..self.len {
            let b = (x * (self.rate + self.excess[c])).min(cap);
            let d1 = if b >= 0.0 { d_fwd } else { d_bwd };
            let v = b * d1 + self.quad[c * self.len + c] * half_xx_second;
            if v < best {
                best = v;
                code = c;
            }
        }
        (best, code)
    }

    /// Two-portfolio Hamiltonian over all code pairs.
    #[allow(clippy::too_many_arguments)]
    #[inline]
    fn eval2(&self, x1: f64, x2: f64, caps: [f64; 2], d: &DerivVals) -> (f64, usize, usize) {
        let mut best = f64::INFINITY;
        let mut best_pair = (0usize, 0usize);
        let x1x2 = x1 * x2;
        let h1 = 0.5 * x1 * x1 * d.s1;
        let h2 = 0.5 * x2 * x2 * d.s2;
        for c1 in 0..self.len {
            let b1 = (x1 * (self.rate + self.excess[c1])).min(caps[0]);
            let d1 = if b1 >= 0.0 { d.d1f } else { d.d1b };
            let part = b1 * d1 + self.quad[c1 * self.len + c1] * h1;
            let lim1 = x1 * x1 * self.quad[c1 * self.len + c1];
            let row = &self.quad[c1 * self.len..(c1 + 1) * self.len];
            for c2 in 0..self.len {
                let b2 = (x2 * (self.rate + self.excess[c2])).min(caps[1]);
                let d2 = if b2 >= 0.0 { d.d2f } else { d.d2b };
                let s2d = self.quad[c2 * self.len + c2];
                // Cross coefficient clamped to min(a₁₁, a₂₂) so every off-
                // diagonal stencil weight stays nonnegative (M-matrix); the
                // sign selects the matching monotone 7-point quotient.
                let cc = x1x2 * row[c2];
                let mag = cc.abs().min(lim1).min(x2 * x2 * s2d);
                let cross = if cc >= 0.0 { mag * d.cross_p } else { -mag * d.cross_m };
                let v = part + b2 * d2 + s2d * h2 + cross;
                if v < best {
                    best = v;
                    best_pair = (c1, c2);
                }
            }
        }
        (best, best_pair.0, best_pair.1)
    }
}

/// At the upper wealth boundary the ghost fold leaves only a backward
/// difference for a positive drift, whose implicit coefficient `b/h` can
/// exceed the diagonal `β + 1/τ` and destroy diagonal dominance — policy
/// iteration then oscillates instead of converging. The drift coefficient
/// on folded edge rows is therefore capped at this fraction of `h(β+1/τ)`,
/// keeping every row strictly dominant (two capped axes still leave 60% of
/// the diagonal). The value function flattens toward `x_max`, so the term
/// being limited vanishes at the solution and the cap costs no accuracy in
/// the interior.
const EDGE_DRIFT_FRACTION: f64 = 0.2;

/// Pointwise Hamiltonian minimization over a quantized simplex, using the
/// difference quotients recorded in `stencil`. Ties resolve to the lowest
/// code (ascending enumeration with strict improvement).
pub fn hamiltonian_min(
    market: &MarketParams,
    pgrid: &PolicyGrid,
    wealth: &[f64],
    stencil: &Stencil,
) -> HamiltonianEval {
    let table = HamTable::new(market, pgrid);
    match stencil.axes {
        1 => {
            let (value, code) = table.eval1(
                wealth[0],
                f64::INFINITY,
                stencil.fwd[0],
                stencil.bwd[0],
                stencil.second[0],
            );
            HamiltonianEval {
                value,
                codes: vec![code],
            }
        }
        2 => {
            let d = DerivVals {
                d1f: stencil.fwd[0],
                d1b: stencil.bwd[0],
                d2f: stencil.fwd[1],
                d2b: stencil.bwd[1],
                s1: stencil.second[0],
                s2: stencil.second[1],
                cross_p: 0.5 * (stencil.diag[0] - stencil.second[0] - stencil.second[1]),
                cross_m: 0.5 * (stencil.second[0] + stencil.second[1] - stencil.diag[1]),
            };
            let (value, c1, c2) =
                table.eval2(wealth[0], wealth[1], [f64::INFINITY; 2], &d);
            HamiltonianEval {
                value,
                codes: vec![c1, c2],
            }
        }
        n => panic!("hamiltonian_min supports 1 or 2 wealth axes, got {n}"),
    }
}

/// Sparse difference-operator weights over flattened cell indices.
type WList = Vec<(u32, f64)>;

#[inline]
fn dot(w: &WList, v: &[f64]) -> f64 {
    w.iter().map(|&(i, c)| c * v[i as usize]).sum()
}

/// Difference quotients of the current iterate at one cell. `cross_p` and
/// `cross_m` are the two sign-adapted 7-point mixed quotients (used for a
/// positive / negative cross coefficient respectively); both approximate
/// `∂²V/∂x₁∂x₂` but place their off-center weights on opposite diagonals,
/// which is what keeps the discretization monotone for either correlation
/// sign — the central 4-point cross cannot do that.
struct DerivVals {
    d1f: f64,
    d1b: f64,
    d2f: f64,
    d2b: f64,
    s1: f64,
    s2: f64,
    cross_p: f64,
    cross_m: f64,
}

/// Per-cell difference operators with linear-extrapolation ghosts folded in
/// at the upper wealth boundary. Folding a ghost `V[n] = 2V[n−1] − V[n−2]`
/// turns the forward difference at the edge into the backward one and zeroes
/// the second difference, which keeps evaluation and assembly consistent.
struct CellOps {
    d1f: WList,
    d1b: WList,
    d2f: WList,
    d2b: WList,
    s1: WList,
    s2: WList,
    cross_p: WList,
    cross_m: WList,
}

/// Accumulate weight `w` at logical node `(i, j)`, folding indices one past
/// the upper edge back onto the grid by linear extrapolation.
fn push2(n: usize, i: i64, j: i64, w: f64, out: &mut Vec<(u32, f64)>) {
    if i as usize >= n {
        push2(n, i - 1, j, 2.0 * w, out);
        push2(n, i - 2, j, -w, out);
        return;
    }
    if j as usize >= n {
        push2(n, i, j - 1, 2.0 * w, out);
        push2(n, i, j - 2, -w, out);
        return;
    }
    debug_assert!(i >= 0 && j >= 0);
    out.push(((i as usize * n + j as usize) as u32, w));
}

fn merged(mut raw: Vec<(u32, f64)>) -> WList {
    raw.sort_by_key(|e| e.0);
    let mut out: WList = Vec::with_capacity(raw.len());
    for (idx, w) in raw {
        match out.last_mut() {
            Some(last) if last.0 == idx => last.1 += w,
            _ => out.push((idx, w)),
        }
    }
    out.retain(|e| e.1 != 0.0);
    out
}

fn cell_ops_2d(n: usize, i: usize, j: usize, h: f64) -> CellOps {
    let (i, j) = (i as i64, j as i64);
    let inv_h = 1.0 / h;
    let inv_h2 = inv_h * inv_h;
    let build = |pts: &[(i64, i64, f64)]| -> WList {
        let mut raw = Vec::with_capacity(6);
        for &(a, b, w) in pts {
            push2(n, a, b, w, &mut raw);
        }
        merged(raw)
    };
    let d1f = build(&[(i + 1, j, inv_h), (i, j, -inv_h)]);
    let d1b = if i > 0 {
        build(&[(i, j, inv_h), (i - 1, j, -inv_h)])
    } else {
        Vec::new()
    };
    let d2f = build(&[(i, j + 1, inv_h), (i, j, -inv_h)]);
    let d2b = if j > 0 {
        build(&[(i, j, inv_h), (i, j - 1, -inv_h)])
    } else {
        Vec::new()
    };
    let s1 = if i > 0 {
        build(&[(i + 1, j, inv_h2), (i, j, -2.0 * inv_h2), (i - 1, j, inv_h2)])
    } else {
        Vec::new()
    };
    let s2 = if j > 0 {
        build(&[(i, j + 1, inv_h2), (i, j, -2.0 * inv_h2), (i, j - 1, inv_h2)])
    } else {
        Vec::new()
    };
    // Sign-adapted 7-point mixed quotients. `cross_p` leans on the (+1,+1)
    // diagonal, `cross_m` on the (+1,−1) diagonal; each keeps all off-center
    // weights of `±coef·quotient` nonnegative for its coefficient sign once
    // the coefficient is clamped to min(a₁₁, a₂₂).
    let cross_p = if i > 0 && j > 0 {
        build(&[
            (i, j, inv_h2),
            (i + 1, j + 1, 0.5 * inv_h2),
            (i - 1, j - 1, 0.5 * inv_h2),
            (i + 1, j, -0.5 * inv_h2),
            (i - 1, j, -0.5 * inv_h2),
            (i, j + 1, -0.5 * inv_h2),
            (i, j - 1, -0.5 * inv_h2),
        ])
    } else {
        Vec::new()
    };
    let cross_m = if i > 0 && j > 0 {
        build(&[
            (i, j, -inv_h2),
            (i + 1, j - 1, -0.5 * inv_h2),
            (i - 1, j + 1, -0.5 * inv_h2),
            (i + 1, j, 0.5 * inv_h2),
            (i - 1, j, 0.5 * inv_h2),
            (i, j + 1, 0.5 * inv_h2),
            (i, j - 1, 0.5 * inv_h2),
        ])
    } else {
        Vec::new()
    };
    CellOps {
        d1f,
        d1b,
        d2f,
        d2b,
        s1,
        s2,
        cross_p,
        cross_m,
    }
}

fn push1(n: usize, i: i64, w: f64, out: &mut Vec<(u32, f64)>) {
    if i as usize >= n {
        push1(n, i - 1, 2.0 * w, out);
        push1(n, i - 2, -w, out);
        return;
    }
    debug_assert!(i >= 0);
    out.push((i as u32, w));
}

struct CellOps1 {
    d1f: WList,
    d1b: WList,
    sec: WList,
}

fn cell_ops_1d(n: usize, i: usize, h: f64) -> CellOps1 {
    let i = i as i64;
    let inv_h = 1.0 / h;
    let inv_h2 = inv_h * inv_h;
    let build = |pts: &[(i64, f64)]| -> WList {
        let mut raw = Vec::with_capacity(4);
        for &(a, w) in pts {
            push1(n, a, w, &mut raw);
        }
        let mut raw2: Vec<(u32, f64)> = raw;
        raw2.sort_by_key(|e| e.0);
        merged(raw2)
    };
    let d1f = build(&[(i + 1, inv_h), (i, -inv_h)]);
    let d1b = if i > 0 {
        build(&[(i, inv_h), (i - 1, -inv_h)])
    } else {
        Vec::new()
    };
    let sec = if i > 0 {
        build(&[(i + 1, inv_h2), (i, -2.0 * inv_h2), (i - 1, inv_h2)])
    } else {
        Vec::new()
    };
    CellOps1 { d1f, d1b, sec }
}

/// Finite-penalty residual of the discrete variational inequality at one
/// cell of the two-portfolio period:
/// `βV − (W − V)/τ − H + scale·(g₊)⁺ + scale·(g₋)⁺` with
/// `g₊ = (V[c] − V[c₊])/h − λ` along the transfer-in ray and
/// `g₋ = (V[c] − V[c₋])/h − θ` along the transfer-out ray.
/// At continuation cells of a converged solve this reduces to the linear
/// solver residual.
#[allow(clippy::too_many_arguments)]
pub fn penalized_residual(
    market: &MarketParams,
    pgrid: &PolicyGrid,
    config: &SolverConfig,
    lambda: f64,
    theta: f64,
    axis: &AxisGrid,
    current: &[f64],
    next: &[f64],
    tau: f64,
    cell: usize,
) -> f64 {
    let n = axis.count;
    let h = axis.step;
    let (i, j) = (cell / n, cell % n);
    let table = HamTable::new(market, pgrid);
    let ops = cell_ops_2d(n, i, j, h);
    let d = DerivVals {
        d1f: dot(&ops.d1f, current),
        d1b: dot(&ops.d1b, current),
        d2f: dot(&ops.d2f, current),
        d2b: dot(&ops.d2b, current),
        s1: dot(&ops.s1, current),
        s2: dot(&ops.s2, current),
        cross_p: dot(&ops.cross_p, current),
        cross_m: dot(&ops.cross_m, current),
    };
    let (x1, x2) = (axis.coord(i), axis.coord(j));
    let beta = market.discount;
    let cap = EDGE_DRIFT_FRACTION * h * (beta + 1.0 / tau);
    let caps = [
        if i + 1 == n { cap } else { f64::INFINITY },
        if j + 1 == n { cap } else { f64::INFINITY },
    ];
    let (hval, _, _) = table.eval2(x1, x2, caps, &d);
    let v = current[cell];
    let mut res = beta * v - (next[cell] - v) / tau - hval;
    if i + 1 < n && j > 0 {
        let g = (v - current[(i + 1) * n + (j - 1)]) / h - lambda;
        res += config.penalty_scale * g.max(0.0);
    }
    if i > 0 && j + 1 < n {
        let g = (v - current[(i - 1) * n + (j + 1)]) / h - theta;
        res += config.penalty_scale * g.max(0.0);
    }
    res
}

/// One implicit step of the single-portfolio HJB equation.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub values: Vec<f64>,
    pub codes: Vec<u16>,
    pub iterations: u32,
    pub max_residual: f64,
    pub deltas: Vec<f64>,
}

/// Backward Euler step `next → values` over time span `tau` for the single
/// remaining portfolio. `bound_value` is the Dirichlet value at zero wealth
/// (discounted worst case, no recovery without risk capital).
pub fn step_backward_last(
    market: &MarketParams,
    pgrid: &PolicyGrid,
    config: &SolverConfig,
    axis: &AxisGrid,
    next: &[f64],
    tau: f64,
    bound_value: f64,
    time: f64,
) -> Result<StepResult, SolveError> {
    let n = axis.count;
    assert_eq!(next.len(), n);
    let table = HamTable::new(market, pgrid);
    let ops: Vec<CellOps1> = (0..n).map(|i| cell_ops_1d(n, i, axis.step)).collect();
    let beta = market.discount;
    let inv_tau = 1.0 / tau;

    let edge_cap = EDGE_DRIFT_FRACTION * axis.step * (beta + inv_tau);
    let cap_at = |i: usize| if i + 1 == n { edge_cap } else { f64::INFINITY };
    let mut v = next.to_vec();
    let mut codes = vec![0u16; n];
    let mut deltas = Vec::new();
    for iter in 0..config.max_policy_iters {
        // Select the minimizing code per cell from the current iterate.
        let sel: Vec<usize> = (1..n)
            .map(|i| {
                let d1f = dot(&ops[i].d1f, &v);
                let d1b = dot(&ops[i].d1b, &v);
                let sec = dot(&ops[i].sec, &v);
                table.eval1(axis.coord(i), cap_at(i), d1f, d1b, sec).1
            })
            .collect();
        // Assemble and solve the implicit system with frozen codes.
        let mut mat = BandMatrix::new(n, 1, 1);
        let mut rhs = vec![0.0; n];
        mat.set(0, 0, 1.0);
        rhs[0] = bound_value;
        for i in 1..n {
            let c = sel[i - 1];
            let x = axis.coord(i);
            let b = (x * (table.rate + table.excess[c])).min(cap_at(i));
            let a = table.quad[c * table.len + c] * x * x;
            mat.add(i, i, beta + inv_tau);
            let d1 = if b >= 0.0 { &ops[i].d1f } else { &ops[i].d1b };
            for &(k, w) in d1 {
                mat.add(i, k as usize, -b * w);
            }
            for &(k, w) in &ops[i].sec {
                mat.add(i, k as usize, -0.5 * a * w);
            }
            rhs[i] = next[i] * inv_tau;
        }
        let assembled = mat.clone();
        let lu = mat.factor().map_err(|_| SolveError::Singular { time })?;
        let mut vnew = rhs.clone();
        lu.solve_in_place(&mut vnew);
        let delta = v
            .iter()
            .zip(&vnew)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        deltas.push(delta);
        v = vnew;
        if delta < config.policy_tol {
            for i in 1..n {
                codes[i] = sel[i - 1] as u16;
            }
            let mut av = vec![0.0; n];
            assembled.matvec(&v, &mut av);
            let max_residual = av
                .iter()
                .zip(&rhs)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            return Ok(StepResult {
                values: v,
                codes,
                iterations: iter as u32 + 1,
                max_residual,
                deltas,
            });
        }
    }
    Err(SolveError::PolicyIterationDiverged {
        time,
        history: deltas,
    })
}

/// One implicit step of the two-portfolio variational inequality.
#[derive(Debug, Clone)]
pub struct StepResult2 {
    pub values: Vec<f64>,
    /// Minimizing allocation codes per cell (portfolio 1, portfolio 2).
    pub codes: Vec<[u16; 2]>,
    pub labels: Vec<RegionLabel>,
    pub iterations: u32,
    pub max_residual: f64,
    pub deltas: Vec<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum RowKind {
    Dirichlet,
    Pde,
    TransferIn,
    TransferOut,
}

#[derive(Clone, Copy)]
struct CellSel {
    kind: RowKind,
    c1: u16,
    c2: u16,
    s_in: f64,
    s_out: f64,
}

/// Backward Euler step for the two-portfolio period. Each policy iteration
/// re-minimizes the Hamiltonian codes and maintains an active set of
/// transfer rows `V[c] − V[c ± (1,∓1)] = cost·h`: a cell enters a transfer
/// row when its gradient constraint is strictly violated at the current
/// iterate, keeps the row while the constraint stays binding, and drops
/// back to the PDE row only once the constraint goes strictly slack. The
/// one-sided drift fallback at `x = x_max` makes a few edge rows
/// non-monotone, so a residual-comparison rule can flip such a cell between
/// interpretations forever; entry/exit hysteresis on the constraint itself
/// terminates there while leaving exact complementarity everywhere it is
/// attainable. Vanishing violations stay with the PDE row, so continuation
/// wins where both interpretations fit.
#[allow(clippy::too_many_arguments)]
pub fn step_backward_two_goal(
    market: &MarketParams,
    pgrid: &PolicyGrid,
    config: &SolverConfig,
    lambda: f64,
    theta: f64,
    axis: &AxisGrid,
    next: &[f64],
    tau: f64,
    bound_corner: f64,
    time: f64,
) -> Result<StepResult2, SolveError> {
    let n = axis.count;
    let ncells = n * n;
    assert_eq!(next.len(), ncells);
    let h = axis.step;
    let table = HamTable::new(market, pgrid);
    let ops: Vec<CellOps> = (0..ncells)
        .into_par_iter()
        .map(|c| cell_ops_2d(n, c / n, c % n, h))
        .collect();
    let beta = market.discount;
    let inv_tau = 1.0 / tau;
    let bandwidth = n + 1;
    let edge_cap = EDGE_DRIFT_FRACTION * h * (beta + inv_tau);

    let mut kinds = vec![RowKind::Pde; ncells];
    kinds[0] = RowKind::Dirichlet;
    let mut v = next.to_vec();
    let mut deltas = Vec::new();
    for iter in 0..config.max_policy_iters {
        // Active-set update: strict violation enters a transfer row, exact
        // binding keeps it, strict slack releases it to the PDE row.
        let tol = config.policy_tol;
        let mut sel: Vec<CellSel> = (0..ncells)
            .into_par_iter()
            .map(|c| {
                let (i, j) = (c / n, c % n);
                if c == 0 {
                    return CellSel {
                        kind: RowKind::Dirichlet,
                        c1: 0,
                        c2: 0,
                        s_in: f64::NEG_INFINITY,
                        s_out: f64::NEG_INFINITY,
                    };
                }
                let o = &ops[c];
                let d = DerivVals {
                    d1f: dot(&o.d1f, &v),
                    d1b: dot(&o.d1b, &v),
                    d2f: dot(&o.d2f, &v),
                    d2b: dot(&o.d2b, &v),
                    s1: dot(&o.s1, &v),
                    s2: dot(&o.s2, &v),
                    cross_p: dot(&o.cross_p, &v),
                    cross_m: dot(&o.cross_m, &v),
                };
                let (x1, x2) = (axis.coord(i), axis.coord(j));
                let caps = [
                    if i + 1 == n { edge_cap } else { f64::INFINITY },
                    if j + 1 == n { edge_cap } else { f64::INFINITY },
                ];
                let (_hval, c1, c2) = table.eval2(x1, x2, caps, &d);
                let s_in = if i + 1 < n && j > 0 {
                    (v[c] - v[c + n - 1]) / h - lambda
                } else {
                    f64::NEG_INFINITY
                };
                let s_out = if i > 0 && j + 1 < n {
                    (v[c] - v[c - n + 1]) / h - theta
                } else {
                    f64::NEG_INFINITY
                };
                let kind = if s_in > tol && s_in >= s_out {
                    RowKind::TransferIn
                } else if s_out > tol {
                    RowKind::TransferOut
                } else if kinds[c] == RowKind::TransferIn && s_in >= -tol {
                    RowKind::TransferIn
                } else if kinds[c] == RowKind::TransferOut && s_out >= -tol {
                    RowKind::TransferOut
                } else {
                    RowKind::Pde
                };
                CellSel {
                    kind,
                    c1: c1 as u16,
                    c2: c2 as u16,
                    s_in,
                    s_out,
                }
            })
            .collect();

        // A transfer-in row at c and a transfer-out row at its target would
        // make the system singular. Positive costs rule the pair out —
        // simultaneous violation would need 0 > (λ+θ)h — but demote
        // defensively: keep the row with the larger violation.
        for c in 0..ncells {
            if sel[c].kind == RowKind::TransferIn {
                let tgt = c + n - 1;
                if sel[tgt].kind == RowKind::TransferOut {
                    if sel[c].s_in >= sel[tgt].s_out {
                        sel[tgt].kind = RowKind::Pde;
                    } else {
                        sel[c].kind = RowKind::Pde;
                    }
                }
            }
        }
        for (k, s) in kinds.iter_mut().zip(&sel) {
            *k = s.kind;
        }

        let mut mat = BandMatrix::new(ncells, bandwidth, bandwidth);
        let mut rhs = vec![0.0; ncells];
        for c in 0..ncells {
            let (i, j) = (c / n, c % n);
            match sel[c].kind {
                RowKind::Dirichlet => {
                    mat.set(c, c, 1.0);
                    rhs[c] = bound_corner;
                }
                RowKind::TransferIn => {
                    mat.set(c, c, 1.0);
                    mat.set(c, c + n - 1, -1.0);
                    rhs[c] = lambda * h;
                }
                RowKind::TransferOut => {
                    mat.set(c, c, 1.0);
                    mat.set(c, c - n + 1, -1.0);
                    rhs[c] = theta * h;
                }
                RowKind::Pde => {
                    let o = &ops[c];
                    let (x1, x2) = (axis.coord(i), axis.coord(j));
                    let (c1, c2) = (sel[c].c1 as usize, sel[c].c2 as usize);
                    let cap1 = if i + 1 == n { edge_cap } else { f64::INFINITY };
                    let cap2 = if j + 1 == n { edge_cap } else { f64::INFINITY };
                    let b1 = (x1 * (table.rate + table.excess[c1])).min(cap1);
                    let b2 = (x2 * (table.rate + table.excess[c2])).min(cap2);
                    let a11 = table.quad[c1 * table.len + c1] * x1 * x1;
                    let a22 = table.quad[c2 * table.len + c2] * x2 * x2;
                    // Same clamp and quotient choice as `eval2`, so the
                    // assembled rows reproduce the selected Hamiltonian.
                    let a12_raw = table.quad[c1 * table.len + c2] * x1 * x2;
                    let a12 = a12_raw.abs().min(a11).min(a22);
                    let cross_op = if a12_raw >= 0.0 { &o.cross_p } else { &o.cross_m };
                    let a12 = if a12_raw >= 0.0 { a12 } else { -a12 };
                    mat.add(c, c, beta + inv_tau);
                    let d1 = if b1 >= 0.0 { &o.d1f } else { &o.d1b };
                    for &(k, w) in d1 {
                        mat.add(c, k as usize, -b1 * w);
                    }
                    let d2 = if b2 >= 0.0 { &o.d2f } else { &o.d2b };
                    for &(k, w) in d2 {
                        mat.add(c, k as usize, -b2 * w);
                    }
                    for &(k, w) in &o.s1 {
                        mat.add(c, k as usize, -0.5 * a11 * w);
                    }
                    for &(k, w) in &o.s2 {
                        mat.add(c, k as usize, -0.5 * a22 * w);
                    }
                    for &(k, w) in cross_op {
                        mat.add(c, k as usize, -a12 * w);
                    }
                    rhs[c] = next[c] * inv_tau;
                }
            }
        }
        let assembled = mat.clone();
        let lu = mat.factor().map_err(|_| SolveError::Singular { time })?;
        let mut vnew = rhs.clone();
        lu.solve_in_place(&mut vnew);
        let delta = v
            .iter()
            .zip(&vnew)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        deltas.push(delta);
        v = vnew;
        if delta < config.policy_tol {
            let mut av = vec![0.0; ncells];
            assembled.matvec(&v, &mut av);
            let max_residual = av
                .iter()
                .zip(&rhs)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            let codes = sel.iter().map(|s| [s.c1, s.c2]).collect();
            let labels = sel
                .iter()
                .map(|s| match s.kind {
                    RowKind::TransferIn => RegionLabel::TransferIntoGoal,
                    RowKind::TransferOut => RegionLabel::TransferOutOfGoal,
                    _ => RegionLabel::Continue,
                })
                .collect();
            return Ok(StepResult2 {
                values: v,
                codes,
                labels,
                iterations: iter as u32 + 1,
                max_residual,
                deltas,
            });
        }
    }
    Err(SolveError::PolicyIterationDiverged {
        time,
        history: deltas,
    })
}

/// Solution of the last period: surface over `[T₁, T]`, per-step allocation
/// codes (slice `k` applies on `[t_k, t_{k+1})`), and iteration diagnostics.
#[derive(Debug, Clone)]
pub struct LastPeriodSolution {
    pub surface: ValueSurface,
    pub codes: Vec<u16>,
    pub iterations: Vec<u32>,
    pub max_residuals: Vec<f64>,
    pub policy_grid: PolicyGrid,
}

impl LastPeriodSolution {
    pub fn codes_at(&self, k: usize) -> &[u16] {
        let n = self.surface.axes[0].count;
        &self.codes[k * n..(k + 1) * n]
    }
}

/// Backward solve of the single-portfolio HJB equation on `[T₁, T]` with
/// terminal shortfall `(G − x)⁺` for the fundamental goal.
pub fn solve_last_period(
    market: &MarketParams,
    ladder: &GoalLadder,
    axis: &AxisGrid,
    times: &TimeLine,
    config: &SolverConfig,
) -> Result<LastPeriodSolution, SolveError> {
    let pgrid = PolicyGrid::new(config.allocation_step_fine)?;
    let fundamental = *ladder.goals.last().expect("validated ladder");
    let n = axis.count;
    let nt = times.count;
    let mut surface = ValueSurface::new(1, *times, vec![*axis]);
    for i in 0..n {
        let x = axis.coord(i);
        surface.values[(nt - 1) * n + i] = (fundamental.target - x).max(0.0);
    }
    let mut codes = vec![0u16; (nt - 1) * n];
    let mut iterations = Vec::with_capacity(nt - 1);
    let mut max_residuals = Vec::with_capacity(nt - 1);
    let last_goal = ladder.goals.len() - 1;
    for k in (0..nt - 1).rev() {
        let t = times.node(k);
        let bound = supersolution_bound(ladder, market, last_goal, t);
        let next: Vec<f64> = surface.slice(k + 1).to_vec();
        let step = step_backward_last(
            market, &pgrid, config, axis, &next, times.step, bound, t,
        )?;
        surface.slice_mut(k).copy_from_slice(&step.values);
        codes[k * n..(k + 1) * n].copy_from_slice(&step.codes);
        iterations.push(step.iterations);
        max_residuals.push(step.max_residual);
    }
    iterations.reverse();
    max_residuals.reverse();
    Ok(LastPeriodSolution {
        surface,
        codes,
        iterations,
        max_residuals,
        policy_grid: pgrid,
    })
}

/// Solution of the two-portfolio period on `[0, T₁]`.
#[derive(Debug, Clone)]
pub struct TwoGoalSolution {
    pub surface: ValueSurface,
    /// Per-step allocation code pairs, `(nt − 1) · n²` entries.
    pub codes: Vec<[u16; 2]>,
    /// Per-step transfer labels from the active constraint rows.
    pub labels: Vec<RegionLabel>,
    pub iterations: Vec<u32>,
    pub max_residuals: Vec<f64>,
    pub policy_grid: PolicyGrid,
}

impl TwoGoalSolution {
    pub fn cells_per_slice(&self) -> usize {
        let n = self.surface.axes[0].count;
        n * n
    }

    pub fn codes_at(&self, k: usize) -> &[[u16; 2]] {
        let m = self.cells_per_slice();
        &self.codes[k * m..(k + 1) * m]
    }

    pub fn labels_at(&self, k: usize) -> &[RegionLabel] {
        let m = self.cells_per_slice();
        &self.labels[k * m..(k + 1) * m]
    }
}

/// Backward solve of the two-portfolio variational inequality on `[0, T₁]`,
/// starting from the coupled deadline slice.
pub fn solve_two_goal_period(
    market: &MarketParams,
    ladder: &GoalLadder,
    axis: &AxisGrid,
    times: &TimeLine,
    terminal: &[f64],
    config: &SolverConfig,
) -> Result<TwoGoalSolution, SolveError> {
    let pgrid = PolicyGrid::new(config.allocation_step_coarse)?;
    let goal = ladder.goals[0];
    let n = axis.count;
    let ncells = n * n;
    assert_eq!(terminal.len(), ncells);
    let nt = times.count;
    let mut surface = ValueSurface::new(0, *times, vec![*axis, *axis]);
    surface.slice_mut(nt - 1).copy_from_slice(terminal);
    let mut codes = vec![[0u16; 2]; (nt - 1) * ncells];
    let mut labels = vec![RegionLabel::Continue; (nt - 1) * ncells];
    let mut iterations = Vec::with_capacity(nt - 1);
    let mut max_residuals = Vec::with_capacity(nt - 1);
    for k in (0..nt - 1).rev() {
        let t = times.node(k);
        let bound = supersolution_bound(ladder, market, 0, t);
        let next: Vec<f64> = surface.slice(k + 1).to_vec();
        let step = step_backward_two_goal(
            market,
            &pgrid,
            config,
            goal.penalty_in,
            goal.penalty_out,
            axis,
            &next,
            times.step,
            bound,
            t,
        )?;
        surface.slice_mut(k).copy_from_slice(&step.values);
        codes[k * ncells..(k + 1) * ncells].copy_from_slice(&step.codes);
        labels[k * ncells..(k + 1) * ncells].copy_from_slice(&step.labels);
        iterations.push(step.iterations);
        max_residuals.push(step.max_residual);
    }
    iterations.reverse();
    max_residuals.reverse();
    Ok(TwoGoalSolution {
        surface,
        codes,
        labels,
        iterations,
        max_residuals,
        policy_grid: pgrid,
    })
}
