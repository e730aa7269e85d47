//! Problem data: goal ladder, market parameters, admissible controls.
//!
//! An agent funds `K` dated goals plus one fundamental (retirement) goal from
//! `K + 1` dedicated portfolios. Goal `k` pays the shortfall penalty
//! `w_k (G_k - X_k(T_k))^+` at its deadline, and moving wealth between a goal
//! portfolio and the fundamental portfolio costs `lambda_k` per unit in and
//! `theta_k` per unit out. All portfolios invest in the same two risky assets
//! plus a risk-free account.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One goal in the ladder: pay `weight * (target - wealth)^+` at `deadline`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    /// Target amount `G_k` (currency, thousands).
    pub target: f64,
    /// Deadline `T_k` (years).
    pub deadline: f64,
    /// Shortfall weight `w_k` relative to the fundamental goal.
    pub weight: f64,
    /// Proportional cost `lambda_k` per unit moved from the fundamental
    /// portfolio into this goal's portfolio.
    pub penalty_in: f64,
    /// Proportional cost `theta_k` per unit moved back out.
    pub penalty_out: f64,
}

/// Deadline-ordered goals; the last entry is the fundamental goal.
///
/// The fundamental goal carries weight 1.0 by convention (all other weights
/// are expressed relative to it) and has no transfer penalties of its own:
/// transfers are always between a dated goal and the fundamental portfolio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalLadder {
    pub goals: Vec<GoalSpec>,
}

/// Market with one risk-free account and two risky assets.
///
/// The volatility matrix is the Cholesky factor of the asset covariance, so
/// `sigma * sigma^T = [[vol_1^2, rho vol_1 vol_2], [rho vol_1 vol_2, vol_2^2]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    /// Risk-free rate `r`.
    pub risk_free: f64,
    /// Subjective discount rate `beta`.
    pub discount: f64,
    /// Risky drifts `mu = (mu_1, mu_2)`.
    pub drift: [f64; 2],
    /// Volatility of asset 1.
    pub vol_1: f64,
    /// Volatility of asset 2.
    pub vol_2: f64,
    /// Instantaneous correlation `rho` between the two assets.
    pub correlation: f64,
}

impl Default for MarketParams {
    fn default() -> Self {
        // Benchmark market: r = beta = 0, mu = (0.2, 0.3), sigma = (0.3, 0.4).
        MarketParams {
            risk_free: 0.0,
            discount: 0.0,
            drift: [0.2, 0.3],
            vol_1: 0.3,
            vol_2: 0.4,
            correlation: 0.5,
        }
    }
}

/// Fractions of one portfolio's wealth held in each risky asset.
///
/// Admissible when every entry is nonnegative and the entries sum to at most
/// one; the remainder sits in the risk-free account.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub weights: Vec<f64>,
}

impl Allocation {
    pub fn new(weights: Vec<f64>) -> Result<Self, ModelError> {
        const TOL: f64 = 1e-12;
        if weights.iter().any(|w| *w < -TOL || !w.is_finite()) {
            return Err(ModelError::InvalidAllocation {
                reason: "negative or non-finite weight".into(),
            });
        }
        let sum: f64 = weights.iter().sum();
        if sum > 1.0 + TOL {
            return Err(ModelError::InvalidAllocation {
                reason: format!("weights sum to {sum} > 1"),
            });
        }
        Ok(Allocation { weights })
    }
}

/// Instantaneous transfer between a goal portfolio and the fundamental one.
///
/// `dL` (into the goal) and `dM` (out of the goal) are never both positive:
/// a round trip burns `lambda + theta > 0` per unit and is never optimal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TransferDecision {
    /// No transfer.
    Hold,
    /// Move `amount > 0` from the fundamental portfolio into the goal.
    IntoGoal(f64),
    /// Move `amount > 0` from the goal back into the fundamental portfolio.
    OutOfGoal(f64),
}

impl TransferDecision {
    /// Signed flow into the goal portfolio (`+` in, `-` out).
    pub fn signed_flow(&self) -> f64 {
        match self {
            TransferDecision::Hold => 0.0,
            TransferDecision::IntoGoal(a) => *a,
            TransferDecision::OutOfGoal(a) => -*a,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid goal ladder: {reason}")]
    InvalidLadder { reason: String },
    #[error("invalid market parameters: {reason}")]
    InvalidMarket { reason: String },
    #[error("invalid allocation: {reason}")]
    InvalidAllocation { reason: String },
}

/// Check ladder well-formedness: positive targets/weights, strictly increasing
/// deadlines, fundamental weight 1.0, and `lambda_k + theta_k > 0` for every
/// dated goal (without it round-trip transfers would be free).
pub fn validate_ladder(ladder: &GoalLadder) -> Result<(), ModelError> {
    let err = |reason: String| Err(ModelError::InvalidLadder { reason });
    if ladder.goals.len() < 2 {
        return err("need at least one dated goal plus the fundamental goal".into());
    }
    for (k, g) in ladder.goals.iter().enumerate() {
        if !(g.target > 0.0) || !g.target.is_finite() {
            return err(format!("goal {k}: target must be positive, got {}", g.target));
        }
        if !(g.deadline > 0.0) || !g.deadline.is_finite() {
            return err(format!("goal {k}: deadline must be positive, got {}", g.deadline));
        }
        if !(g.weight > 0.0) || !g.weight.is_finite() {
            return err(format!("goal {k}: weight must be positive, got {}", g.weight));
        }
        if g.penalty_in < 0.0 || g.penalty_out < 0.0 {
            return err(format!("goal {k}: transfer penalties must be nonnegative"));
        }
    }
    for k in 1..ladder.goals.len() {
        if !(ladder.goals[k].deadline > ladder.goals[k - 1].deadline) {
            return err(format!(
                "deadlines must be strictly increasing, got {} then {}",
                ladder.goals[k - 1].deadline,
                ladder.goals[k].deadline
            ));
        }
    }
    let fundamental = ladder.goals.last().unwrap();
    if (fundamental.weight - 1.0).abs() > 1e-12 {
        return err(format!(
            "fundamental goal weight must be 1.0, got {}",
            fundamental.weight
        ));
    }
    for (k, g) in ladder.goals[..ladder.goals.len() - 1].iter().enumerate() {
        if g.penalty_in + g.penalty_out <= 0.0 {
            return err(format!("goal {k}: penalty_in + penalty_out must be positive"));
        }
    }
    Ok(())
}

pub fn validate_market(market: &MarketParams) -> Result<(), ModelError> {
    let err = |reason: String| Err(ModelError::InvalidMarket { reason });
    if !(market.vol_1 > 0.0) || !(market.vol_2 > 0.0) {
        return err(format!(
            "volatilities must be positive, got ({}, {})",
            market.vol_1, market.vol_2
        ));
    }
    if !(market.correlation > -1.0 && market.correlation < 1.0) {
        return err(format!(
            "correlation must lie in (-1, 1), got {}",
            market.correlation
        ));
    }
    if market.drift.iter().any(|m| !m.is_finite())
        || !market.risk_free.is_finite()
        || !market.discount.is_finite()
    {
        return err("drifts and rates must be finite".into());
    }
    Ok(())
}

/// Lower-triangular volatility matrix
/// `sigma = [[vol_1, 0], [rho vol_2, sqrt(1 - rho^2) vol_2]]`.
pub fn cholesky_vol(market: &MarketParams) -> [[f64; 2]; 2] {
    let r = market.correlation;
    [
        [market.vol_1, 0.0],
        [r * market.vol_2, (1.0 - r * r).sqrt() * market.vol_2],
    ]
}

/// Asset covariance `sigma sigma^T`.
pub fn asset_covariance(market: &MarketParams) -> [[f64; 2]; 2] {
    let s = cholesky_vol(market);
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = s[i][0] * s[j][0] + s[i][1] * s[j][1];
        }
    }
    c
}

/// Zero-wealth value `B_k(t) = sum_{i >= k} w_i e^{-beta (T_i - t)} G_i`.
///
/// With no wealth in any remaining portfolio every shortfall is paid in full,
/// and the constant-in-wealth surface `B_k` is a stochastic supersolution
/// under the null control, so it upper-bounds every value surface.
pub fn supersolution_bound(ladder: &GoalLadder, market: &MarketParams, k: usize, t: f64) -> f64 {
    ladder.goals[k..]
        .iter()
        .map(|g| g.weight * (-market.discount * (g.deadline - t)).exp() * g.target)
        .sum()
}

/// Two-goal benchmark ladder: dated goal (5.0 at T1 = 1) plus fundamental
/// (4.0 at T = 2), transfer penalties lambda = 0.3, theta = 0.1.
pub fn benchmark_ladder() -> GoalLadder {
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
