//! Transfer-region labeling, threshold extraction, and shape features.
//!
//! Transfers move wealth along anti-diagonal rays `x₁ + x₂ = const`. The
//! transfer-into-goal region draws on fundamental wealth and is anchored at
//! high `x₂`; the transfer-out region refills the fundamental account and is
//! anchored at the `x₂ = 0` edge. Feature detection reads each region as a
//! reach curve seen from its anchor and classifies departures from the
//! monotone envelope of that curve as bulges (region protruding past the
//! envelope) or notches (continuation carved into the region).

use crate::coupling::CoupledSlice;
use crate::grid::AxisGrid;
use crate::model::GoalLadder;
use serde::Serialize;
use thiserror::Error;

/// Cell classification in the two-portfolio period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RegionLabel {
    /// Buy into the goal portfolio (pay `λ` per unit).
    TransferIntoGoal,
    /// Sell out of the goal portfolio (pay `θ` per unit).
    TransferOutOfGoal,
    Continue,
}

impl RegionLabel {
    pub fn letter(self) -> char {
        match self {
            RegionLabel::TransferIntoGoal => 'L',
            RegionLabel::TransferOutOfGoal => 'M',
            RegionLabel::Continue => 'C',
        }
    }
}

#[derive(Debug, Clone, Error)]
pub enum RegionError {
    #[error("region {region:?} is empty; thresholds undefined")]
    EmptyRegion { region: RegionLabel },
}

/// Verify proposed transfer labels against a value slice: a transfer label
/// survives only if its one-step constraint binds within `tol`; otherwise
/// the cell is demoted to `Continue`. Continuation always wins ties.
pub fn classify(
    axis: &AxisGrid,
    values: &[f64],
    proposed: &[RegionLabel],
    lambda: f64,
    theta: f64,
    tol: f64,
) -> Vec<RegionLabel> {
    let n = axis.count;
    let h = axis.step;
    proposed
        .iter()
        .enumerate()
        .map(|(c, &label)| {
            let (i, j) = (c / n, c % n);
            match label {
                RegionLabel::TransferIntoGoal if i + 1 < n && j >= 1 => {
                    let gap = values[c] - values[(i + 1) * n + (j - 1)] - lambda * h;
                    if gap.abs() <= tol {
                        label
                    } else {
                        RegionLabel::Continue
                    }
                }
                RegionLabel::TransferOutOfGoal if i >= 1 && j + 1 < n => {
                    let gap = values[c] - values[(i - 1) * n + (j + 1)] - theta * h;
                    if gap.abs() <= tol {
                        label
                    } else {
                        RegionLabel::Continue
                    }
                }
                RegionLabel::Continue => RegionLabel::Continue,
                // Transfer label without a feasible target cell.
                _ => RegionLabel::Continue,
            }
        })
        .collect()
}

/// Labels of a coupled deadline slice, read off the minimizing plans.
pub fn labels_from_plans(slice: &CoupledSlice) -> Vec<RegionLabel> {
    slice
        .transfer_in
        .iter()
        .zip(&slice.transfer_out)
        .map(|(&l, &m)| {
            if l > 0 {
                RegionLabel::TransferIntoGoal
            } else if m > 0 {
                RegionLabel::TransferOutOfGoal
            } else {
                RegionLabel::Continue
            }
        })
        .collect()
}

/// Characteristic wealth levels of the deadline transfer policy.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ThresholdReport {
    /// Typical post-transfer fundamental wealth of sell-backs: where the
    /// marginal fundamental value drops below `θ + w`.
    pub sellback_target: f64,
    /// Smallest post-transfer fundamental wealth of buy-ins: below it the
    /// marginal fundamental value exceeds `w − λ` and buying stops.
    pub transferin_floor: f64,
    /// Largest post-transfer fundamental wealth of surplus sell-backs:
    /// where the marginal fundamental value drops below `θ`.
    pub surplus_cap: f64,
    /// Largest goal wealth that still sells back down to the sell-back
    /// target; beyond it the goal portfolio retains its target.
    pub split_abscissa: f64,
}

/// Extract the policy thresholds from a coupled deadline slice.
pub fn extract_thresholds(
    slice: &CoupledSlice,
    ladder: &GoalLadder,
) -> Result<ThresholdReport, RegionError> {
    let n = slice.axis.count;
    let g1 = ladder.goals[0].target;
    let mut in_cells: Vec<(usize, usize)> = Vec::new(); // (i, post_j)
    let mut out_cells: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let c = i * n + j;
            if slice.transfer_in[c] > 0 {
                in_cells.push((i, j - slice.transfer_in[c] as usize));
            }
            if slice.transfer_out[c] > 0 {
                out_cells.push((i, j + slice.transfer_out[c] as usize));
            }
        }
    }
    if in_cells.is_empty() {
        return Err(RegionError::EmptyRegion {
            region: RegionLabel::TransferIntoGoal,
        });
    }
    if out_cells.is_empty() {
        return Err(RegionError::EmptyRegion {
            region: RegionLabel::TransferOutOfGoal,
        });
    }
    let transferin_floor = in_cells
        .iter()
        .map(|&(_, pj)| slice.axis.coord(pj))
        .fold(f64::INFINITY, f64::min);

    // Sell-backs from cells with x₁ ≤ G₁ + target drain to the target
    // exactly, so the target is both the mode of their post-transfer wealth
    // and the self-consistent cut between them and surplus sell-backs.
    let mode_below = |x1_limit: f64| -> usize {
        let mut counts = vec![0usize; n];
        for &(i, pj) in &out_cells {
            if slice.axis.coord(i) <= x1_limit {
                counts[pj] += 1;
            }
        }
        counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(idx, _)| idx)
            .unwrap_or(0)
    };
    let mut target_idx = mode_below(f64::INFINITY);
    for _ in 0..16 {
        let refined = mode_below(g1 + slice.axis.coord(target_idx));
        if refined == target_idx {
            break;
        }
        target_idx = refined;
    }
    let sellback_target = slice.axis.coord(target_idx);

    let surplus_cells: Vec<&(usize, usize)> = out_cells
        .iter()
        .filter(|&&(i, _)| slice.axis.coord(i) > g1 + sellback_target)
        .collect();
    let surplus_cap = surplus_cells
        .iter()
        .map(|&&(_, pj)| slice.axis.coord(pj))
        .fold(f64::NEG_INFINITY, f64::max);
    let surplus_cap = if surplus_cap.is_finite() {
        surplus_cap
    } else {
        sellback_target
    };

    let split_abscissa = out_cells
        .iter()
        .filter(|&&(_, pj)| pj == target_idx)
        .map(|&(i, _)| slice.axis.coord(i))
        .fold(f64::NEG_INFINITY, f64::max);
    let split_abscissa = if split_abscissa.is_finite() {
        split_abscissa
    } else {
        g1 + sellback_target
    };

    Ok(ThresholdReport {
        sellback_target,
        transferin_floor,
        surplus_cap,
        split_abscissa,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FeatureKind {
    /// Region cells protruding past the monotone envelope of the region's
    /// free boundary: a hump of the boundary curve.
    Bulge,
    /// Continuation cells carved into the region's envelope: an interior
    /// pocket, or a gap between the region and its anchor edge.
    Notch,
}

/// A detected shape feature with its padded bounding box in wealth space.
#[derive(Debug, Clone, Serialize)]
pub struct Feature {
    pub kind: FeatureKind,
    pub region: RegionLabel,
    pub x1_lo: f64,
    pub x1_hi: f64,
    pub x2_lo: f64,
    pub x2_hi: f64,
    pub cells: usize,
}

impl Feature {
    pub fn overlaps(&self, x1_lo: f64, x1_hi: f64, x2_lo: f64, x2_hi: f64) -> bool {
        self.x1_lo <= x1_hi && x1_lo <= self.x1_hi && self.x2_lo <= x2_hi && x2_lo <= self.x2_hi
    }
}

/// Resolution floor for reported features: protrusions smaller than this
/// are indistinguishable from discretization staircase artifacts.
const MIN_FEATURE_CELLS: usize = 6;
const MIN_FEATURE_SPAN: usize = 2;

/// Minimum rise of a reach curve above its base, in grid cells, for a
/// protrusion to count as a bulge rather than boundary staircase noise.
const MIN_BULGE_RISE: usize = 4;

/// Detect bulges and notches of both transfer regions in a label slice.
///
/// Each region is read as a reach curve seen from its anchor edge:
/// - the buy-in region is anchored at high `x₂` and reaches toward high
///   `x₁`; its curve is `t(x₂) = max {x₁ : (x₁, x₂) labeled buy-in}`;
/// - the sell-out region is anchored at `x₂ = 0` and reaches toward high
///   `x₂`; its curve is `e(x₁) = max {x₂ : (x₁, x₂) labeled sell-out}`.
///
/// A bulge is a hump of the reach curve rising at least `MIN_BULGE_RISE`
/// cells past the monotone envelope: for buy-ins the envelope level is the
/// curve's eventual value at high `x₂` (the hump must come back down); for
/// sell-outs a hump opens with a jump of at least `MIN_BULGE_RISE` cells
/// within two rows and may persist to the domain edge, where the true
/// region is unbounded. A notch is a connected pocket of continuation
/// cells carved into the region: gaps interior to a row's span, or — for
/// the sell-out region, whose anchor edge is where selling pressure is
/// greatest — gaps between the `x₂ = 0` edge and the region on rows
/// outside any bulge. The buy-in region carries no anchor-gap rule: its
/// high-`x₂` boundary legitimately recedes at interior times (the patient
/// band above a bulge), which is boundary motion, not a carved pocket.
/// Features smaller than the resolution floor are dropped.
pub fn detect_features(axis: &AxisGrid, labels: &[RegionLabel]) -> Vec<Feature> {
    let n = axis.count;
    assert_eq!(labels.len(), n * n);
    let mut features = Vec::new();
    for region in [RegionLabel::TransferIntoGoal, RegionLabel::TransferOutOfGoal] {
        detect_region_features(axis, labels, region, &mut features);
    }
    features.sort_by(|a, b| {
        (a.region.letter(), a.kind as u8)
            .cmp(&(b.region.letter(), b.kind as u8))
            .then(a.x1_lo.total_cmp(&b.x1_lo))
            .then(a.x2_lo.total_cmp(&b.x2_lo))
    });
    features
}

fn detect_region_features(
    axis: &AxisGrid,
    labels: &[RegionLabel],
    region: RegionLabel,
    features: &mut Vec<Feature>,
) {
    let n = axis.count;
    let in_region: Vec<bool> = labels.iter().map(|&l| l == region).collect();
    if !in_region.iter().any(|&b| b) {
        return;
    }
    let mut bulge_mark = vec![false; n * n];
    let mut notch_mark = vec![false; n * n];

    // Interior pockets: continuation cells strictly inside a row's span.
    for i in 0..n {
        let row = &in_region[i * n..(i + 1) * n];
        let Some(first) = row.iter().position(|&b| b) else {
            continue;
        };
        let last = n - 1 - row.iter().rev().position(|&b| b).unwrap();
        for j in first + 1..last {
            if labels[i * n + j] == RegionLabel::Continue {
                notch_mark[i * n + j] = true;
            }
        }
    }

    match region {
        RegionLabel::TransferIntoGoal => buyin_bulges(n, &in_region, &mut bulge_mark),
        RegionLabel::TransferOutOfGoal => {
            let elevated = sellout_bulges(n, &in_region, &mut bulge_mark);
            sellout_anchor_notches(n, labels, &in_region, &elevated, &mut notch_mark);
        }
        RegionLabel::Continue => unreachable!(),
    }

    emit_components(axis, &bulge_mark, FeatureKind::Bulge, region, features);
    emit_components(axis, &notch_mark, FeatureKind::Notch, region, features);
}

/// Humps of the buy-in reach curve `t(x₂)` = top row per column. The base
/// is the curve's eventual level at the high-`x₂` end; a run of columns
/// rising at least two cells above it, peaking at `MIN_BULGE_RISE` or
/// more and returning to the base further east, marks its above-base
/// cells as a bulge.
fn buyin_bulges(n: usize, in_region: &[bool], mark: &mut [bool]) {
    let top: Vec<Option<usize>> = (0..n)
        .map(|j| (0..n).rev().find(|&i| in_region[i * n + j]))
        .collect();
    let defined: Vec<usize> = (0..n).filter(|&j| top[j].is_some()).collect();
    if defined.len() < 2 {
        return;
    }
    let base = defined
        .iter()
        .rev()
        .take(10)
        .map(|&j| top[j].unwrap())
        .min()
        .unwrap();
    let mut k = 0;
    while k < defined.len() {
        if top[defined[k]].unwrap() < base + 2 {
            k += 1;
            continue;
        }
        let mut k_end = k;
        while k_end + 1 < defined.len()
            && defined[k_end + 1] == defined[k_end] + 1
            && top[defined[k_end + 1]].unwrap() >= base + 2
        {
            k_end += 1;
        }
        let peak = (k..=k_end).map(|q| top[defined[q]].unwrap()).max().unwrap();
        let returns = (k_end + 1..defined.len()).any(|q| top[defined[q]].unwrap() <= base + 1);
        if peak >= base + MIN_BULGE_RISE && returns {
            for q in k..=k_end {
                let j = defined[q];
                for i in base + 1..n {
                    if in_region[i * n + j] {
                        mark[i * n + j] = true;
                    }
                }
            }
        }
        k = k_end + 1;
    }
}

/// Sharp steps of the sell-out reach curve `e(x₁)` = right edge per row.
/// Scanning rows in both directions, a jump of at least `MIN_BULGE_RISE`
/// cells relative to the two preceding rows opens an elevated stretch;
/// its cells beyond the pre-jump level are bulge cells. Returns the
/// elevated row set, which is exempt from anchor-gap notches.
fn sellout_bulges(n: usize, in_region: &[bool], mark: &mut [bool]) -> Vec<bool> {
    let edge: Vec<Option<usize>> = (0..n)
        .map(|i| (0..n).rev().find(|&j| in_region[i * n + j]))
        .collect();
    let mut elevated = vec![false; n];
    let forward: Vec<usize> = (0..n).collect();
    let backward: Vec<usize> = (0..n).rev().collect();
    for order in [&forward, &backward] {
        for w in 2..n {
            let (Some(e), Some(e1), Some(e2)) =
                (edge[order[w]], edge[order[w - 1]], edge[order[w - 2]])
            else {
                continue;
            };
            let base = e1.min(e2);
            if e < base + MIN_BULGE_RISE {
                continue;
            }
            for q in w..n {
                let i = order[q];
                match edge[i] {
                    Some(ei) if ei >= base + MIN_BULGE_RISE => {
                        elevated[i] = true;
                        for j in base + 1..=ei {
                            if in_region[i * n + j] {
                                mark[i * n + j] = true;
                            }
                        }
                    }
                    _ => break,
                }
            }
        }
    }
    elevated
}

/// Continuation gaps between the `x₂ = 0` anchor edge and the sell-out
/// region's first cell, on rows outside bulges. Applied only when the
/// region is anchored overall (at least half its populated rows reach
/// the edge), so that a detached region is not misread as one giant gap.
fn sellout_anchor_notches(
    n: usize,
    labels: &[RegionLabel],
    in_region: &[bool],
    elevated: &[bool],
    mark: &mut [bool],
) {
    let first: Vec<Option<usize>> = (0..n)
        .map(|i| (0..n).find(|&j| in_region[i * n + j]))
        .collect();
    let populated = first.iter().flatten().count();
    let anchored = first.iter().flatten().filter(|&&s| s == 0).count();
    if 2 * anchored < populated {
        return;
    }
    for i in 0..n {
        let Some(s) = first[i] else {
            continue;
        };
        if elevated[i] || s == 0 {
            continue;
        }
        for j in 0..s {
            if labels[i * n + j] == RegionLabel::Continue {
                mark[i * n + j] = true;
            }
        }
    }
}

/// 4-connected component labels over marked cells; −1 for unmarked.
fn components(n: usize, marked: &[bool]) -> Vec<i32> {
    let mut comp = vec![-1i32; n * n];
    let mut next = 0i32;
    let mut stack = Vec::new();
    for start in 0..n * n {
        if !marked[start] || comp[start] >= 0 {
            continue;
        }
        comp[start] = next;
        stack.push(start);
        while let Some(c) = stack.pop() {
            let (i, j) = (c / n, c % n);
            let mut visit = |c2: usize| {
                if marked[c2] && comp[c2] < 0 {
                    comp[c2] = next;
                    stack.push(c2);
                }
            };
            if i > 0 {
                visit(c - n);
            }
            if i + 1 < n {
                visit(c + n);
            }
            if j > 0 {
                visit(c - 1);
            }
            if j + 1 < n {
                visit(c + 1);
            }
        }
        next += 1;
    }
    comp
}

fn emit_components(
    axis: &AxisGrid,
    marked: &[bool],
    kind: FeatureKind,
    region: RegionLabel,
    features: &mut Vec<Feature>,
) {
    let n = axis.count;
    let comp = components(n, marked);
    let max_id = comp.iter().copied().max().unwrap_or(-1);
    for id in 0..=max_id {
        let cells: Vec<usize> = (0..n * n).filter(|&c| comp[c] == id).collect();
        if cells.len() < MIN_FEATURE_CELLS {
            continue;
        }
        let (mut i_lo, mut i_hi, mut j_lo, mut j_hi) = (n, 0usize, n, 0usize);
        for &c in &cells {
            let (i, j) = (c / n, c % n);
            i_lo = i_lo.min(i);
            i_hi = i_hi.max(i);
            j_lo = j_lo.min(j);
            j_hi = j_hi.max(j);
        }
        if i_hi - i_lo + 1 < MIN_FEATURE_SPAN || j_hi - j_lo + 1 < MIN_FEATURE_SPAN {
            continue;
        }
        let half = 0.5 * axis.step;
        features.push(Feature {
            kind,
            region,
            x1_lo: (axis.coord(i_lo) - half).max(axis.min),
            x1_hi: (axis.coord(i_hi) + half).min(axis.max),
            x2_lo: (axis.coord(j_lo) - half).max(axis.min),
            x2_hi: (axis.coord(j_hi) + half).min(axis.max),
            cells: cells.len(),
        });
    }
}
