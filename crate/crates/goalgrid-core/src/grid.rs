//! Uniform wealth/time grids, dense value surfaces, and finite-difference
//! stencils shared by the solver, the policy extractor, and the oracle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Uniform wealth axis `0, step, 2 step, ..., max` with `count` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
    pub count: usize,
}

impl AxisGrid {
    /// Coordinate of node `i`.
    pub fn coord(&self, i: usize) -> f64 {
        self.min + i as f64 * self.step
    }

    /// Nearest node index for an arbitrary coordinate (clamped to the axis).
    pub fn index_of(&self, x: f64) -> usize {
        let i = ((x - self.min) / self.step).round();
        (i.max(0.0) as usize).min(self.count - 1)
    }
}

/// Uniform time nodes `start, start + step, ..., end` (`count` nodes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeLine {
    pub start: f64,
    pub end: f64,
    pub step: f64,
    pub count: usize,
}

impl TimeLine {
    pub fn node(&self, k: usize) -> f64 {
        self.start + k as f64 * self.step
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GridError {
    #[error("nonconforming grid: {reason}")]
    NonconformingGrid { reason: String },
}

/// Number of steps `span / step`, or an error when the division is not an
/// integer to within 1e-9 relative tolerance.
pub fn step_count(span: f64, step: f64, what: &str) -> Result<usize, GridError> {
    if !(step > 0.0) || !(span > 0.0) {
        return Err(GridError::NonconformingGrid {
            reason: format!("{what}: span {span} and step {step} must be positive"),
        });
    }
    let ratio = span / step;
    let rounded = ratio.round();
    if (ratio - rounded).abs() > 1e-9 * ratio.max(1.0) {
        return Err(GridError::NonconformingGrid {
            reason: format!("{what}: step {step} does not divide span {span}"),
        });
    }
    Ok(rounded as usize)
}

/// Build a wealth axis on `[0, x_max]` and a time line on `[t_start, t_end]`.
pub fn build_grid(
    x_max: f64,
    dx: f64,
    t_start: f64,
    t_end: f64,
    dt: f64,
) -> Result<(AxisGrid, TimeLine), GridError> {
    let nx = step_count(x_max, dx, "wealth axis")?;
    let nt = step_count(t_end - t_start, dt, "time line")?;
    Ok((
        AxisGrid {
            min: 0.0,
            max: x_max,
            step: dx,
            count: nx + 1,
        },
        TimeLine {
            start: t_start,
            end: t_end,
            step: dt,
            count: nt + 1,
        },
    ))
}

/// Dense value surface over a time line and one or two wealth axes.
///
/// Storage is time-major then x1-major: `values[(t * n1 + i) * n2 + j]` in two
/// dimensions and `values[t * n1 + i]` in one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueSurface {
    /// 0 = all goals active (two wealth axes), 1 = only the fundamental goal.
    pub period_index: usize,
    pub times: TimeLine,
    pub axes: Vec<AxisGrid>,
    pub values: Vec<f64>,
}

impl ValueSurface {
    pub fn new(period_index: usize, times: TimeLine, axes: Vec<AxisGrid>) -> Self {
        assert!(axes.len() == 1 || axes.len() == 2, "1 or 2 wealth axes");
        let cells: usize = axes.iter().map(|a| a.count).product();
        ValueSurface {
            period_index,
            times,
            axes,
            values: vec![0.0; times.count * cells],
        }
    }

    /// Wealth cells per time slice.
    pub fn cells_per_slice(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    /// Flat index of a cell within one slice.
    pub fn cell_index(&self, ix: &[usize]) -> usize {
        match self.axes.len() {
            1 => ix[0],
            _ => ix[0] * self.axes[1].count + ix[1],
        }
    }

    /// Inverse of `cell_index`.
    pub fn cell_coords(&self, cell: usize) -> Vec<usize> {
        match self.axes.len() {
            1 => vec![cell],
            _ => vec![cell / self.axes[1].count, cell % self.axes[1].count],
        }
    }

    pub fn slice(&self, t_idx: usize) -> &[f64] {
        let n = self.cells_per_slice();
        &self.values[t_idx * n..(t_idx + 1) * n]
    }

    pub fn slice_mut(&mut self, t_idx: usize) -> &mut [f64] {
        let n = self.cells_per_slice();
        &mut self.values[t_idx * n..(t_idx + 1) * n]
    }

    pub fn at(&self, t_idx: usize, ix: &[usize]) -> f64 {
        self.slice(t_idx)[self.cell_index(ix)]
    }
}

/// Finite differences of a slice around one cell.
///
/// First differences are one-sided in both directions, second differences are
/// central, the mixed difference is the standard 4-point central cross. At the
/// axis ends missing neighbors fall back to the one-sided first-order variant.
/// `diag` holds the second differences along the two lattice diagonals
/// `(+1,+1)` and `(+1,-1)`; together with `second` they reconstruct the two
/// sign-adapted (monotone) mixed quotients
/// `cross_p = (diag[0] - second[0] - second[1]) / 2` and
/// `cross_m = (second[0] + second[1] - diag[1]) / 2`,
/// both of which equal `cross` on quadratic surfaces.
/// `ray_in` / `ray_out` hold the neighbor values one transfer step along the
/// ray `(+dx, -dx)` / `(-dx, +dx)` when those cells exist (two axes only).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub value: f64,
    pub fwd: [f64; 2],
    pub bwd: [f64; 2],
    pub second: [f64; 2],
    pub cross: f64,
    pub diag: [f64; 2],
    pub ray_in: Option<f64>,
    pub ray_out: Option<f64>,
    pub axes: usize,
}

/// Differences of `slice` (over `axes`) at the cell with indices `ix`.
pub fn stencil_at(axes: &[AxisGrid], slice: &[f64], ix: &[usize]) -> Stencil {
    debug_assert_eq!(axes.len(), ix.len());
    let dim = axes.len();
    let mut st = Stencil {
        value: 0.0,
        fwd: [0.0; 2],
        bwd: [0.0; 2],
        second: [0.0; 2],
        cross: 0.0,
        diag: [0.0; 2],
        ray_in: None,
        ray_out: None,
        axes: dim,
    };
    // Value lookup with multi-index offsets.
    let n2 = if dim == 2 { axes[1].count } else { 1 };
    let flat = |i: usize, j: usize| -> f64 {
        if dim == 2 {
            slice[i * n2 + j]
        } else {
            slice[i]
        }
    };
    let (i0, j0) = (ix[0], if dim == 2 { ix[1] } else { 0 });
    st.value = flat(i0, j0);

    for axis in 0..dim {
        let n = axes[axis].count;
        let h = axes[axis].step;
        let at = |k: usize| -> f64 {
            if axis == 0 {
                flat(k, j0)
            } else {
                flat(i0, k)
            }
        };
        let c = if axis == 0 { i0 } else { j0 };
        assert!(n >= 3, "stencil needs at least three nodes per axis");
        let fwd = if c + 1 < n {
            (at(c + 1) - at(c)) / h
        } else {
            (at(c) - at(c - 1)) / h
        };
        let bwd = if c > 0 {
            (at(c) - at(c - 1)) / h
        } else {
            (at(c + 1) - at(c)) / h
        };
        // Central second difference, shifted one node inward at the ends.
        let m = c.clamp(1, n - 2);
        let second = (at(m + 1) - 2.0 * at(m) + at(m - 1)) / (h * h);
        st.fwd[axis] = fwd;
        st.bwd[axis] = bwd;
        st.second[axis] = second;
    }

    if dim == 2 {
        let (n1, n2c) = (axes[0].count, axes[1].count);
        let (h1, h2) = (axes[0].step, axes[1].step);
        // d/dx1 of the central x2-difference, one-sided where a row or column
        // is missing.
        let (ilo, ihi) = if i0 == 0 {
            (0, 1)
        } else if i0 == n1 - 1 {
            (n1 - 2, n1 - 1)
        } else {
            (i0 - 1, i0 + 1)
        };
        let (jlo, jhi) = if j0 == 0 {
            (0, 1)
        } else if j0 == n2c - 1 {
            (n2c - 2, n2c - 1)
        } else {
            (j0 - 1, j0 + 1)
        };
        let span1 = (ihi - ilo) as f64 * h1;
        let span2 = (jhi - jlo) as f64 * h2;
        st.cross = (flat(ihi, jhi) - flat(ihi, jlo) - flat(ilo, jhi) + flat(ilo, jlo))
            / (span1 * span2);
        // Diagonal second differences, shifted one node inward at the ends
        // like the axis second differences.
        let mi = i0.clamp(1, n1 - 2);
        let mj = j0.clamp(1, n2c - 2);
        let hh = h1 * h2;
        st.diag[0] =
            (flat(mi + 1, mj + 1) - 2.0 * flat(mi, mj) + flat(mi - 1, mj - 1)) / hh;
        st.diag[1] =
            (flat(mi + 1, mj - 1) - 2.0 * flat(mi, mj) + flat(mi - 1, mj + 1)) / hh;
        if i0 + 1 < n1 && j0 > 0 {
            st.ray_in = Some(flat(i0 + 1, j0 - 1));
        }
        if i0 > 0 && j0 + 1 < n2c {
            st.ray_out = Some(flat(i0 - 1, j0 + 1));
        }
    }
    st
}

/// CSV rendering of a surface: header `t,x1,x2,value` (or `t,x,value`), fixed
/// six-decimal formatting, rows time-major then x1-major.
pub fn surface_to_csv(surface: &ValueSurface) -> String {
    let mut out = String::new();
    match surface.axes.len() {
        1 => {
            out.push_str("t,x,value\n");
            for t_idx in 0..surface.times.count {
                let t = surface.times.node(t_idx);
                let slice = surface.slice(t_idx);
                for (i, v) in slice.iter().enumerate() {
                    let x = surface.axes[0].coord(i);
                    out.push_str(&format!("{t:.6},{x:.6},{v:.6}\n"));
                }
            }
        }
        _ => {
            out.push_str("t,x1,x2,value\n");
            let n2 = surface.axes[1].count;
            for t_idx in 0..surface.times.count {
                let t = surface.times.node(t_idx);
                let slice = surface.slice(t_idx);
                for i in 0..surface.axes[0].count {
                    let x1 = surface.axes[0].coord(i);
                    for j in 0..n2 {
                        let x2 = surface.axes[1].coord(j);
                        let v = slice[i * n2 + j];
                        out.push_str(&format!("{t:.6},{x1:.6},{x2:.6},{v:.6}\n"));
                    }
                }
            }
        }
    }
    out
}
