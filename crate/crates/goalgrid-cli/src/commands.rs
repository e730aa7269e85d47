//! Command implementations.
//!
//! Every command is self-contained: it loads the configuration, performs the
//! full backward pass it needs in memory, and writes its artifacts into
//! `<output_dir>/<run_id>/` together with the canonical configuration echo.
//! Artifacts are deterministic byte-for-byte given (configuration, seed):
//! surfaces and region maps use fixed six-decimal CSV formatting, JSON uses a
//! fixed field order, and the simulator is bitwise reproducible regardless of
//! thread count.

use crate::config::{echo, run_id, ConfigError, RunConfig};
use goalgrid_core::grid::surface_to_csv;
use goalgrid_core::hjb::SolveError;
use goalgrid_core::model::supersolution_bound;
use goalgrid_core::oracle::{dp_value, NoiseModel, OracleError};
use goalgrid_core::regions::{
    detect_features, extract_thresholds, labels_from_plans, FeatureKind, RegionError, RegionLabel,
};
use goalgrid_core::simulate::{run_policy, run_policy_traced, SimError};
use goalgrid_core::solve::{solve_full, SolveOutput};
use serde::Serialize;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    /// Stable machine-readable error category for the stderr JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(ConfigError::Parse { .. }) => "parse",
            CliError::Config(ConfigError::Validation { .. }) => "validation",
            CliError::Solve(_) => "solve",
            CliError::Sim(_) => "simulate",
            CliError::Oracle(_) => "oracle",
            CliError::Region(_) => "regions",
            CliError::Io(_) => "io",
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Create the content-addressed run directory and drop the canonical
/// configuration into it. Returns the directory and the echoed document.
fn prepare_dir(cfg: &RunConfig) -> Result<(PathBuf, String), CliError> {
    let doc = echo(cfg);
    let dir = cfg.output_dir.join(run_id(&doc));
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    write_file(&dir, "config.cfg", doc.as_bytes())?;
    Ok((dir, doc))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| io_err(&path, e))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("{name}: {e}")))?;
    text.push('\n');
    write_file(dir, name, text.as_bytes())
}

#[derive(Serialize)]
struct PerPeriod<T> {
    two_goal: T,
    last_period: T,
}

#[derive(Serialize)]
struct SolveReport<'a> {
    config: &'a str,
    surfaces: PerPeriod<&'static str>,
    iterations: PerPeriod<&'a [u32]>,
    max_residuals: PerPeriod<&'a [f64]>,
}

/// Full backward pass; writes both value surfaces and the solve report.
pub fn cmd_solve(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = solve_full(&cfg.market, &cfg.ladder, &cfg.grid, &cfg.solver)?;
    let (dir, doc) = prepare_dir(cfg)?;
    write_file(&dir, "surface_two_goal.csv", surface_to_csv(&out.two_goal.surface).as_bytes())?;
    write_file(&dir, "surface_last_period.csv", surface_to_csv(&out.last.surface).as_bytes())?;
    let report = SolveReport {
        config: &doc,
        surfaces: PerPeriod {
            two_goal: "surface_two_goal.csv",
            last_period: "surface_last_period.csv",
        },
        iterations: PerPeriod {
            two_goal: &out.two_goal.iterations,
            last_period: &out.last.iterations,
        },
        max_residuals: PerPeriod {
            two_goal: &out.two_goal.max_residuals,
            last_period: &out.last.max_residuals,
        },
    };
    write_json(&dir, "solve_report.json", &report)?;
    Ok(dir)
}

/// Region labels of every two-goal slice plus the deadline transfer plan,
/// as `t,x1,x2,label` rows.
fn regions_csv(out: &SolveOutput) -> String {
    let mut s = String::from("t,x1,x2,label\n");
    let nt = out.times_two_goal.count;
    for k in 0..nt {
        let t = out.times_two_goal.node(k);
        let labels = slice_labels(out, k);
        push_label_rows(&mut s, out, t, &labels);
    }
    s
}

fn push_label_rows(s: &mut String, out: &SolveOutput, t: f64, labels: &[RegionLabel]) {
    let n = out.axis.count;
    for (c, l) in labels.iter().enumerate() {
        let x1 = out.axis.coord(c / n);
        let x2 = out.axis.coord(c % n);
        writeln!(s, "{t:.6},{x1:.6},{x2:.6},{}", l.letter()).unwrap();
    }
}

/// Labels of slice `k`: solver labels for interior slices, the coupling
/// transfer plan at the deadline itself.
fn slice_labels(out: &SolveOutput, k: usize) -> Vec<RegionLabel> {
    if k + 1 < out.times_two_goal.count {
        out.two_goal.labels_at(k).to_vec()
    } else {
        labels_from_plans(&out.coupled)
    }
}

#[derive(Serialize)]
struct ThresholdsJson {
    sellback_target: f64,
    transferin_floor: f64,
    surplus_cap: f64,
}

#[derive(Serialize)]
struct FeatureJson {
    t: f64,
    kind: &'static str,
    region: char,
    x1_lo: f64,
    x1_hi: f64,
    x2_lo: f64,
    x2_hi: f64,
    cells: usize,
}

/// Free-boundary artifacts: region CSV over all slices, deadline thresholds,
/// and the feature list (bulges and notches) per slice.
pub fn cmd_boundary(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = solve_full(&cfg.market, &cfg.ladder, &cfg.grid, &cfg.solver)?;
    let (dir, _) = prepare_dir(cfg)?;
    write_file(&dir, "regions.csv", regions_csv(&out).as_bytes())?;
    let r = extract_thresholds(&out.coupled, &out.ladder)?;
    write_json(
        &dir,
        "thresholds.json",
        &ThresholdsJson {
            sellback_target: r.sellback_target,
            transferin_floor: r.transferin_floor,
            surplus_cap: r.surplus_cap,
        },
    )?;
    let mut features = Vec::new();
    for k in 0..out.times_two_goal.count {
        let t = out.times_two_goal.node(k);
        for f in detect_features(&out.axis, &slice_labels(&out, k)) {
            features.push(FeatureJson {
                t,
                kind: match f.kind {
                    FeatureKind::Bulge => "bulge",
                    FeatureKind::Notch => "notch",
                },
                region: f.region.letter(),
                x1_lo: f.x1_lo,
                x1_hi: f.x1_hi,
                x2_lo: f.x2_lo,
                x2_hi: f.x2_hi,
                cells: f.cells,
            });
        }
    }
    write_json(&dir, "features.json", &features)?;
    Ok(dir)
}

#[derive(Serialize)]
struct BreakdownJson<'a> {
    shortfalls: &'a [f64],
    transfer_in_cost: f64,
    transfer_out_cost: f64,
}

#[derive(Serialize)]
struct SimResultJson<'a> {
    mean_objective: f64,
    std_error: f64,
    n_paths: usize,
    breakdown: BreakdownJson<'a>,
}

/// Execute the stored policy on simulated paths; optionally write a per-path
/// event trace.
pub fn cmd_simulate(cfg: &RunConfig, trace: bool) -> Result<PathBuf, CliError> {
    let sim = cfg
        .sim
        .as_ref()
        .ok_or_else(|| ConfigError::Validation {
            msg: "simulate requires a [sim] section".into(),
        })?;
    let out = solve_full(&cfg.market, &cfg.ladder, &cfg.grid, &cfg.solver)?;
    let (dir, _) = prepare_dir(cfg)?;
    let result = if trace {
        let mut buf = Vec::new();
        let r = run_policy_traced(&out, sim, &mut buf)?;
        write_file(&dir, "trace.csv", &buf)?;
        r
    } else {
        run_policy(&out, sim)?
    };
    write_json(
        &dir,
        "sim_result.json",
        &SimResultJson {
            mean_objective: result.mean_objective,
            std_error: result.std_error,
            n_paths: result.n_paths,
            breakdown: BreakdownJson {
                shortfalls: &result.breakdown.shortfalls,
                transfer_in_cost: result.breakdown.transfer_in_cost,
                transfer_out_cost: result.breakdown.transfer_out_cost,
            },
        },
    )?;
    Ok(dir)
}

fn grid2_csv(out: &SolveOutput, t: f64, values: &[f64]) -> String {
    let mut s = String::from("t,x1,x2,value\n");
    let n = out.axis.count;
    for (c, v) in values.iter().enumerate() {
        let x1 = out.axis.coord(c / n);
        let x2 = out.axis.coord(c % n);
        writeln!(s, "{t:.6},{x1:.6},{x2:.6},{v:.6}").unwrap();
    }
    s
}

fn grid1_csv(out: &SolveOutput, t: f64, values: &[f64]) -> String {
    let mut s = String::from("t,x,value\n");
    for (i, v) in values.iter().enumerate() {
        writeln!(s, "{t:.6},{:.6},{v:.6}", out.axis.coord(i)).unwrap();
    }
    s
}

#[derive(Serialize)]
struct OracleSummary {
    sup_diff_t0: f64,
    sup_diff_t1_before: f64,
    sup_diff_t1_after: f64,
    corner_value: f64,
    corner_exact: bool,
    tolerance: f64,
    within_tolerance: bool,
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Independent brute-force dynamic program on the configured coarse grid,
/// compared against the finite-difference solve layer by layer.
pub fn cmd_oracle(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    if cfg.grid.dx < 0.5 {
        return Err(ConfigError::Validation {
            msg: format!(
                "oracle runs need a coarse wealth grid (dx ≥ 0.5, got {})",
                cfg.grid.dx
            ),
        }
        .into());
    }
    let out = solve_full(&cfg.market, &cfg.ladder, &cfg.grid, &cfg.solver)?;
    // The enumeration stays tractable only with coarse decision epochs; a
    // finer PDE time step is not imposed on the oracle.
    let dt1 = cfg.grid.dt_two_goal.max(0.25);
    let dt2 = cfg.grid.dt_last.max(0.25);
    let dp = dp_value(
        &cfg.market,
        &cfg.ladder,
        &out.axis,
        dt1,
        dt2,
        cfg.solver.allocation_step_coarse,
        NoiseModel::TwoPoint,
    )?;
    let (dir, _) = prepare_dir(cfg)?;
    let t1 = cfg.ladder.goals[0].deadline;
    write_file(&dir, "oracle_t0.csv", grid2_csv(&out, 0.0, &dp.t0).as_bytes())?;
    write_file(&dir, "oracle_t1_before.csv", grid2_csv(&out, t1, &dp.t1_before).as_bytes())?;
    write_file(&dir, "oracle_t1_after.csv", grid1_csv(&out, t1, &dp.t1_after).as_bytes())?;
    let sup0 = sup_diff(&dp.t0, out.two_goal.surface.slice(0));
    let sup_before = sup_diff(&dp.t1_before, &out.coupled.values);
    let sup_after = sup_diff(&dp.t1_after, out.last.surface.slice(0));
    let bound = supersolution_bound(&cfg.ladder, &cfg.market, 0, 0.0);
    let tolerance = 0.15;
    let summary = OracleSummary {
        sup_diff_t0: sup0,
        sup_diff_t1_before: sup_before,
        sup_diff_t1_after: sup_after,
        corner_value: dp.t0[0],
        corner_exact: dp.t0[0] == bound && out.two_goal.surface.slice(0)[0] == bound,
        tolerance,
        within_tolerance: sup0 <= tolerance && sup_before <= tolerance && sup_after <= tolerance,
    };
    write_json(&dir, "oracle_summary.json", &summary)?;
    Ok(dir)
}

/// Plot-ready tables: region maps at the deadline and one step before it,
/// the last-period allocation curve at the deadline, and the two-portfolio
/// strategy-code map one step before it.
pub fn cmd_export(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = solve_full(&cfg.market, &cfg.ladder, &cfg.grid, &cfg.solver)?;
    let (dir, _) = prepare_dir(cfg)?;
    let nt = out.times_two_goal.count;
    let t1 = out.times_two_goal.node(nt - 1);

    let mut deadline = String::from("t,x1,x2,label\n");
    push_label_rows(&mut deadline, &out, t1, &labels_from_plans(&out.coupled));
    write_file(&dir, "regions_deadline.csv", deadline.as_bytes())?;

    let k_pre = nt - 2;
    let t_pre = out.times_two_goal.node(k_pre);
    let mut pre = String::from("t,x1,x2,label\n");
    push_label_rows(&mut pre, &out, t_pre, out.two_goal.labels_at(k_pre));
    write_file(&dir, "regions_predeadline.csv", pre.as_bytes())?;

    // Optimal proportions of the lone remaining portfolio at the deadline.
    let mut alpha = String::from("x2,alpha_1,alpha_2\n");
    let codes = out.last.codes_at(0);
    for i in 0..out.axis.count {
        let w = out.last.policy_grid.weights(codes[i] as usize);
        writeln!(alpha, "{:.6},{:.6},{:.6}", out.axis.coord(i), w[0], w[1]).unwrap();
    }
    write_file(&dir, "alpha_last_period.csv", alpha.as_bytes())?;

    let mut strat = String::from("x1,x2,label,code_1,code_2,alpha1_1,alpha1_2,alpha2_1,alpha2_2\n");
    let codes = out.two_goal.codes_at(k_pre);
    let labels = out.two_goal.labels_at(k_pre);
    let n = out.axis.count;
    for c in 0..codes.len() {
        let [c1, c2] = codes[c];
        let w1 = out.two_goal.policy_grid.weights(c1 as usize);
        let w2 = out.two_goal.policy_grid.weights(c2 as usize);
        writeln!(
            strat,
            "{:.6},{:.6},{},{c1},{c2},{:.6},{:.6},{:.6},{:.6}",
            out.axis.coord(c / n),
            out.axis.coord(c % n),
            labels[c].letter(),
            w1[0],
            w1[1],
            w2[0],
            w2[1],
        )
        .unwrap();
    }
    write_file(&dir, "strategy_codes_predeadline.csv", strat.as_bytes())?;
    Ok(dir)
}
