//! Declarative run configuration.
//!
//! A run is described by a flat sectioned key–value document:
//!
//! ```text
//! [market]            risk_free, discount, drift_1, drift_2, vol_1, vol_2,
//!                     correlation — all required
//! [goals.N]           N = 1, 2, …: target, deadline required; weight
//!                     defaults to 1; penalty_in / penalty_out required for
//!                     every goal except the last (the fundamental goal has
//!                     no outgoing transfers)
//! [grid]              x_max, dx, dt_two_goal, dt_last — all required
//! [solver]            optional; omitted knobs take their defaults
//! [sim]               optional; seed, n_paths, initial_1, initial_2
//!                     required, dt optional (defaults to a tenth of the
//!                     active solver step)
//! ```
//!
//! `#` and `;` start comment lines; unknown sections or keys are rejected
//! with the offending line. `echo` renders the loaded configuration back in
//! canonical form (fixed section order, every default made explicit), and
//! `load(echo(load(text)))` is a fixed point. Run directories are
//! content-addressed by `run_id`, a hash of the canonical form.

use goalgrid_core::hjb::SolverConfig;
use goalgrid_core::model::{
    validate_ladder, validate_market, GoalLadder, GoalSpec, MarketParams,
};
use goalgrid_core::simulate::SimConfig;
use goalgrid_core::solve::GridSpec;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    /// The document does not follow the key–value schema.
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// The document parses but describes an invalid run.
    #[error("{msg}")]
    Validation { msg: String },
}

fn parse_err(line: usize, msg: impl Into<String>) -> ConfigError {
    ConfigError::Parse {
        line,
        msg: msg.into(),
    }
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Validation { msg: msg.into() }
}

/// Everything one command invocation needs: model, discretization, solver
/// knobs, optional simulation block, and the artifact destination.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub market: MarketParams,
    pub ladder: GoalLadder,
    pub grid: GridSpec,
    pub solver: SolverConfig,
    pub sim: Option<SimConfig>,
    /// Base directory for run artifacts; not part of the document (set from
    /// `--out`, default `runs`), so the run hash identifies parameters only.
    pub output_dir: PathBuf,
}

struct Entry {
    key: String,
    value: String,
    line: usize,
}

struct Section {
    name: String,
    line: usize,
    entries: Vec<Entry>,
}

impl Section {
    /// Reject the first key outside the schema. Runs before any value is
    /// read so a typo is reported as the typo, not as a missing key.
    fn allow(&self, keys: &[&str]) -> Result<(), ConfigError> {
        if let Some(e) = self.entries.iter().find(|e| !keys.contains(&e.key.as_str())) {
            return Err(parse_err(
                e.line,
                format!("unknown key `{}` in [{}]", e.key, self.name),
            ));
        }
        Ok(())
    }

    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries
            .iter()
            .find(|e| e.key == key)
            .map(|e| (e.value.clone(), e.line))
    }

    fn opt_f64(&mut self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some((v, line)) => {
                let x: f64 = v
                    .parse()
                    .map_err(|_| parse_err(line, format!("`{key}`: expected a number, got `{v}`")))?;
                if !x.is_finite() {
                    return Err(parse_err(line, format!("`{key}`: must be finite, got `{v}`")));
                }
                Ok(Some(x))
            }
        }
    }

    fn req_f64(&mut self, key: &str) -> Result<f64, ConfigError> {
        self.opt_f64(key)?
            .ok_or_else(|| invalid(format!("[{}] is missing `{key}`", self.name)))
    }

    fn opt_int<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some((v, line)) => v.parse::<T>().map(Some).map_err(|_| {
                parse_err(line, format!("`{key}`: expected a nonnegative integer, got `{v}`"))
            }),
        }
    }

    fn req_int<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, ConfigError> {
        self.opt_int(key)?
            .ok_or_else(|| invalid(format!("[{}] is missing `{key}`", self.name)))
    }
}

fn split_sections(text: &str) -> Result<Vec<Section>, ConfigError> {
    let mut sections: Vec<Section> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with(';') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| parse_err(line, "unterminated section header"))?
                .trim();
            if name.is_empty() {
                return Err(parse_err(line, "empty section name"));
            }
            if sections.iter().any(|s| s.name == name) {
                return Err(parse_err(line, format!("duplicate section [{name}]")));
            }
            sections.push(Section {
                name: name.to_string(),
                line,
                entries: Vec::new(),
            });
            continue;
        }
        let Some((k, v)) = trimmed.split_once('=') else {
            return Err(parse_err(line, format!("expected `key = value`, got `{trimmed}`")));
        };
        let (key, value) = (k.trim(), v.trim());
        if key.is_empty() {
            return Err(parse_err(line, "empty key"));
        }
        let Some(section) = sections.last_mut() else {
            return Err(parse_err(line, "key–value pair before any [section] header"));
        };
        if section.entries.iter().any(|e| e.key == key) {
            return Err(parse_err(
                line,
                format!("duplicate key `{key}` in [{}]", section.name),
            ));
        }
        section.entries.push(Entry {
            key: key.to_string(),
            value: value.to_string(),
            line,
        });
    }
    Ok(sections)
}

/// Parse and validate a configuration document. Market and ladder checks are
/// delegated to the model layer; grid conformity to the grid builder.
pub fn load_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut market_s = None;
    let mut grid_s = None;
    let mut solver_s = None;
    let mut sim_s = None;
    let mut goal_sections: Vec<(usize, Section)> = Vec::new();
    for s in split_sections(text)? {
        match s.name.as_str() {
            "market" => market_s = Some(s),
            "grid" => grid_s = Some(s),
            "solver" => solver_s = Some(s),
            "sim" => sim_s = Some(s),
            name => {
                if let Some(num) = name.strip_prefix("goals.") {
                    let k: usize = num.parse().map_err(|_| {
                        parse_err(s.line, format!("bad goal index in [{name}]"))
                    })?;
                    if k == 0 {
                        return Err(parse_err(s.line, "goal sections are numbered from 1"));
                    }
                    goal_sections.push((k, s));
                } else {
                    return Err(parse_err(s.line, format!("unknown section [{name}]")));
                }
            }
        }
    }

    let mut ms = market_s.ok_or_else(|| invalid("missing [market] section"))?;
    ms.allow(&[
        "risk_free",
        "discount",
        "drift_1",
        "drift_2",
        "vol_1",
        "vol_2",
        "correlation",
    ])?;
    let market = MarketParams {
        risk_free: ms.req_f64("risk_free")?,
        discount: ms.req_f64("discount")?,
        drift: [ms.req_f64("drift_1")?, ms.req_f64("drift_2")?],
        vol_1: ms.req_f64("vol_1")?,
        vol_2: ms.req_f64("vol_2")?,
        correlation: ms.req_f64("correlation")?,
    };

    goal_sections.sort_by_key(|(k, _)| *k);
    if goal_sections.is_empty() {
        return Err(invalid("missing [goals.N] sections"));
    }
    for (pos, (k, s)) in goal_sections.iter().enumerate() {
        if *k != pos + 1 {
            return Err(parse_err(
                s.line,
                "goal sections must be numbered contiguously from 1",
            ));
        }
    }
    let count = goal_sections.len();
    let mut goals = Vec::with_capacity(count);
    for (k, mut s) in goal_sections {
        let last = k == count;
        s.allow(&["target", "deadline", "weight", "penalty_in", "penalty_out"])?;
        let goal = GoalSpec {
            target: s.req_f64("target")?,
            deadline: s.req_f64("deadline")?,
            weight: s.opt_f64("weight")?.unwrap_or(1.0),
            // The fundamental goal never transfers, so its penalties are
            // optional; every dated goal must state both.
            penalty_in: match s.opt_f64("penalty_in")? {
                Some(x) => x,
                None if last => 0.0,
                None => return Err(invalid(format!("[goals.{k}] is missing `penalty_in`"))),
            },
            penalty_out: match s.opt_f64("penalty_out")? {
                Some(x) => x,
                None if last => 0.0,
                None => return Err(invalid(format!("[goals.{k}] is missing `penalty_out`"))),
            },
        };
        goals.push(goal);
    }
    let ladder = GoalLadder { goals };

    let mut gs = grid_s.ok_or_else(|| invalid("missing [grid] section"))?;
    gs.allow(&["x_max", "dx", "dt_two_goal", "dt_last"])?;
    let grid = GridSpec {
        x_max: gs.req_f64("x_max")?,
        dx: gs.req_f64("dx")?,
        dt_two_goal: gs.req_f64("dt_two_goal")?,
        dt_last: gs.req_f64("dt_last")?,
    };

    let mut solver = SolverConfig::default();
    if let Some(mut ss) = solver_s {
        ss.allow(&[
            "penalty_scale",
            "policy_tol",
            "max_policy_iters",
            "allocation_step_fine",
            "allocation_step_coarse",
        ])?;
        if let Some(x) = ss.opt_f64("penalty_scale")? {
            solver.penalty_scale = x;
        }
        if let Some(x) = ss.opt_f64("policy_tol")? {
            solver.policy_tol = x;
        }
        if let Some(x) = ss.opt_int::<usize>("max_policy_iters")? {
            solver.max_policy_iters = x;
        }
        if let Some(x) = ss.opt_f64("allocation_step_fine")? {
            solver.allocation_step_fine = x;
        }
        if let Some(x) = ss.opt_f64("allocation_step_coarse")? {
            solver.allocation_step_coarse = x;
        }
    }

    let sim = match sim_s {
        None => None,
        Some(mut ss) => {
            ss.allow(&["seed", "n_paths", "dt", "initial_1", "initial_2"])?;
            let cfg = SimConfig {
                seed: ss.req_int::<u64>("seed")?,
                n_paths: ss.req_int::<usize>("n_paths")?,
                dt: ss.opt_f64("dt")?,
                initial: [ss.req_f64("initial_1")?, ss.req_f64("initial_2")?],
            };
            if cfg.n_paths == 0 {
                return Err(invalid("[sim] n_paths must be at least 1"));
            }
            if cfg.initial.iter().any(|&x| x < 0.0) {
                return Err(invalid("[sim] initial wealth must be nonnegative"));
            }
            Some(cfg)
        }
    };

    let to_invalid = |e: goalgrid_core::model::ModelError| invalid(e.to_string());
    validate_market(&market).map_err(to_invalid)?;
    validate_ladder(&ladder).map_err(to_invalid)?;
    // Grid conformity: both period meshes must build cleanly.
    let t1 = ladder.goals[0].deadline;
    let t_end = ladder.goals.last().unwrap().deadline;
    goalgrid_core::grid::build_grid(grid.x_max, grid.dx, 0.0, t1, grid.dt_two_goal)
        .map_err(|e| invalid(e.to_string()))?;
    goalgrid_core::grid::build_grid(grid.x_max, grid.dx, t1, t_end, grid.dt_last)
        .map_err(|e| invalid(e.to_string()))?;

    Ok(RunConfig {
        market,
        ladder,
        grid,
        solver,
        sim,
        output_dir: PathBuf::from("runs"),
    })
}

/// Canonical rendering: fixed section and key order, defaults explicit,
/// shortest round-trip number formatting. `load(echo(c))` reproduces `c`.
pub fn echo(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let m = &cfg.market;
    writeln!(s, "[market]").unwrap();
    writeln!(s, "risk_free = {}", m.risk_free).unwrap();
    writeln!(s, "discount = {}", m.discount).unwrap();
    writeln!(s, "drift_1 = {}", m.drift[0]).unwrap();
    writeln!(s, "drift_2 = {}", m.drift[1]).unwrap();
    writeln!(s, "vol_1 = {}", m.vol_1).unwrap();
    writeln!(s, "vol_2 = {}", m.vol_2).unwrap();
    writeln!(s, "correlation = {}", m.correlation).unwrap();
    for (i, g) in cfg.ladder.goals.iter().enumerate() {
        writeln!(s, "\n[goals.{}]", i + 1).unwrap();
        writeln!(s, "target = {}", g.target).unwrap();
        writeln!(s, "deadline = {}", g.deadline).unwrap();
        writeln!(s, "weight = {}", g.weight).unwrap();
        writeln!(s, "penalty_in = {}", g.penalty_in).unwrap();
        writeln!(s, "penalty_out = {}", g.penalty_out).unwrap();
    }
    let g = &cfg.grid;
    writeln!(s, "\n[grid]").unwrap();
    writeln!(s, "x_max = {}", g.x_max).unwrap();
    writeln!(s, "dx = {}", g.dx).unwrap();
    writeln!(s, "dt_two_goal = {}", g.dt_two_goal).unwrap();
    writeln!(s, "dt_last = {}", g.dt_last).unwrap();
    let sv = &cfg.solver;
    writeln!(s, "\n[solver]").unwrap();
    writeln!(s, "penalty_scale = {}", sv.penalty_scale).unwrap();
    writeln!(s, "policy_tol = {}", sv.policy_tol).unwrap();
    writeln!(s, "max_policy_iters = {}", sv.max_policy_iters).unwrap();
    writeln!(s, "allocation_step_fine = {}", sv.allocation_step_fine).unwrap();
    writeln!(s, "allocation_step_coarse = {}", sv.allocation_step_coarse).unwrap();
    if let Some(sim) = &cfg.sim {
        writeln!(s, "\n[sim]").unwrap();
        writeln!(s, "seed = {}", sim.seed).unwrap();
        writeln!(s, "n_paths = {}", sim.n_paths).unwrap();
        if let Some(dt) = sim.dt {
            writeln!(s, "dt = {dt}").unwrap();
        }
        writeln!(s, "initial_1 = {}", sim.initial[0]).unwrap();
        writeln!(s, "initial_2 = {}", sim.initial[1]).unwrap();
    }
    s
}

/// Content address of a canonical configuration: first 16 hex digits of its
/// SHA-256, enough to identify a run directory.
pub fn run_id(echoed: &str) -> String {
    let digest = Sha256::digest(echoed.as_bytes());
    let mut s = String::with_capacity(16);
    for b in &digest[..8] {
        write!(s, "{b:02x}").unwrap();
    }
    s
}
