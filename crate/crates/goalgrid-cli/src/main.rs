//! `goalgrid` binary: parse arguments, set up the worker pool, dispatch to
//! a command, and print the run directory on success. Failures emit one
//! machine-readable JSON object on stderr and a nonzero exit status.

use clap::{Args, Parser, Subcommand};
use goalgrid_cli::commands::{
    cmd_boundary, cmd_export, cmd_oracle, cmd_simulate, cmd_solve, CliError,
};
use goalgrid_cli::config::{load_config, ConfigError, RunConfig};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "goalgrid", version, about = "Goal-based portfolio solver with transfer penalties")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration document.
    #[arg(long)]
    config: PathBuf,
    /// Base directory for run artifacts (default: `runs`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the simulation seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve both periods and write value surfaces and the solve report.
    Solve(RunArgs),
    /// Write region maps, deadline thresholds, and free-boundary features.
    Boundary(RunArgs),
    /// Execute the stored policy on simulated wealth paths.
    Simulate {
        #[command(flatten)]
        args: RunArgs,
        /// Also write a per-path event trace CSV.
        #[arg(long)]
        trace: bool,
    },
    /// Cross-check the solver against a brute-force dynamic program.
    Oracle(RunArgs),
    /// Write plot-ready region maps and allocation tables.
    Export(RunArgs),
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let payload =
            serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let (args, trace) = match &cli.command {
        Command::Solve(a) | Command::Boundary(a) | Command::Oracle(a) | Command::Export(a) => {
            (a, false)
        }
        Command::Simulate { args, trace } => (args, *trace),
    };
    let cfg = load_run(args)?;
    let dir = match &cli.command {
        Command::Solve(_) => cmd_solve(&cfg)?,
        Command::Boundary(_) => cmd_boundary(&cfg)?,
        Command::Simulate { .. } => cmd_simulate(&cfg, trace)?,
        Command::Oracle(_) => cmd_oracle(&cfg)?,
        Command::Export(_) => cmd_export(&cfg)?,
    };
    println!("{}", dir.display());
    Ok(())
}

fn load_run(args: &RunArgs) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Io(format!("{}: {e}", args.config.display())))?;
    let mut cfg = load_config(&text)?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    // The seed only affects simulation; it participates in the run hash
    // through the echoed [sim] section.
    if let (Some(seed), Some(sim)) = (args.seed, cfg.sim.as_mut()) {
        sim.seed = seed;
    }
    Ok(cfg)
}

/// `GOALGRID_THREADS` caps the rayon worker count; 0 or unset means
/// automatic sizing.
fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("GOALGRID_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        CliError::Config(ConfigError::Validation {
            msg: format!("GOALGRID_THREADS must be a nonnegative integer, got `{raw}`"),
        })
    })?;
    if n > 0 {
        // Failure here means a pool already exists, which is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}
