//! `gbsde`: scenario-tree experiments for backward equations under
//! volatility uncertainty.
//!
//! Exit codes: 0 all checks passed, 1 an asserted check failed, 2 parse
//! error, 3 configuration or precondition error, 4 resource limit hit.

mod commands;
mod report;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};
use gbsde::config::ExperimentConfig;
use gbsde::{Error, Result};
use sha2::{Digest, Sha256};

use report::{write_csv, RunReport};

#[derive(Parser)]
#[command(name = "gbsde", version, about = "Scenario-tree numerics for BSDEs under volatility uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment config (schema = 1).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for JSON/CSV outputs.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Write the full JSON report to OUT/<command>.json.
    #[arg(long, global = true)]
    json: bool,

    /// Write a summary row per solve to OUT/summary.csv.
    #[arg(long, global = true)]
    csv: bool,

    /// Overrides the config's sampling seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; recorded in the report (evaluation is per-slice
    /// deterministic either way).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Overrides the config's node budget (env GBSDE_NODE_BUDGET wins).
    #[arg(long, global = true)]
    node_budget: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Emit the extended-space index tables and verify the block product and
    /// drift identities.
    VerifyExtspace {
        /// Base dimension d.
        #[arg(long)]
        dim: usize,
        /// Random matrices for the product check.
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Check the pathwise linearization of the configured generator.
    VerifyLinearization {
        /// Sample count override.
        #[arg(long)]
        samples: Option<usize>,
        /// Clipping width override.
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Check the standing assumptions of the configured generator.
    VerifyAssumptions,
    /// Solve the finite-horizon equation on the configured tree.
    SolveFh {
        /// Time steps override.
        #[arg(long)]
        steps: Option<usize>,
        /// Include per-level node counts in the report.
        #[arg(long)]
        dump_tree_stats: bool,
    },
    /// Approximate the infinite-horizon value by horizon truncation.
    SolveIh {
        /// Truncation tolerance override.
        #[arg(long)]
        tol: Option<f64>,
        /// Grid steps per unit of time (shared across horizons).
        #[arg(long, default_value_t = 8)]
        steps_per_horizon: usize,
    },
    /// Solve an ordered pair of specifications and assert node-wise ordering.
    Compare,
    /// Solve across a ladder of grids and report root-value convergence.
    Convergence {
        /// Comma-separated step counts.
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<(ExperimentConfig, String)> {
    let path = cli.config.as_ref().ok_or_else(|| {
        Error::parse("this command requires --config FILE")
    })?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    let hash = format!("{:x}", Sha256::digest(text.as_bytes()));
    Ok((cfg, hash))
}

fn run(cli: &Cli) -> Result<RunReport> {
    let started = Instant::now();
    let (mut report, rows, config_hash) = match &cli.command {
        Command::VerifyExtspace { dim, samples } => {
            let report = commands::verify_extspace(*dim, *samples, cli.seed.unwrap_or(0))?;
            (report, Vec::new(), None)
        }
        Command::VerifyLinearization { samples, eps } => {
            let (cfg, hash) = load_config(cli)?;
            let report = commands::verify_linearization_cmd(&cfg, cli.seed, *samples, *eps)?;
            (report, Vec::new(), Some(hash))
        }
        Command::VerifyAssumptions => {
            let (cfg, hash) = load_config(cli)?;
            let report = commands::verify_assumptions_cmd(&cfg, cli.seed)?;
            (report, Vec::new(), Some(hash))
        }
        Command::SolveFh { steps, dump_tree_stats } => {
            let (cfg, hash) = load_config(cli)?;
            let budget = commands::effective_budget(cfg.run.node_budget, cli.node_budget);
            let out = commands::solve_fh(&cfg, *steps, budget, *dump_tree_stats)?;
            (out.report, out.rows, Some(hash))
        }
        Command::SolveIh { tol, steps_per_horizon } => {
            let (cfg, hash) = load_config(cli)?;
            let budget = commands::effective_budget(cfg.run.node_budget, cli.node_budget);
            let out = commands::solve_ih(&cfg, *tol, *steps_per_horizon, budget)?;
            (out.report, out.rows, Some(hash))
        }
        Command::Compare => {
            let (cfg, hash) = load_config(cli)?;
            let budget = commands::effective_budget(cfg.run.node_budget, cli.node_budget);
            let report = commands::compare_cmd(&cfg, cli.seed, budget)?;
            (report, Vec::new(), Some(hash))
        }
        Command::Convergence { steps } => {
            let (cfg, hash) = load_config(cli)?;
            let budget = commands::effective_budget(cfg.run.node_budget, cli.node_budget);
            let out = commands::convergence_cmd(&cfg, steps, budget)?;
            (out.report, out.rows, Some(hash))
        }
    };

    report.config_sha256 = config_hash;
    report.threads = cli.threads;
    report.runtime_ms = started.elapsed().as_millis();

    if cli.json {
        let path = report.write_json(&cli.out)?;
        println!("wrote {}", path.display());
    }
    if cli.csv && !rows.is_empty() {
        let mut rows = rows;
        for row in &mut rows {
            row.runtime_ms = report.runtime_ms;
        }
        let path = write_csv(&cli.out, report.dim, &rows)?;
        println!("wrote {}", path.display());
    }
    report.print_summary();
    Ok(report)
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Parse(_) => 2,
        Error::Config(_) | Error::Input(_) | Error::Domain(_) => 3,
        Error::Resource(_) => 4,
        Error::Numeric(_) => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => std::process::exit(if report.all_pass { 0 } else { 1 }),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}
