mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Context;
use config::{Method, RunConfig};
use error::{exit_code, CliResult};
use output::OutDir;

#[derive(Parser)]
#[command(name = "stackroute", version, about = "Equilibrium pricing for a provider competing for routed traffic")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic step (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config; default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit preference parameters to observed days.
    Calibrate,
    /// Optimize the target provider's price.
    Price {
        #[arg(long)]
        market: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: Option<Method>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        scorer: Option<PathBuf>,
        /// Report the ratio to the full-market oracle.
        #[arg(long)]
        oracle: bool,
    },
    /// Train the rival scorer used by the abstraction.
    TrainAgg {
        #[arg(long)]
        k: Option<usize>,
    },
    /// Generate synthetic markets and observed days.
    Simulate,
    /// Compare abstraction methods on a synthetic suite.
    Eval {
        /// `K` of the MIN and AVG heuristics.
        #[arg(long)]
        k: Option<usize>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let out = cli
        .out
        .clone()
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    let (k, oracle, method) = match &cli.command {
        Command::Price { k, oracle, method, .. } => (*k, *oracle, *method),
        Command::TrainAgg { k } | Command::Eval { k } => (*k, false, None),
        _ => (None, false, None),
    };
    let ctx = Context {
        config,
        seed,
        out: OutDir::create(&out)?,
        k,
        oracle,
        method,
    };
    match &cli.command {
        Command::Calibrate => commands::calibrate(&ctx),
        Command::Price { scorer, market, .. } => commands::price(&ctx, scorer.as_deref(), market.as_deref()),
        Command::TrainAgg { .. } => commands::train_agg(&ctx),
        Command::Simulate => commands::simulate(&ctx),
        Command::Eval { .. } => commands::eval(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code(&err))
        }
    }
}
