//! Command-line laboratory: market simulation, policy training, strategy
//! evaluation, historical backtests and feature attribution, each emitting a
//! resolved config and a reproducibility manifest next to its outputs.
//!
//! Exit codes: 0 success, 2 configuration error (bad flags, bad config file,
//! missing or malformed inputs), 3 runtime or numerical error.

mod commands;

use clap::{Args, Parser, Subcommand};
use deephedge::Error;
use std::path::PathBuf;
use std::process::ExitCode;

/// Environment variable naming the default market-parameter file.
pub const PARAMS_ENV: &str = "DEEPHEDGE_PARAMS";

#[derive(Parser)]
#[command(
    name = "deephedge",
    about = "Deep hedging laboratory: simulate markets, train policies, benchmark hedgers",
    version
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct GlobalArgs {
    /// JSON config file; command-line flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Reference mode: single-threaded canonical execution with fixed
    /// manifest metadata, guaranteeing byte-identical reruns
    #[arg(long, global = true)]
    pub reference: bool,
    /// Worker count; reserved for parallel backends, must be 1 in
    /// reference mode (the current engine always computes single-threaded)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the published market parameter set to a JSON file
    ParamsInit(commands::ParamsInitArgs),
    /// Build a synthetic initial-state pool by long-run simulation
    PoolMake(commands::PoolMakeArgs),
    /// Simulate joint return/surface paths from a parameter file and pool
    Simulate(commands::SimulateArgs),
    /// Simulate a lognormal market with a flat volatility surface
    SimulateBs(commands::SimulateBsArgs),
    /// Build a synthetic dated state series for backtests
    HistoryMake(commands::HistoryMakeArgs),
    /// Train a hedging policy by risk-sensitive policy gradient
    Train(commands::TrainArgs),
    /// Hedge a path set with one or more strategies and report metrics
    Evaluate(commands::EvaluateArgs),
    /// Roll options along a historical state series and accumulate P&L
    Backtest(commands::BacktestArgs),
    /// Shapley attribution of the informational state features
    Sage(commands::SageArgs),
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Format(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => 2,
        Error::Domain(_) | Error::State(_) | Error::Strategy { .. } => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.global.threads {
        if t == 0 {
            eprintln!("error: configuration error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if cli.global.reference && t != 1 {
            eprintln!("error: configuration error: reference mode requires --threads 1");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::ParamsInit(args) => commands::params_init(&cli.global, args),
        Command::PoolMake(args) => commands::pool_make(&cli.global, args),
        Command::Simulate(args) => commands::simulate(&cli.global, args),
        Command::SimulateBs(args) => commands::simulate_bs(&cli.global, args),
        Command::HistoryMake(args) => commands::history_make(&cli.global, args),
        Command::Train(args) => commands::train(&cli.global, args),
        Command::Evaluate(args) => commands::evaluate(&cli.global, args),
        Command::Backtest(args) => commands::backtest(&cli.global, args),
        Command::Sage(args) => commands::sage(&cli.global, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
