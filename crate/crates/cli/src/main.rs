use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use commute_cli::config::RunConfig;
use commute_cli::{commands, init_threads, CliError};

/// Commuting-time accessibility maps and dose-response estimation.
#[derive(Parser)]
#[command(name = "commute", version, about)]
struct Cli {
    /// Run configuration file (key = value lines); built-in demo defaults
    /// when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = automatic).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory override.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic GPS pings, students, and the ground-truth field.
    Simulate,
    /// Build per-campus accessibility maps from the GPS CSV.
    Map,
    /// Compute balancing weights, outcome models, and effect curves.
    Effects,
    /// Re-derive descriptive statistics from the input files.
    Report,
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::demo(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.cohort.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if let Some(out_dir) = &cli.out_dir {
        cfg.out_dir = out_dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load_config(&cli).and_then(|cfg| {
        init_threads(cfg.threads);
        match cli.command {
            Command::Simulate => commands::simulate::run(&cfg),
            Command::Map => commands::map::run(&cfg),
            Command::Effects => commands::effects::run(&cfg),
            Command::Report => commands::report::run(&cfg),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
