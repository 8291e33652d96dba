use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slam_cli::commands::{cmd_bench, cmd_eval, cmd_fit};
use slam_cli::config::RunConfig;
use slam_cli::CliError;

#[derive(Parser)]
#[command(name = "slam", version, about = "Fit stochastic state-space models by higher-order Laplace approximation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Maximize log M(theta) and write estimates, critical path and trace
    Fit(Common),
    /// Print the expansion terms of log M at the configured theta
    Eval(Common),
    /// Time the expansion stages on random problems
    Bench(Common),
}

#[derive(Args)]
struct Common {
    /// Flat key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key; may be repeated
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn load(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&c.set)?;
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fit(c) => {
            let dir = cmd_fit(&load(&c)?)?;
            println!("wrote {}", dir.display());
        }
        Command::Eval(c) => print!("{}", cmd_eval(&load(&c)?)?),
        Command::Bench(c) => print!("{}", cmd_bench(&load(&c)?)?.1),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("slam: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
