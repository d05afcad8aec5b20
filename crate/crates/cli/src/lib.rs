//! Command-line front end for the iecd2 engine: decoding, ablation sweeps,
//! metric evaluation, runtime benchmarks and toy corpus generation.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod error;

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "iecd2", version, about = "Dual-stream instruction/evidence contrastive decoding")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode one scene or trace and write tokens plus the gate trace.
    Decode(commands::decode::DecodeArgs),
    /// Sweep decoder settings over a corpus and write a CSV table.
    Ablate(commands::ablate::AblateArgs),
    /// Score captions or yes/no answers and write a CSV report.
    Eval(commands::eval::EvalArgs),
    /// Time single-stream and dual-stream decoding on a trace.
    Bench(commands::bench::BenchArgs),
    /// Write a seeded toy corpus.
    GenToy(commands::gen_toy::GenToyArgs),
}

pub fn run(cli: Cli) -> CliResult<()> {
    let run_config = || config::load_config(cli.config.as_deref());
    match &cli.command {
        Command::Decode(args) => {
            let out = commands::decode::run(run_config()?, args)?;
            println!("{}", out.summary());
            println!("{}", out.text);
        }
        Command::Ablate(args) => {
            let rows = commands::ablate::run(run_config()?, args)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                log::warn!("{failed} of {} cells failed", rows.len());
            }
        }
        Command::Eval(args) => {
            commands::eval::run(args)?;
        }
        Command::Bench(args) => {
            commands::bench::run(run_config()?, args)?;
        }
        Command::GenToy(args) => {
            let paths = commands::gen_toy::run(args)?;
            println!("wrote {} scenes to {}", paths.len(), args.out.display());
        }
    }
    Ok(())
}
