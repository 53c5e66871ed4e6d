//! `saver`: decode with early-layer revision, replay recorded traces, run
//! parameter sweeps, and score captions with CHAIR and POPE.

mod commands;
mod config;
mod engine;
mod error;
mod inputs;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::chair::ChairArgs;
use commands::heatmap::HeatmapArgs;
use commands::pope::{EvalArgs, GenArgs};
use commands::sweep::SweepArgs;
use config::{load_config_file, BackendKind, RunArgs, RunConfig};
use error::{exit_code, usage};

/// Environment variable capping the image-level worker pool.
const WORKERS_ENV: &str = "SAVER_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "saver", version, about = "Style-aware early-layer logit revision for multimodal decoders")]
struct Cli {
    /// TOML file with run settings; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Caption every manifest image.
    Decode(RunArgs),
    /// Teacher-forced replay of a recorded trace.
    Replay(RunArgs),
    /// CHAIR hallucination rates for a caption file.
    Chair(ChairArgs),
    /// POPE question generation and scoring.
    #[command(subcommand)]
    Pope(PopeCommand),
    /// Decode and score once per value of one revision setting.
    Sweep(SweepArgs),
    /// Per-position probability of a token at one early layer, as CSV.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Subcommand)]
enum PopeCommand {
    /// Build yes/no object questions from annotations.
    Gen(GenArgs),
    /// Score answers against generated questions.
    Eval(EvalArgs),
}

fn init_workers() -> Result<()> {
    let Ok(text) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = text
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("{WORKERS_ENV} must be a positive integer, got {text:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run_config(flags: RunArgs, file: &Option<PathBuf>) -> Result<RunConfig> {
    let base = match file {
        Some(path) => load_config_file(path)?,
        None => RunArgs::default(),
    };
    RunConfig::resolve(flags.over(&base))
}

fn run(cli: Cli) -> Result<()> {
    init_workers()?;
    match cli.command {
        Command::Decode(args) => commands::decode::run(&run_config(args, &cli.config)?),
        Command::Replay(mut args) => {
            match args.backend {
                None | Some(BackendKind::Trace) => args.backend = Some(BackendKind::Trace),
                Some(_) => return Err(usage("replay reads a trace; drop --backend or use --backend trace")),
            }
            commands::replay::run(&run_config(args, &cli.config)?)
        }
        Command::Chair(args) => commands::chair::run(&args),
        Command::Pope(PopeCommand::Gen(args)) => commands::pope::generate(&args),
        Command::Pope(PopeCommand::Eval(args)) => commands::pope::evaluate(&args),
        Command::Sweep(args) => {
            let config = run_config(args.run.clone(), &cli.config)?;
            commands::sweep::run(&config, &args)
        }
        Command::Heatmap(args) => {
            let config = run_config(args.run.clone(), &cli.config)?;
            commands::heatmap::run(&config, &args)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
