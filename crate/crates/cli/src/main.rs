//! `compdiff`: generate blob-world datasets, train compositional denoisers,
//! infer scene concepts and score them.

mod commands;
mod config;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::{ConfigError, RunConfig};

/// Exit status for bad configs or arguments.
const EXIT_CONFIG: u8 = 2;
/// Exit status for missing, unreadable or damaged files.
const EXIT_IO: u8 = 3;
/// Exit status for numeric failures (non-finite losses or values).
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "compdiff", version, about = "Compositional denoisers and inverse concept inference")]
struct Cli {
    /// TOML run config; built-in defaults are used for anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 uses every core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train.cdsd and test.cdsd.
    Gen,
    /// Train a denoiser; writes model.ckpt and loss.csv.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Infer concepts for test scenes; writes reports, overlays and predictions.json.
    Infer {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Score predictions.json against the test set; writes metrics.csv.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Run inference over the restart × seed grid; writes sweep.csv.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Print the header of a dataset or checkpoint file.
    Describe { file: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global().context("starting the worker pool")?;
    if let Command::Describe { file } = &cli.command {
        return commands::describe(file);
    }
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    commands::resolve_seeds(&mut cfg);
    cfg.validate()?;
    let name = match &cli.command {
        Command::Gen => "gen",
        Command::Train { .. } => "train",
        Command::Infer { .. } => "infer",
        Command::Eval { .. } => "eval",
        Command::Sweep { .. } => "sweep",
        Command::Describe { .. } => unreachable!(),
    };
    cfg.echo(name)?;
    match &cli.command {
        Command::Gen => commands::gen(&cfg),
        Command::Train { data } => commands::train(&cfg, data.as_deref()),
        Command::Infer { data, model } => commands::infer(&cfg, data.as_deref(), model.as_deref()),
        Command::Eval { data, predictions } => commands::eval(&cfg, data.as_deref(), predictions.as_deref()),
        Command::Sweep { data, model } => commands::sweep(&cfg, data.as_deref(), model.as_deref()),
        Command::Describe { .. } => unreachable!(),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use compdiff::Error as E;
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Param { .. } | E::Config(_) | E::EnumerationCap { .. } | E::Shape { .. } => EXIT_CONFIG,
                E::Io { .. } | E::Magic { .. } | E::Version { .. } | E::Truncated { .. } | E::Checksum { .. } | E::Header { .. } => {
                    EXIT_IO
                }
                E::Numeric { .. } | E::NonFiniteLoss { .. } => EXIT_NUMERIC,
                E::Invariant(_) => 1,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() {
            return EXIT_IO;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
