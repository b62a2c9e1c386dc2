//! `dbat`: train, evaluate, ablate and analyze segmentation runs from a
//! JSON config. Failures print one `error: code=... exit=... msg=...` line
//! to stderr and exit with a per-class code.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::config::{Overrides, RunConfig};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "dbat", version, about = "Dynamic backward attention segmentation runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON run config; unknown keys are rejected.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the synthetic stream, writing checkpoints and a step log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "P")]
        poly_power: Option<f64>,
        /// Resume from this checkpoint (or run directory).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on held-out scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Seed of the held-out scene stream.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train every ablation variant and emit the delta table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "P")]
        poly_power: Option<f64>,
        /// Run every switch combination instead of the reference rows.
        #[arg(long)]
        grid: bool,
    },
    /// Similarity, attention and dissection analyses.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
    /// Write every recorded activation of a probe run to disk.
    DumpActivations {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum Analysis {
    /// CKA between every layer pair of two runs, checkpoints or dumps.
    Cka {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        a: PathBuf,
        #[arg(long, value_name = "PATH")]
        b: PathBuf,
    },
    /// Mean backward-attention weights and per-head attention distances.
    Attn {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Label units with synthetic concepts.
    Dissect {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Fraction of activations above each unit's threshold.
        #[arg(long, value_name = "Q")]
        quantile: Option<f64>,
    },
}

fn load(common: &Common, o: Overrides, default_out: &str) -> Result<RunConfig, CliError> {
    let o = Overrides {
        out: common.out.clone(),
        ..o
    };
    RunConfig::load(common.config.as_deref())?.resolve(&o, default_out)
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("DBAT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("DBAT_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Run(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Train {
            common,
            seed,
            poly_power,
            checkpoint,
        } => {
            let cfg = load(&common, Overrides { seed, poly_power, ..Default::default() }, "runs/train")?;
            commands::train(&cfg, checkpoint.as_deref())
        }
        Command::Eval { common, checkpoint, seed } => {
            let cfg = load(&common, Overrides::default(), "runs/eval")?;
            commands::eval(&cfg, &checkpoint, seed)
        }
        Command::Ablate {
            common,
            seed,
            poly_power,
            grid,
        } => {
            let cfg = load(&common, Overrides { seed, poly_power, ..Default::default() }, "runs/ablate")?;
            commands::ablate(&cfg, grid)
        }
        Command::Analyze { what } => match what {
            Analysis::Cka { common, a, b } => commands::analyze_cka(&load(&common, Overrides::default(), "runs/cka")?, &a, &b),
            Analysis::Attn { common, checkpoint } => {
                commands::analyze_attn(&load(&common, Overrides::default(), "runs/attn")?, &checkpoint)
            }
            Analysis::Dissect {
                common,
                checkpoint,
                quantile,
            } => {
                let cfg = load(&common, Overrides { quantile, ..Default::default() }, "runs/dissect")?;
                commands::analyze_dissect(&cfg, &checkpoint)
            }
        },
        Command::DumpActivations { common, checkpoint } => {
            commands::dump_activations(&load(&common, Overrides::default(), "runs/activations")?, &checkpoint)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = e.print();
            return ExitCode::from(CliError::Usage(String::new()).code() as u8);
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            let err = CliError::Usage(first);
            eprintln!("{err}");
            return ExitCode::from(err.code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
