//! Experiment runner: configuration, decode/sweep/calibrate/analyze
//! subcommands and their file outputs.

pub mod commands;
pub mod config;
pub mod error;
pub mod instance;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{parse_grid_axis, RunConfig};
use error::CliResult;
use psd_core::metrics::MetricsConfig;

#[derive(Debug, Parser)]
#[command(name = "psd", version, about = "Parallel speculative decoding experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode every replicate of a config and write one trace per replicate.
    Decode(RunArgs),
    /// Decode the cartesian product of one or more grid axes.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Grid axis as KEY=V1,V2,... (repeatable).
        #[arg(long = "grid", value_name = "KEY=V1,V2,...")]
        grid: Vec<String>,
    },
    /// Fit a draft graph to chain probe traces.
    Calibrate {
        /// Glob over JSONL trace files.
        #[arg(long, value_name = "GLOB")]
        traces: String,
        /// Node budget including the root.
        #[arg(long = "k-max", value_name = "N")]
        k_max: usize,
        /// Output path of the graph text.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Compute precision curves, contribution profiles and acceptance by rank.
    Analyze {
        #[arg(long, value_name = "GLOB")]
        traces: String,
        /// Run config whose metrics section is used; defaults apply otherwise.
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Output directory (overrides output.dir).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub replicates: Option<usize>,
    /// Base seed (overrides seed).
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
}

impl RunArgs {
    pub fn load(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.output.dir = std::path::absolute(out).unwrap_or_else(|_| out.clone());
        }
        if let Some(n) = self.replicates {
            cfg.replicates = n;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Decode(args) => {
            commands::cmd_decode(&args.load()?)?;
        }
        Command::Sweep { run, grid } => {
            let axes = grid.iter().map(|g| parse_grid_axis(g)).collect::<CliResult<Vec<_>>>()?;
            commands::cmd_sweep(&run.load()?, &axes)?;
        }
        Command::Calibrate { traces, k_max, out } => {
            commands::cmd_calibrate(&traces, k_max, &out)?;
        }
        Command::Analyze { traces, config, out } => {
            let metrics = match config {
                Some(p) => RunConfig::load(&p)?.metrics,
                None => MetricsConfig::default(),
            };
            commands::cmd_analyze(&traces, &metrics, &out)?;
        }
    }
    Ok(())
}
