//! `xsrc` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
//! failure, 5 unsupported file version.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use xsrc::Error;

#[derive(Debug, Parser)]
#[command(name = "xsrc", version, about = "Cross-scale reservoir computing for gridded fields")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the model seed (and the synthetic data seed for `gen`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replace existing outputs whose content differs.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic field described by `[data.synth]` as FGRID.
    Gen,
    /// Convert a `t,row,col,value` CSV file to FGRID.
    ConvertCsv { input: PathBuf },
    /// Train the configured hierarchy on the training split and save it.
    Train,
    /// Forecast the test split's windows with a saved model.
    Forecast {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// RMSE curves and maps of a forecast against the truth.
    Eval {
        #[arg(long)]
        forecast: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Second forecast for ratio curves and the RMSE difference map.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Horizons for the curves (default: every step).
        #[arg(long, value_delimiter = ',')]
        horizons: Vec<usize>,
        /// Horizon of the maps (default: the full length).
        #[arg(long)]
        map_horizon: Option<usize>,
    },
    /// Run the configured grid search.
    Sweep,
    /// Linear modal analysis of one layer of a saved model.
    Modes {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Layer to analyze, 1 being the coarsest.
        #[arg(long, default_value_t = 1)]
        level: usize,
        /// Hold parent inputs at zero (required for layers with a parent).
        #[arg(long)]
        frozen_parent: bool,
        /// Length of the exported mode trajectories.
        #[arg(long, default_value_t = 200)]
        steps: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. }
        | Error::InvalidArgument(_)
        | Error::DimensionMismatch(_)
        | Error::NoValidCells
        | Error::InactiveTile(_)
        | Error::Untrained(_) => 2,
        Error::Io { .. } | Error::CorruptHeader(_) | Error::Checksum(_) => 3,
        Error::NonFinite { .. } | Error::Singular(_) | Error::Numerical(_) | Error::NearDefective(_) | Error::Degenerate(_) => 4,
        Error::UnsupportedVersion { .. } => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            output::log("warning", json!({ "message": e.to_string() }));
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            output::log("error", json!({ "message": e.to_string(), "exit_code": code }));
            ExitCode::from(code)
        }
    }
}
