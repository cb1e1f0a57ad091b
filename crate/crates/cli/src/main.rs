//! `kvss`: staged KV-cache eviction diagnostics from the command line.
//!
//! Exit status is 0 on success, 1 when an input fails validation, and 2 on
//! usage errors, including malformed contracts.

use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

mod analysis;
mod data;
mod diagnose;
mod output;
mod select;

use analysis::{RchannelCmd, StatsCmd};
use data::{CaptureCmd, SynthCmd};
use diagnose::DiagnoseCmd;
use output::{ReportFormat, UsageError};
use select::SelectArgs;

#[derive(Debug, Parser)]
#[command(name = "kvss", version, about = "Staged KV-cache eviction diagnostics under a frozen selector contract")]
struct Cli {
    /// Worker threads for parallel stages; 0 uses every core.
    #[arg(long, global = true, env = "KVSS_THREADS", default_value_t = 0)]
    threads: usize,
    /// Summary format on stdout.
    #[arg(long, global = true, value_enum, default_value_t = ReportFormat::Json)]
    report: ReportFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Inspect capture directories.
    #[command(subcommand)]
    Capture(CaptureCmd),
    /// Generate a synthetic capture with known ground truth.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Run Stage I scoring, optional Stage II substitution and Stage III projection.
    Select(Box<SelectArgs>),
    /// Compare two `select` runs stage by stage.
    #[command(subcommand)]
    Diagnose(DiagnoseCmd),
    /// Finite-space r-channel proxy lab.
    #[command(subcommand)]
    Rchannel(RchannelCmd),
    /// Sign-split statistics over a cell grid.
    #[command(subcommand)]
    Stats(StatsCmd),
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("configuring the thread pool")?;
    match &cli.command {
        Command::Capture(cmd) => data::run_capture(cmd, cli.report),
        Command::Synth(cmd) => data::run_synth(cmd, cli.report),
        Command::Select(args) => select::run_select(args, cli.report),
        Command::Diagnose(cmd) => diagnose::run_diagnose(cmd, cli.report),
        Command::Rchannel(cmd) => analysis::run_rchannel(cmd, cli.report),
        Command::Stats(cmd) => analysis::run_stats(cmd, cli.report),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
