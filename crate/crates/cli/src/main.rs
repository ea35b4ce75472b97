//! `stgc`: dataset generation, training, verification, analysis,
//! evaluation and plotting for the token-gradient-conflict toy MoE.

/// `println!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! emit {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "stgc",
    version,
    about = "Token-level gradient conflict experiments on a toy MoE"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic STGD dataset plus a JSON summary sidecar.
    GenData(GenDataArgs),
    /// Train a model and log one JSONL record per step.
    Train(TrainArgs),
    /// Optimize with the conflict-elimination loss only.
    Verify(VerifyArgs),
    /// Run an analysis study on a checkpoint.
    Analyze(AnalyzeArgs),
    /// Evaluate a checkpoint, optionally under expert capacity.
    Eval(EvalArgs),
    /// Render JSONL metrics series as an SVG line chart.
    Plot(PlotArgs),
    /// Run the tau x beta grid plus an STGC-off baseline.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Config file; only the data keys are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides data_seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write a CSV export.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args, Clone, Default)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// STGD dataset; generated from the config's data keys when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// ce_like or mse_like.
    #[arg(long)]
    pub cel_kind: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Record per-step wall time in the JSONL (breaks byte-identical re-runs).
    #[arg(long)]
    pub timing: bool,
    #[arg(long, hide = true)]
    pub cel_literal_sign: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub stgc: Option<Switch>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Also log gradient consistency per layer.
    #[arg(long)]
    pub per_layer: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Study {
    Hist,
    Proxy,
    Featgrad,
    Layers,
    Load,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub which: Study,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of leading samples analysed as one batch.
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    /// Seed of the permutation control in the proxy study.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Capacity factor, or `unlimited`. Defaults to the checkpoint's setting.
    #[arg(long)]
    pub capacity: Option<String>,
    /// Batch prioritized routing when capacity is limited.
    #[arg(long)]
    pub bpr: bool,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    /// Evaluate on the trailing fraction of the dataset; 0 uses all of it.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Metric to plot; repeat for stacked panels.
    #[arg(long)]
    pub series: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub title: Option<String>,
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

/// Errors that map to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<config::ConfigError>() {
            return 1;
        }
        if let Some(stgc::StgcError::Config(_)) = cause.downcast_ref::<stgc::StgcError>() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Verify(a) => commands::verify(&a),
        Command::Analyze(a) => commands::analyze(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Plot(a) => plot::run(&a),
        Command::Sweep(a) => commands::sweep(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
