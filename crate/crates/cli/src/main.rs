//! `mome`: generate synthetic studies, train, evaluate, attribute and
//! compare from the command line.
//!
//! Exit codes: 0 success, 1 `compare` found a significant difference,
//! 2 configuration or argument error, 3 data or I/O error, 4 numeric failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use error::CliError;

#[derive(Parser)]
#[command(
    name = "mome",
    version,
    about = "Mixture-of-modality-experts classifier for multiparametric 3D volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and print its class and tag counts.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the `train` split, selecting on `val`; writes the best
    /// checkpoint and the per-epoch trace.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a split and write the report, curves and subgroup reports.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated modality subset; all configured modalities by default.
        #[arg(long, value_delimiter = ',')]
        modalities: Vec<String>,
        /// Average over the 54 test-time augmentation variants.
        #[arg(long)]
        tta: bool,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Integrated-gradients maps or modality Shapley values for one study
    /// or a whole split.
    Attribute {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, conflicts_with = "split", required_unless_present = "split")]
        study: Option<String>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long, value_enum, default_value = "noise")]
        baseline: BaselineKind,
        #[arg(long, default_value_t = 0)]
        baseline_seed: u64,
        #[arg(long, default_value_t = 256)]
        steps: usize,
        /// Modalities for integrated gradients; all by default.
        #[arg(long, value_delimiter = ',')]
        modalities: Vec<String>,
        /// Score Shapley coalitions with test-time augmentation.
        #[arg(long)]
        tta: bool,
        /// Value of the empty coalition.
        #[arg(long, value_enum, default_value = "half")]
        empty: EmptyKind,
    },
    /// Paired bootstrap comparison of two reports, or of a report against
    /// reader calls.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report_a: PathBuf,
        #[arg(long, conflicts_with = "reader_calls", required_unless_present = "reader_calls")]
        report_b: Option<PathBuf>,
        /// CSV with header `id,call` and calls 0 or 1.
        #[arg(long)]
        reader_calls: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Method {
    Ig,
    Shapley,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BaselineKind {
    Noise,
    Zeros,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EmptyKind {
    /// 0.5.
    Half,
    /// Positive fraction of the dataset's train split.
    Prevalence,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("MOME_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("MOME_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<bool, CliError> {
    init_threads()?;
    match cli.command {
        Command::Generate { config, out } => commands::generate(config.as_deref(), &out).map(|_| false),
        Command::Train { config, data, out } => commands::train(config.as_deref(), &data, &out).map(|_| false),
        Command::Evaluate {
            config,
            checkpoint,
            data,
            out,
            modalities,
            tta,
            split,
        } => commands::evaluate(config.as_deref(), &checkpoint, &data, &out, &modalities, tta, &split).map(|_| false),
        Command::Attribute {
            config,
            checkpoint,
            data,
            out,
            study,
            split,
            method,
            baseline,
            baseline_seed,
            steps,
            modalities,
            tta,
            empty,
        } => {
            let args = commands::AttributeArgs {
                study,
                split,
                method,
                baseline,
                baseline_seed,
                steps,
                modalities,
                tta,
                empty,
            };
            commands::attribute(config.as_deref(), &checkpoint, &data, &out, &args).map(|_| false)
        }
        Command::Compare {
            config,
            report_a,
            report_b,
            reader_calls,
            out,
        } => commands::compare(
            config.as_deref(),
            &report_a,
            report_b.as_deref(),
            reader_calls.as_deref(),
            &out,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
