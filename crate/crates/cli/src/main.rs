//! `tiltseg`: generate synthetic data, train with cross-entropy, focal loss
//! or stochastic tilted cross-entropy, and report per-class IoU fairness.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on
//! runtime failures (I/O, malformed data, divergence).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tiltseg::trainer::PartitionMode;

use crate::config::{Method, Overrides};

/// Bad invocation or configuration, reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "tiltseg", version, about = "Tilted cross-entropy segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write an SSEG1 dataset from a synthetic-data config.
    Generate {
        /// Synthetic-data config (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one method and write summary, trace, parameters, IoUs and fairness report.
    Train {
        /// Experiment config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-class IoU CSV whose ordering defines the sorted groups.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Evaluate saved parameters on a dataset.
    Evaluate {
        /// `params.json` written by `train`.
        #[arg(long)]
        params: PathBuf,
        /// SSEG1 dataset; defaults to the dataset recorded with the parameters.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate only the held-out split recorded with the parameters.
        #[arg(long)]
        eval_split: bool,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 0.25)]
        k_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fairness report from existing per-class IoU CSVs (`class_name,iou`).
    ReportOnly {
        /// One CSV per method; the file stem names the row.
        #[arg(long = "ious", required = true, num_args = 1..)]
        ious: Vec<PathBuf>,
        /// Defaults to the first `--ious` file.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 0.25)]
        k_fraction: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = LossArg::All)]
        loss: LossArg,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tilt for the tilted losses.
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        t: f64,
        /// Focal exponent.
        #[arg(long, default_value_t = 2.0)]
        gamma: f64,
        /// Use a hidden ReLU layer of this width.
        #[arg(long)]
        hidden: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum LossArg {
    All,
    Mcce,
    TceImage,
    TceClass,
    Focal,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum PartitionArg {
    Overlapping,
    Disjoint,
}

#[derive(Args, Debug)]
struct OverrideArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    #[arg(long, allow_negative_numbers = true)]
    t: Option<f64>,
    /// EMA rate for tce-stochastic; focusing exponent for focal.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    k_fraction: Option<f64>,
    #[arg(long, value_enum)]
    partition: Option<PartitionArg>,
}

impl From<&OverrideArgs> for Overrides {
    fn from(a: &OverrideArgs) -> Self {
        Overrides {
            seed: a.seed,
            method: a.method,
            t: a.t,
            gamma: a.gamma,
            eta: a.eta,
            momentum: a.momentum,
            steps: a.steps,
            batch: a.batch,
            k_fraction: a.k_fraction,
            partition: a.partition.map(|p| match p {
                PartitionArg::Overlapping => PartitionMode::Overlapping,
                PartitionArg::Disjoint => PartitionMode::Disjoint,
            }),
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        e.is::<UsageError>()
            || matches!(
                e.downcast_ref::<tiltseg::Error>(),
                Some(tiltseg::Error::InvalidConfig { .. } | tiltseg::Error::DegenerateClass { .. })
            )
    });
    if usage {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TILTSEG_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate { config, out, seed } => commands::generate(&config, &out, seed),
        Command::Train {
            config,
            out,
            reference,
            overrides,
        } => commands::train(config.as_deref(), &out, reference.as_deref(), &(&overrides).into()),
        Command::Evaluate {
            params,
            data,
            eval_split,
            reference,
            k_fraction,
            out,
        } => commands::evaluate(&params, data.as_deref(), eval_split, reference.as_deref(), k_fraction, &out),
        Command::ReportOnly {
            ious,
            reference,
            k_fraction,
            out,
        } => commands::report_only(&ious, reference.as_deref(), k_fraction, out.as_deref()),
        Command::Gradcheck {
            loss,
            trials,
            tolerance,
            seed,
            t,
            gamma,
            hidden,
        } => {
            let kinds = match loss {
                LossArg::All => vec!["mcce", "tce-image", "tce-class", "focal"],
                LossArg::Mcce => vec!["mcce"],
                LossArg::TceImage => vec!["tce-image"],
                LossArg::TceClass => vec!["tce-class"],
                LossArg::Focal => vec!["focal"],
            };
            commands::gradcheck(&kinds, trials, tolerance, seed, t, gamma, hidden)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
