//! `edgepro`: train, evaluate, attack, and sweep neuron-authorized models.
//!
//! Exit codes: 0 success, 2 invalid configuration or usage, 3 training
//! divergence, 4 authentication failure, 5 file corruption.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use commands::SweepParameter;
use edgepro::error::Error;

#[derive(Parser)]
#[command(name = "edgepro", version, about = "Neuron-level model authorization experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Lock-train a model from a JSON config; writes model.epnn, key.epkey,
    /// and report.json into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to the config's out_dir, then ".").
        #[arg(long)]
        out: Option<PathBuf>,
        /// Caps the number of dataset examples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Evaluate a checkpoint; prints acc_nu, plus acc_nl when a key is given.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// JSON dataset spec file.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run an attack against a checkpoint and print the report as JSON.
    Attack {
        #[command(subcommand)]
        kind: AttackCmd,
    },
    /// Re-train over a parameter grid and emit a CSV of accuracies.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        parameter: SweepParameter,
        /// Comma-separated grid: plain numbers for rho, lo:hi pairs for the
        /// range parameters (e.g. "0:1,8:16").
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Subcommand)]
enum AttackCmd {
    /// Fine-tune a copy on a clean holdout and report accuracy drift.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0.1)]
        holdout_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Zero the least-important neurons per layer and report accuracy.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// avgact, gradcam, or lrp.
        #[arg(long)]
        metric: String,
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Grid-search lock candidates given the key's scale factors.
    Reverse {
        #[arg(long)]
        model: PathBuf,
        /// Sealed key; supplies the known scale factors (and, under
        /// knowledge=all, which layers are locked).
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// all or half.
        #[arg(long, default_value = "half")]
        knowledge: String,
        #[arg(long, default_value_t = 100_000)]
        budget: usize,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        #[arg(long, default_value_t = 2)]
        max_pair_order: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn run(cli: Cli) -> edgepro::error::Result<()> {
    match cli.cmd {
        Cmd::Train { config, seed, out, limit } => commands::cmd_train(&config, seed, out, limit),
        Cmd::Eval { model, dataset, key, limit } => {
            commands::cmd_eval(&model, &dataset, key.as_deref(), limit)
        }
        Cmd::Attack { kind } => match kind {
            AttackCmd::Finetune {
                model,
                dataset,
                epochs,
                lr,
                holdout_fraction,
                seed,
                out,
                limit,
            } => commands::cmd_attack_finetune(
                &model,
                &dataset,
                epochs,
                lr,
                holdout_fraction,
                seed,
                out,
                limit,
            ),
            AttackCmd::Prune { model, dataset, metric, rate, seed, out, limit } => {
                commands::cmd_attack_prune(&model, &dataset, &metric, rate, seed, out, limit)
            }
            AttackCmd::Reverse {
                model,
                key,
                dataset,
                knowledge,
                budget,
                threshold,
                max_pair_order,
                out,
                limit,
            } => commands::cmd_attack_reverse(
                &model,
                &key,
                &dataset,
                &knowledge,
                budget,
                threshold,
                max_pair_order,
                out,
                limit,
            ),
        },
        Cmd::Sweep { config, parameter, grid, out, limit } => {
            commands::cmd_sweep(&config, parameter, &grid, out, limit)
        }
    }
}

fn exit_for(err: &Error) -> u8 {
    match err {
        Error::Divergence { .. } => 3,
        Error::Auth(_) => 4,
        Error::Format { .. } => 5,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
