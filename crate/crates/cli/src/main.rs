use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod output;
mod sweep;

use commands::Common;

/// Reward inference from preferences, demonstrations, ratings and stops on
/// tabular gridworlds.
#[derive(Parser)]
#[command(name = "mavrl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
    /// Run this single seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for seeds or sweep cells.
    #[arg(long, short, default_value_t = 1)]
    jobs: usize,
}

impl CommonArgs {
    fn common(&self) -> Common {
        Common { config: self.config.clone(), out: self.out.clone(), seed: self.seed, jobs: self.jobs }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate feedback datasets, one file per seed.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train models and write checkpoints and loss curves.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Train on this feedback file instead of simulating (single seed).
        #[arg(long)]
        feedback: Option<PathBuf>,
    },
    /// Train (or load) and evaluate; writes results.csv and a manifest.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Load `model_seed<S>.ckpt` files from this directory instead of training.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Also evaluate under these random-action probabilities.
        #[arg(long, value_delimiter = ',')]
        p_rand: Vec<f64>,
        /// Pick (lambda_kl, lambda_td) from {0.5, 1}^2 on this many tuning seeds first.
        #[arg(long)]
        select_lambdas: Option<usize>,
    },
    /// Run every budget x modality-subset cell; resumable.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Budget `n_p,n_d,n_r,n_s`; repeat for more. Defaults to the config's.
        #[arg(long = "budget")]
        budgets: Vec<String>,
        /// `all`, `singles`, or a list like `P,DS,PDRS`. Defaults to the config's.
        #[arg(long)]
        modalities: Option<String>,
        #[arg(long, value_delimiter = ',')]
        p_rand: Vec<f64>,
        #[arg(long)]
        select_lambdas: Option<usize>,
    },
    /// Export mean and variance reward heatmaps as CSV (and PNG).
    Heatmap {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        png: bool,
        /// Min-max scale each map to [0, 1].
        #[arg(long)]
        normalize: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Simulate { common } => commands::simulate(&common.common())?,
        Command::Train { common, feedback } => commands::train_models(&common.common(), feedback.as_deref())?,
        Command::Eval { common, models, p_rand, select_lambdas } => {
            commands::eval(&common.common(), models.as_deref(), &p_rand, select_lambdas)?
        }
        Command::Heatmap { common, models, png, normalize } => {
            commands::heatmap(&common.common(), models.as_deref(), png, normalize)?
        }
        Command::Sweep { common, budgets, modalities, p_rand, select_lambdas } => {
            let c = common.common();
            let base = c.load_config()?;
            let plan = sweep::SweepPlan {
                budgets: if budgets.is_empty() {
                    vec![base.budget]
                } else {
                    budgets.iter().map(|b| sweep::parse_budget(b)).collect::<anyhow::Result<_>>()?
                },
                modalities: match modalities {
                    Some(m) => sweep::parse_modalities(&m)?,
                    None => vec![base.modalities],
                },
                p_rand,
                tuning_seeds: select_lambdas,
            };
            let summary = sweep::run_sweep(&base, &plan, &c.out, c.jobs)?;
            println!("sweep: {} ran, {} reused, {} failed", summary.ran, summary.reused, summary.failed.len());
            for (cell, err) in &summary.failed {
                eprintln!("failed cell {cell}: {err}");
            }
            return Ok(summary.failed.is_empty());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
