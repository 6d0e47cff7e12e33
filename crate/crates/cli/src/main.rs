mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Sequential lab-test ordering: cohort generation, training, evaluation and serving.
#[derive(Debug, Parser)]
#[command(name = "edcopilot", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a synthetic cohort and its stratified train/val/test split.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train the encoder on next-group and outcome targets.
    TrainSft {
        #[command(flatten)]
        common: Common,
        /// Directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Train on the first this many training patients.
        #[arg(long)]
        train_limit: Option<usize>,
    },
    /// Train the ordering policy with PPO on a frozen encoder.
    TrainRl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Encoder weights written by `train-sft`.
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Train one policy per (alpha, beta) and write the trade-off table and its Pareto front.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Evaluate a trained model and the baselines on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Model directory holding encoder.edcp and policy.edcp.
        #[arg(long)]
        model: PathBuf,
    },
    /// Rebuild the line-delimited plot bundle from report tables.
    PlotData {
        #[command(flatten)]
        common: Common,
        /// Directory written by `eval`.
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the HTTP co-pilot service; `--out` receives the session logs.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Registry root; falls back to $EDCOPILOT_MODEL_DIR.
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Drive scripted sessions through the service logic for a split's patients.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
}

/// Failure classes that map to distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or input; exit code 2.
    Validation(String),
    Other(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Other(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Gen { common } => commands::gen(&common),
        Command::TrainSft {
            common,
            data,
            train_limit,
        } => commands::train_sft(&common, &data, train_limit),
        Command::TrainRl { common, data, encoder } => commands::train_rl(&common, &data, &encoder),
        Command::Sweep { common, data, encoder } => commands::sweep(&common, &data, &encoder),
        Command::Eval { common, data, model } => commands::eval(&common, &data, &model),
        Command::PlotData { common, report } => commands::plot_data(&common, &report),
        Command::Serve { common, models } => commands::serve(&common, models.as_deref()),
        Command::Simulate { common, data, model } => commands::simulate(&common, &data, &model),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
