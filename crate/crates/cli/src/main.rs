mod audit;
mod error;
mod perturb;
mod report;
mod svg;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

/// Train, disturb, audit and compare stiffness-budgeted arm policies.
#[derive(Debug, Parser)]
#[command(name = "silc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy from an experiment config.
    Train(TrainArgs),
    /// Roll out a checkpoint under an impulse, a constant load or nothing.
    Perturb(PerturbArgs),
    /// Directional stiffness-budget audit of a recorded rollout.
    Audit(AuditArgs),
    /// Comparison tables and SVG plots for several perturb runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Continue from `checkpoint_latest.json` in the output directory when present.
    #[arg(long)]
    pub resume: bool,
    /// Print a progress line every N iterations (0 disables).
    #[arg(long, default_value_t = 10)]
    pub progress_every: usize,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `impulse`, `constant`, `none`, or a JSON file holding a disturbance.
    #[arg(long, default_value = "none")]
    pub disturbance: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Episode length (s).
    #[arg(long, default_value_t = 6.0)]
    pub duration: f64,
    /// Onset of the built-in disturbances (s).
    #[arg(long, default_value_t = 2.0)]
    pub start: f64,
    /// Length of the built-in constant load (s).
    #[arg(long, default_value_t = 3.0)]
    pub load_duration: f64,
    /// Experiment config whose budget block replaces the checkpoint's.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sample a random command from the seed instead of holding the nominal point.
    #[arg(long)]
    pub random_command: bool,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub rollout: PathBuf,
    /// Checkpoint providing the policy, the arm model and the gains.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Experiment config whose budget block is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Budget preset name; overrides the config and the checkpoint.
    #[arg(long)]
    pub budget: Option<String>,
    /// Task stiffness diagonal `kx,ky` (N/m) for a custom budget.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub kx_max: Option<Vec<f64>>,
    #[arg(long)]
    pub k_null: Option<f64>,
    #[arg(long, default_value_t = silc::metrics::AUDIT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `label=DIR`, where DIR holds the output of `silc perturb`.
    #[arg(long = "run", required = true)]
    pub runs: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Embed the generation time in the SVG files.
    #[arg(long)]
    pub timestamp: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<(), CliError> = match cli.command {
        Command::Train(a) => train::run(&a),
        Command::Perturb(a) => perturb::run(&a),
        Command::Audit(a) => audit::run(&a),
        Command::Report(a) => report::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
