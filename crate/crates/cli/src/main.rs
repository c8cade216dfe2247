mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::{KmaGrid, List, UsageError};

/// Active k-space acquisition simulator.
#[derive(Parser, Debug)]
#[command(name = "akspace", version, about)]
struct Cli {
    /// `key=value` file supplying defaults for any long flag of the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed; falls back to the config file, then AKSPACE_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate phantoms (or ingest a PGM directory) into a dataset directory.
    GenData(GenDataArgs),
    /// Train the reconstructor and evaluator.
    Train(TrainArgs),
    /// Metric sweeps over kMA levels with fresh random masks.
    Evaluate(EvaluateArgs),
    /// Closed-loop acquisition with one policy, one trace per image.
    Simulate(SimulateArgs),
    /// Mean MSE/SSIM-vs-kMA curves and AUCs for several policies.
    ComparePolicies(CompareArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(4..))]
    pub size: Option<u64>,
    /// Ingest 8-bit PGM images from this directory instead of generating phantoms.
    #[arg(long)]
    pub images: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `kernel` or `binary`.
    #[arg(long)]
    pub evaluator_loss: Option<String>,
    #[arg(long)]
    pub epochs_constant: Option<usize>,
    #[arg(long)]
    pub epochs_decay: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// A positive number or `auto`.
    #[arg(long)]
    pub gamma: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub cascades: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub evaluator_base_channels: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Any training key as `key=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Trained model; without it the zero-filled image is evaluated.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// kMA grid as `a,b,c` or `start:stop:step`.
    #[arg(long)]
    pub kma: Option<KmaGrid>,
    /// Also write per-image MSE distributions and their quartiles.
    #[arg(long)]
    pub boxplot: bool,
    #[arg(long)]
    pub boxplot_kma: Option<KmaGrid>,
    /// Also write (MSE, mean uncertainty) pairs and their Pearson coefficient.
    #[arg(long)]
    pub uncertainty_correlation: bool,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub kma_min: Option<f64>,
    #[arg(long)]
    pub kma_max: Option<f64>,
    /// Also write evaluator score statistics on unobserved rows.
    #[arg(long)]
    pub scores: bool,
    #[arg(long)]
    pub scores_kma: Option<KmaGrid>,
    /// Also sweep the zero-filled baseline.
    #[arg(long)]
    pub baseline: bool,
    /// Low-frequency rows present in every mask.
    #[arg(long)]
    pub fixed_rows: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// random-c, random-cr, order-c, order-cr, eval-greedy or oracle.
    #[arg(long)]
    pub policy: Option<String>,
    /// Maximum number of acquisitions per image.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Stop once the mean predicted variance drops below this value.
    #[arg(long)]
    pub stop_uncertainty: Option<f64>,
    /// Write normalized PGM frames per step under `out/frames/<image_id>`.
    #[arg(long)]
    pub frames: bool,
    /// Pairs observed before the first acquisition (lowest frequencies).
    #[arg(long)]
    pub initial_pairs: Option<usize>,
    /// Only the first `limit` images in image_id order.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated policy names.
    #[arg(long)]
    pub policies: Option<List>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub initial_pairs: Option<usize>,
    #[arg(long)]
    pub limit: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a, cli.config.as_deref(), cli.seed),
        Command::Train(a) => commands::train(a, cli.config.as_deref(), cli.seed),
        Command::Evaluate(a) => commands::evaluate(a, cli.config.as_deref(), cli.seed),
        Command::Simulate(a) => commands::simulate(a, cli.config.as_deref(), cli.seed),
        Command::ComparePolicies(a) => commands::compare(a, cli.config.as_deref(), cli.seed),
    };
    match result {
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
