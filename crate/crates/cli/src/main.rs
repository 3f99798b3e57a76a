use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

/// Dynamic graph learning for sparse sensor time series.
#[derive(Parser, Debug)]
#[command(name = "dglr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a clustered synthetic dataset as locations.csv + observations.csv.
    GenSynth(GenSynthArgs),
    /// Train a model, or all ablation variants with --sweep-ablation.
    Train(TrainArgs),
    /// Predict the steps after the training interval.
    Forecast(ForecastArgs),
    /// Score predictions against ground-truth labels.
    Evaluate(EvaluateArgs),
    /// Recompute the checksums recorded in a manifest.
    Verify { manifest: PathBuf },
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    #[arg(long, default_value_t = 12)]
    pub n: usize,
    #[arg(long, default_value_t = 60)]
    pub t: usize,
    #[arg(long, default_value_t = 6)]
    pub d: usize,
    #[arg(long, default_value_t = 3)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Assign clusters independently of location.
    #[arg(long)]
    pub misspecified: bool,
    /// Innovation std of the per-site label noise.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub feature_noise: Option<f64>,
    /// Std of the per-cluster anomaly.
    #[arg(long)]
    pub anomaly: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory holding locations.csv and observations.csv.
    #[arg(long)]
    pub data: PathBuf,
    /// TOML or JSON training config; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Embedding width.
    #[arg(long)]
    pub k: Option<usize>,
    /// Prediction window.
    #[arg(long)]
    pub w: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs per outer iteration.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub outer_iters: Option<usize>,
    /// full, shared, no-sl or no-sm.
    #[arg(long)]
    pub ablation: Option<dglr::Ablation>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trailing steps held out from training.
    #[arg(long, default_value_t = dglr::data::DEFAULT_HORIZON)]
    pub horizon: usize,
    /// Train every ablation variant into its own subdirectory.
    #[arg(long)]
    pub sweep_ablation: bool,
    /// Write each outer iteration's adjacency matrices as CSV.
    #[arg(long)]
    pub dump_graph: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ForecastArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Steps to predict; defaults to every step after the training interval.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// predictions.csv written by `forecast`.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also write per-location actual and predicted series.
    #[arg(long)]
    pub plot_data: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(a) => commands::gen_synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Forecast(a) => commands::forecast(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Verify { manifest } => commands::verify(&manifest),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
