//! `bisal`: data generation, training, inference, refinement, evaluation
//! and PLY export for bimanual grasp saliency.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure, 1 anything else. Set `BISAL_LOG` (e.g. `info`, `debug`) for logs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "bisal", version, about = "Bimanual grasp saliency: data, training, inference and evaluation")]
struct Cli {
    /// TOML run configuration with [data], [net], [train] and [eval] tables.
    /// Command-line flags override values from the file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic train/test dataset of labeled objects.
    GenData(GenDataArgs),
    /// Train the correction net, then the saliency and contact nets.
    Train(TrainArgs),
    /// Predict bimanual saliency and masked contact labels for one object.
    Infer(InferArgs),
    /// Predict, refine for balance, and extract contacts by clustering.
    Refine(RefineArgs),
    /// Evaluate trained weights over a dataset split.
    Eval(EvalArgs),
    /// Write a PLY colored by a saliency map for viewing.
    ExportPly(ExportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory (receives train.json, test.json and objects/).
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated categories [default: mug,pot,pan,tool]
    #[arg(long, value_delimiter = ',')]
    pub categories: Option<Vec<String>>,
    /// Training objects per category [default: 2]
    #[arg(long)]
    pub train_per_category: Option<usize>,
    /// Test objects per category [default: 2]
    #[arg(long)]
    pub test_per_category: Option<usize>,
    /// Points sampled per object [default: 5000]
    #[arg(long)]
    pub num_points: Option<usize>,
    /// Dataset seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Manifest of the training split (train.json).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for weights, traces and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Use the narrow network instead of the full-width one.
    #[arg(long)]
    pub compact: bool,
    /// Correction-net epochs [default: 2000]
    #[arg(long)]
    pub cm_epochs: Option<usize>,
    /// Joint-training epochs [default: 3000]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Optimizer: adaptive-moment or plain-gradient [default: adaptive-moment]
    #[arg(long)]
    pub optimizer: Option<String>,
    /// First saliency-update epoch K [default: 2000]
    #[arg(long)]
    pub k: Option<usize>,
    /// Epochs between saliency updates M [default: 200]
    #[arg(long)]
    pub m: Option<usize>,
    /// Maximum number of saliency updates [default: 10]
    #[arg(long)]
    pub m_max: Option<usize>,
    /// Stop threshold on mean labeled saliency sigma_s [default: 0.8]
    #[arg(long)]
    pub sigma_s: Option<f64>,
    /// Stop threshold on balance distance sigma_p [default: 0.12]
    #[arg(long)]
    pub sigma_p: Option<f64>,
    /// Candidate vectors per labeled point [default: 1000]
    #[arg(long)]
    pub n_cand: Option<usize>,
    /// Checkpoint interval in epochs, 0 disables [default: 0]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Agreement weight lambda1 [default: 1]
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Consistency weight lambda2 [default: 1.5]
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Correspondence weight w1 [default: 1]
    #[arg(long)]
    pub w1: Option<f64>,
    /// Adjustment weight w2 [default: 1]
    #[arg(long)]
    pub w2: Option<f64>,
    /// Balance weight w3 [default: 2]
    #[arg(long)]
    pub w3: Option<f64>,
    /// Classification weight w4 [default: 1.5]
    #[arg(long)]
    pub w4: Option<f64>,
    /// Initial soft-selection temperature [default: 0.1]
    #[arg(long)]
    pub temp: Option<f64>,
    /// Epochs per temperature halving [default: 500]
    #[arg(long)]
    pub temp_halving_epochs: Option<usize>,
    /// Training seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ObjectArgs {
    /// Trained weights (.bgsw).
    #[arg(long)]
    pub weights: PathBuf,
    /// Object PLY with x, y, z and a single-handed saliency property.
    #[arg(long)]
    pub input: PathBuf,
    /// JSON array of single-handed saliency values, replacing the PLY's.
    #[arg(long)]
    pub saliency: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[command(flatten)]
    pub object: ObjectArgs,
    /// Mask threshold on saliency for contact labels [default: 0.5]
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Args, Debug)]
pub struct RefineOverrides {
    /// Balance distance accepted by refinement w_r [default: 0.12]
    #[arg(long)]
    pub w_r: Option<f64>,
    /// Refinement iteration cap [default: 500]
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Refinement learning rate [default: 0.01]
    #[arg(long)]
    pub refine_lr: Option<f64>,
    /// Refinement soft-selection temperature [default: 0.05]
    #[arg(long)]
    pub refine_temp: Option<f64>,
    /// Weight of the adjustment-size penalty [default: 0.1]
    #[arg(long)]
    pub mu: Option<f64>,
    /// Clustering seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    #[command(flatten)]
    pub object: ObjectArgs,
    #[command(flatten)]
    pub refine: RefineOverrides,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Trained weights (.bgsw).
    #[arg(long)]
    pub weights: PathBuf,
    /// Manifest of the split to evaluate (e.g. test.json).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory (receives report.jsonl and summary.json).
    #[arg(long)]
    pub out: PathBuf,
    /// Coverage threshold tau_c [default: 0.7]
    #[arg(long)]
    pub tau_c: Option<f64>,
    /// Mask threshold tau [default: 0.5]
    #[arg(long)]
    pub tau: Option<f64>,
    #[command(flatten)]
    pub refine: RefineOverrides,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Object PLY providing the points.
    #[arg(long)]
    pub input: PathBuf,
    /// PLY whose saliency colors the points; defaults to the input's own.
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// Output PLY.
    #[arg(long)]
    pub out: PathBuf,
    /// Write ASCII instead of binary.
    #[arg(long)]
    pub ascii: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    if let Some(e) = err.downcast_ref::<bisal_core::Error>() {
        return match e {
            e if e.is_numeric() => 4,
            bisal_core::Error::Degenerate(_) => 4,
            bisal_core::Error::InvalidArgument(_) | bisal_core::Error::Schedule(_) => 2,
            _ => 3,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() || err.downcast_ref::<serde_json::Error>().is_some() {
        return 3;
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => commands::gen_data(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Infer(a) => commands::infer(cfg, a),
        Command::Refine(a) => commands::refine(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
        Command::ExportPly(a) => commands::export_ply(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BISAL_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
