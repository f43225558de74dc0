mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Phantom generation, training, evaluation and verification.
#[derive(Debug, Parser)]
#[command(name = "rdns", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    GenData(GenDataArgs),
    /// Train a classifier or detector on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or an oracle) on one split.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Print RoIAlign and RoIPooling bins side by side for one roi.
    RoiDemo(RoiDemoArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 344)]
    count: usize,
    #[arg(long, default_value_t = 178)]
    benign: usize,
    #[arg(long, default_value_t = 166)]
    malignant: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overwrite the dataset files of a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Classifier,
    Detector,
}

#[derive(Debug, Args)]
struct TrainArgs {
    kind: ModelKind,
    #[arg(long)]
    dataset: PathBuf,
    /// Directory for checkpoint.bin, log.csv and steps.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Growth rate.
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Layers per dense block, comma separated (one block for the detector).
    #[arg(long, value_delimiter = ',')]
    blocks: Option<Vec<usize>>,
    /// Transition compression.
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long, conflicts_with_all = ["oracle", "predictions"], required_unless_present_any = ["oracle", "predictions"])]
    checkpoint: Option<PathBuf>,
    /// Evaluate the ground-truth oracle of this kind instead of a model.
    #[arg(long)]
    oracle: Option<ModelKind>,
    /// Recompute classifier metrics from a dumped predictions.csv.
    #[arg(long, conflicts_with = "oracle")]
    predictions: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Validation)]
    split: SplitArg,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Finite-difference step for every operation.
    #[arg(long)]
    eps: Option<f64>,
    /// Seeded instances per operation.
    #[arg(long, default_value_t = 5)]
    cases: usize,
    /// Restrict to these operations.
    #[arg(long = "op")]
    ops: Vec<String>,
    #[arg(long, hide = true)]
    break_op: Option<String>,
}

#[derive(Debug, Args)]
struct RoiDemoArgs {
    /// Feature map: `constant:<v>`, `ramp` or `random:<seed>`.
    #[arg(long, default_value = "random:0")]
    map: String,
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    /// Roi corners in feature coordinates: `x1,y1,x2,y2`.
    #[arg(long, allow_hyphen_values = true)]
    roi: String,
    /// Output bins: `<rows>x<cols>`.
    #[arg(long, default_value = "2x2")]
    bins: String,
    #[arg(long, default_value_t = 2)]
    sampling_ratio: usize,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = commands::threads().and_then(|_| match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::RoiDemo(a) => commands::roi_demo(a),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
