//! `rbdet`: train, distill, fuse, evaluate, run and benchmark the detector.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rbdet::Error;

#[derive(Parser)]
#[command(name = "rbdet", version, about = "Desk-scale single-stage object detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Train a student against a frozen teacher checkpoint.
    Distill(DistillArgs),
    /// Re-parameterize a checkpoint and drop its training-only branches.
    Fuse(FuseArgs),
    /// Compute AP metrics of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Detect objects in PPM images.
    Infer(InferArgs),
    /// Time forward passes.
    Bench(BenchArgs),
    /// Train a reference and a variant configuration and compare them.
    Ablate(AblateArgs),
    /// Write a synthetic dataset in COCO layout.
    GenData(GenDataArgs),
}

/// Configuration sources, in increasing precedence: the TOML file, the
/// `RBDET_SEED` environment variable, `--set`, then the dedicated flags.
#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML file with [model], [train], [data] and [nms] tables.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.lr0=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub input_size: Option<usize>,
}

#[derive(Args, Clone, Default)]
pub struct DataArgs {
    /// Training data: a directory holding annotations.json and images/.
    /// Without it a synthetic set is generated from the [data] table.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation data in the same layout. Defaults to a synthetic set
    /// drawn with the next seed.
    #[arg(long)]
    pub val: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, short, default_value = "model.ckpt")]
    pub out: PathBuf,
    /// Also keep the checkpoint with the best validation AP here.
    #[arg(long)]
    pub best: Option<PathBuf>,
    /// Epochs between validation passes when tracking the best checkpoint.
    #[arg(long, default_value_t = 5)]
    pub eval_interval: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DistillKind {
    Standard,
    Dld,
}

#[derive(Args)]
pub struct DistillArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub mode: DistillKind,
    /// Teacher checkpoint; falls back to train.teacher_checkpoint.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long, short, default_value = "student.ckpt")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct FuseArgs {
    pub checkpoint: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory; defaults to the synthetic validation set.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct InferArgs {
    pub checkpoint: PathBuf,
    /// PPM images.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Confidence threshold (overrides nms.conf_thresh).
    #[arg(long)]
    pub conf: Option<f64>,
    /// Write the raw head outputs of each image as tensor files here.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// Write COCO-style results JSON here.
    #[arg(long)]
    pub results: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 64)]
    pub input_size: usize,
    #[arg(long, default_value_t = 20)]
    pub iterations: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    /// Time the checkpoint as stored, with every head branch, instead of
    /// its deploy form.
    #[arg(long)]
    pub train_form: bool,
    #[arg(long)]
    pub json: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SppArg {
    Simsppf,
    Simcspsppf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DistillArg {
    Off,
    Standard,
    Dld,
}

/// The reference arm is the configuration as given; the variant arm
/// applies the toggles on top of it.
#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub bic: Option<Switch>,
    #[arg(long, value_enum)]
    pub spp: Option<SppArg>,
    #[arg(long, value_enum)]
    pub aat: Option<Switch>,
    #[arg(long, value_enum)]
    pub distill: Option<DistillArg>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub num_images: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Mismatch(_) | Error::State(_) => 2,
        Error::Data(_) | Error::Format(_) | Error::Io(_) => 3,
        Error::Numeric(_) => 4,
        Error::Shape { .. } => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Distill(a) => commands::distill(a),
        Command::Fuse(a) => commands::fuse(a),
        Command::Eval(a) => commands::eval(a),
        Command::Infer(a) => commands::infer(a),
        Command::Bench(a) => commands::bench(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::GenData(a) => commands::gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
