//! `tnet`: synthetic data, attention maps, training, evaluation, the
//! supervision ablation and gradient verification from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime or numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "tnet", version, about = "Attention-map supervised encoder training")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Directory every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub workspace: PathBuf,

    /// Seed override: dataset seed for `synth`, run seed for `train` and
    /// `ablation`, first seed for `gradcheck`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// JSON file with defaults: {"synth": {..}, "experiment": {..}, "threads": n}.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for per-sample evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Overwrite existing output directories.
    #[arg(long, global = true)]
    pub force: bool,

    /// Suppress progress messages on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Compute attention maps for every mask of a dataset.
    Genmaps(GenmapsArgs),
    /// Train one model and save its checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the supervision ablation grid.
    Ablation(AblationArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Family {
    Ellipse,
    Rectangle,
    Blob,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, value_enum)]
    pub family: Option<Family>,
    #[arg(long)]
    pub radius_min: Option<f64>,
    #[arg(long)]
    pub radius_max: Option<f64>,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MapKind {
    Shape,
    Contour,
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Euclidean,
    Chebyshev,
}

#[derive(Debug, Args)]
pub struct GenmapsArgs {
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub kind: MapKind,
    #[arg(long, default_value_t = 4)]
    pub factor: usize,
    /// Gaussian width for contour maps, in down-sampled pixels.
    #[arg(long, default_value_t = 2.0)]
    pub sigma: f64,
    /// Distance metric for center maps.
    #[arg(long, value_enum, default_value = "euclidean")]
    pub metric: MetricArg,
    /// Also write 8-bit PGM previews.
    #[arg(long)]
    pub previews: bool,
    /// Output directory; defaults to `maps/<kind>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Tnet,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SupervisionArg {
    Shape,
    Contour,
    Center,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Segmentation,
    Localization,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Epochs of both stages (joint epochs = twice this in baseline mode).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub encoder_epochs: Option<usize>,
    #[arg(long)]
    pub posterior_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub supervision: Option<SupervisionArg>,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Attention maps for tnet mode; defaults to `maps/<supervision>`.
    #[arg(long)]
    pub maps: Option<PathBuf>,
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Run directory; defaults to `runs/<label>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
    /// Also write the JSON report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["segmentation", "localization"])]
    pub tasks: Vec<TaskArg>,
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    #[arg(long, default_value = "ablation")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub seeds: usize,
    /// Only cases whose name contains this text.
    #[arg(long)]
    pub filter: Option<String>,
    /// Corrupt one analytic gradient per case (harness self-test).
    #[arg(long)]
    pub inject_fault: bool,
    /// Also write the JSON report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}
