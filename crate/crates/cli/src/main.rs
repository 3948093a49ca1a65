use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod ablate;
mod plot;
mod run;
mod verify;

/// Multiple-threshold spiking networks: train, evaluate, ablate, verify, plot.
#[derive(Parser)]
#[command(name = "mtsnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Train a grid of settings along one axis and summarize accuracies.
    Ablate(AblateArgs),
    /// Check multiplication-free inference against the dense forward pass.
    Verify(VerifyArgs),
    /// Draw accuracy charts from run directories.
    Plot(PlotArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set mt.deltas=-0.3,0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding the dataset.
    #[arg(long, env = "MTSNN_DATA")]
    data_root: Option<PathBuf>,
    /// Parent directory for run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Number of time steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Continue from a checkpoint; `--set` then only adjusts the schedule.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Time steps to evaluate at (default: the trained value).
    #[arg(long, value_delimiter = ',')]
    steps: Vec<usize>,
    #[arg(long, env = "MTSNN_DATA")]
    data_root: Option<PathBuf>,
    /// Also write the results as JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Axis {
    MtScope,
    Deltas,
    Steps,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long, value_enum)]
    axis: Axis,
    /// Axis values; repeatable. Deltas are lists such as `[-0.3,0.3]`.
    #[arg(long = "value")]
    values: Vec<String>,
    /// Time steps; the axis values for `steps`, crossed with the other axes.
    #[arg(long, value_delimiter = ',')]
    steps: Vec<usize>,
    /// Seeds run for every setting.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Step counts to compare at.
    #[arg(long, value_delimiter = ',', default_value = "1,3")]
    steps: Vec<usize>,
    /// Number of test images.
    #[arg(long, default_value_t = 10)]
    samples: usize,
    /// Seed of the random membranes used for the linearity check.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "MTSNN_DATA")]
    data_root: Option<PathBuf>,
    /// Directory for verify.json (default: the checkpoint's run directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, hide = true)]
    inject_multiply: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// Run or ablation directories.
    #[arg(required = true, num_args = 1..)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "plots")]
    out: PathBuf,
}

/// Failure classes with their exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config or input files: exit 2.
    Usage(String),
    /// Anything that went wrong while running: exit 1.
    Runtime(String),
}

impl From<mtsnn::Error> for Failure {
    fn from(e: mtsnn::Error) -> Self {
        match e {
            mtsnn::Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run::train(&a.common, a.steps, a.resume.as_deref()).map(|_| ()),
        Command::Eval(a) => run::eval(
            &a.checkpoint,
            &a.steps,
            a.data_root.as_deref(),
            a.out.as_deref(),
        ),
        Command::Ablate(a) => ablate::ablate(&a.common, a.axis, &a.values, &a.steps, &a.seeds),
        Command::Verify(a) => verify::verify(&a),
        Command::Plot(a) => plot::plot(&a.runs, &a.out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
