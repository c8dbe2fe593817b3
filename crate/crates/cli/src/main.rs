//! `atgcn`: ataxic gait detection from skeleton keypoint sequences.

mod commands;
mod outputs;

use std::path::PathBuf;
use std::process::ExitCode;

use atgcn::error::ErrorClass;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "atgcn", version, about = "Skeleton-based ataxic gait detection and severity regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case", tag = "subcommand")]
enum Command {
    /// Validate a keypoint file, normalize it and repair low-confidence joints.
    Ingest(IngestArgs),
    /// Cut sequences into gait cycles and write them with a cycle manifest.
    Cycles(CyclesArgs),
    /// Write the raw and smoothed ankle distance with its peaks as TSV and SVG.
    Plot(PlotArgs),
    /// Dump partition labels, radii and adjacency matrices.
    Graph(GraphArgs),
    /// Generate synthetic walkers.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Fine-tune one truncated model.
    Train(TrainArgs),
    /// Fine-tune every truncation level and keep the best on a validation split.
    Search(SearchArgs),
    /// Repeated grouped k-fold cross-validation.
    Eval(EvalArgs),
    /// Per-video predictions from a checkpoint.
    Predict(PredictArgs),
}

#[derive(Debug, Args, Serialize)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Keypoints below this confidence are interpolated from neighbouring frames.
    #[arg(long, default_value_t = 0.0)]
    confidence_threshold: f64,
}

#[derive(Debug, Args, Serialize, Clone)]
struct SignalArgs {
    /// Smoothing stage as `name:arg:...`; repeat to chain. Defaults to
    /// `savgol:11:3` then `moving-average:5`.
    #[arg(long = "filter")]
    filters: Vec<String>,
    /// Minimum peak spacing in seconds.
    #[arg(long, default_value_t = 0.25)]
    min_separation: f64,
    /// Minimum peak prominence as a fraction of the smoothed signal's range.
    #[arg(long, default_value_t = 0.05)]
    min_prominence: f64,
    #[arg(long, default_value_t = 0.0)]
    confidence_threshold: f64,
}

#[derive(Debug, Args, Serialize)]
struct CyclesArgs {
    /// A single keypoint file.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    input: Option<PathBuf>,
    /// A dataset manifest (CSV: path, video_id, subject_id, label, severity).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Frames per resampled cycle.
    #[arg(long, default_value_t = atgcn::cycles::CYCLE_FRAMES)]
    frames: usize,
    #[command(flatten)]
    signal: SignalArgs,
}

#[derive(Debug, Args, Serialize)]
struct PlotArgs {
    #[arg(long)]
    input: PathBuf,
    /// Writes `<prefix>.tsv` and `<prefix>.svg`.
    #[arg(long)]
    out_prefix: PathBuf,
    #[command(flatten)]
    signal: SignalArgs,
}

#[derive(Debug, Args, Serialize)]
struct GraphArgs {
    /// Cycle manifest whose frames define the gravity radii.
    #[arg(long)]
    cycles: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1e-9)]
    radius_tolerance: f64,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
enum SynthCommand {
    /// One walker as a keypoint file.
    Sequence(SynthSequenceArgs),
    /// A labelled set of walkers with a dataset manifest.
    Dataset(SynthDatasetArgs),
}

#[derive(Debug, Args, Serialize)]
struct SynthSequenceArgs {
    #[arg(long)]
    output: PathBuf,
    /// Gait cycles per second.
    #[arg(long, default_value_t = 1.0)]
    cadence: f64,
    #[arg(long, default_value_t = 0.10)]
    step_width: f64,
    #[arg(long, default_value_t = 0.01)]
    sway_amplitude: f64,
    #[arg(long, default_value_t = 0.0)]
    step_variability: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    /// Seconds.
    #[arg(long, default_value_t = 6.0)]
    duration: f64,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    #[arg(long, value_enum, default_value_t = LabelArg::Healthy)]
    label: LabelArg,
    #[arg(long, default_value_t = 0)]
    severity: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct SynthDatasetArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Healthy and ataxic walkers each (ataxic severities cycle 1, 2, 3).
    #[arg(long, required_unless_present = "mix", conflicts_with = "mix")]
    per_class: Option<usize>,
    /// Walkers per severity level, e.g. `0:10,1:4,2:4,3:2`.
    #[arg(long)]
    mix: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum LabelArg {
    Healthy,
    Ataxic,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum Profile {
    /// lr 3e-5, batch 64, 500 epochs, 10 folds x 20 repeats.
    Paper,
    /// lr 1e-3, batch 16, 100 epochs, 10 folds x 2 repeats.
    Desk,
}

#[derive(Debug, Args, Serialize, Clone)]
struct Hyper {
    /// classification or regression.
    #[arg(long, default_value = "classification")]
    task: String,
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    /// Overrides the profile's learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pre-trained backbone checkpoint; a freshly initialized one otherwise.
    #[arg(long)]
    backbone: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    cycles: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of backbone blocks kept.
    #[arg(long, default_value_t = 2)]
    level: usize,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Debug, Args, Serialize)]
struct SearchArgs {
    #[arg(long)]
    cycles: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Inclusive range `a-b` or a comma list.
    #[arg(long, default_value = "1-10")]
    levels: String,
    /// Share of videos held out for validation.
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long, required_unless_present = "dry_run")]
    cycles: Option<PathBuf>,
    #[arg(long, required_unless_present = "dry_run")]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    level: usize,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Print the resolved settings and exit.
    #[arg(long)]
    dry_run: bool,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Debug, Args, Serialize)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cycles: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

impl Command {
    fn module(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "skeleton",
            Command::Cycles(_) | Command::Plot(_) => "cycles",
            Command::Graph(_) => "graph",
            Command::Synth(_) => "synth",
            Command::Train(_) | Command::Search(_) => "train",
            Command::Eval(_) => "eval",
            Command::Predict(_) => "model",
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<atgcn::Error>() {
            return match e.class() {
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            };
        }
    }
    2
}

/// The context chain, skipping causes whose text an outer message already
/// includes.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let module = cli.command.module();
    match commands::run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{module}]: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
