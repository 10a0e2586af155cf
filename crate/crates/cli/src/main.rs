//! `dentcascade`: generate the toy corpus, train the four networks, run the
//! cascade and score it.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use dentcascade_core::metrics::Averaging;

#[derive(Parser)]
#[command(
    name = "dentcascade",
    version,
    about = "Tooth detection, numbering and diagnosis cascade"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic panoramic corpus (enumeration, diagnosis and mask annotations).
    GenToy(GenToyArgs),
    /// Train the lesion segmenter whose encoder the classifiers reuse.
    TrainSegmenter(TrainSegmenterArgs),
    /// Train the tooth detector and numberer.
    TrainDetector(TrainDetectorArgs),
    /// Train the healthy/abnormal filter on tooth crops.
    TrainFilter(TrainFilterArgs),
    /// Train the four-label diagnoser on abnormal tooth crops.
    TrainDiagnoser(TrainDiagnoserArgs),
    /// Run the cascade over images and write predictions.
    Predict(PredictArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct Common {
    /// JSON settings file; flags override it, it overrides defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Seeded {
    #[command(flatten)]
    common: Common,
    /// Seed for every random draw of the run.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenToyArgs {
    #[command(flatten)]
    run: Seeded,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_images: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    abnormal_rate: Option<f64>,
    #[arg(long)]
    missing_rate: Option<f64>,
    /// Side of the square tooth crops the masks are cut to.
    #[arg(long)]
    crop_size: Option<usize>,
    #[arg(long)]
    pad_fraction: Option<f64>,
}

#[derive(Args)]
struct Training {
    #[command(flatten)]
    run: Seeded,
    /// Output directory for the artifact and manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct TrainSegmenterArgs {
    #[command(flatten)]
    train: Training,
    /// Mask corpus (masks.json).
    #[arg(long)]
    corpus: PathBuf,
    /// Defaults to the corpus crop size.
    #[arg(long)]
    crop_size: Option<usize>,
    #[arg(long)]
    encoder_depth: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    /// Bottleneck reduction for the encoder features: average or max.
    #[arg(long)]
    pooling: Option<String>,
}

/// Per-class detection cap: a count, or `all`.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Limit {
    All,
    Count(usize),
}

impl std::str::FromStr for Limit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "all" {
            return Ok(Limit::All);
        }
        s.parse()
            .map(Limit::Count)
            .map_err(|_| format!("expected a count or `all`, got `{s}`"))
    }
}

impl Limit {
    fn as_option(self) -> Option<usize> {
        match self {
            Limit::All => None,
            Limit::Count(n) => Some(n),
        }
    }
}

#[derive(Args)]
struct DetectionFlags {
    /// Minimum class score of a kept detection.
    #[arg(long)]
    score_threshold: Option<f64>,
    /// IoU above which same-class detections are suppressed.
    #[arg(long)]
    nms_iou: Option<f64>,
    /// Detections kept per tooth class (a count or `all`).
    #[arg(long)]
    max_per_class: Option<Limit>,
}

#[derive(Args)]
struct TrainDetectorArgs {
    #[command(flatten)]
    train: Training,
    /// Enumeration corpus (enum.json).
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    detection: DetectionFlags,
    /// Train without augmentation.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct HybridFlags {
    #[command(flatten)]
    train: Training,
    /// Trained segmenter artifact supplying the encoder.
    #[arg(long)]
    segmenter: PathBuf,
    /// Diagnosis corpus (diag.json).
    #[arg(long)]
    diagnosis: PathBuf,
    /// Decision threshold stored with the model.
    #[arg(long)]
    threshold: Option<f64>,
    /// Fine-tune the encoder instead of keeping it frozen.
    #[arg(long)]
    unfreeze_encoder: bool,
    /// Safetensors file with pretrained deep-path weights.
    #[arg(long, value_name = "FILE")]
    pretrained_deep: Option<PathBuf>,
    /// Channel widths of the five deep-path blocks.
    #[arg(long, value_delimiter = ',', num_args = 5)]
    deep_channels: Option<Vec<usize>>,
}

#[derive(Args)]
struct TrainFilterArgs {
    #[command(flatten)]
    hybrid: HybridFlags,
    /// Enumeration corpus (enum.json); teeth absent from the diagnosis corpus are healthy.
    #[arg(long)]
    enumeration: PathBuf,
}

#[derive(Args)]
struct TrainDiagnoserArgs {
    #[command(flatten)]
    hybrid: HybridFlags,
}

#[derive(Args)]
#[command(group(ArgGroup::new("input").required(true).args(["image", "images", "corpus"])))]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    detector: PathBuf,
    #[arg(long)]
    filter: PathBuf,
    #[arg(long)]
    diagnoser: PathBuf,
    /// Image file; repeat for several.
    #[arg(long)]
    image: Vec<PathBuf>,
    /// Directory of PNG/JPEG images.
    #[arg(long, value_name = "DIR")]
    images: Option<PathBuf>,
    /// Corpus file whose images to run on.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Prediction file to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write the stage-1 detections of every image.
    #[arg(long, value_name = "FILE")]
    detections_out: Option<PathBuf>,
    #[command(flatten)]
    detection: DetectionFlags,
    #[arg(long)]
    filter_threshold: Option<f64>,
    #[arg(long)]
    diagnosis_threshold: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Cascade predictions.
    #[arg(long)]
    preds: PathBuf,
    /// Enumeration ground truth.
    #[arg(long)]
    gt: PathBuf,
    /// Diagnosis ground truth; enables the filter and diagnoser rows.
    #[arg(long)]
    diagnosis_gt: Option<PathBuf>,
    /// Stage-1 detections to score detection on instead of the predictions.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Multi-label F1 averaging: macro or micro.
    #[arg(long)]
    averaging: Option<Averaging>,
    /// Digits after the decimal point in the table.
    #[arg(long)]
    decimals: Option<usize>,
    /// Write the report as JSON.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Write the table to a file as well as stdout.
    #[arg(long, value_name = "FILE")]
    table_out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let outcome = match cli.command {
        Command::GenToy(a) => commands::gen_toy(a),
        Command::TrainSegmenter(a) => commands::train_segmenter(a),
        Command::TrainDetector(a) => commands::train_detector(a),
        Command::TrainFilter(a) => commands::train_filter(a),
        Command::TrainDiagnoser(a) => commands::train_diagnoser(a),
        Command::Predict(a) => commands::predict(a),
        Command::Evaluate(a) => commands::evaluate(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their source in the message.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let cause = cause.to_string();
                if !msg.contains(&cause) {
                    msg = format!("{msg}: {cause}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
