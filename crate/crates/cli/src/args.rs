use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::WORKSPACE_ENV;

#[derive(Debug, Parser)]
#[command(name = "stagematte", version, about = "Capture-stage background matting pipeline")]
pub struct Cli {
    /// Pipeline config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Workspace directory holding manifest.jsonl.
    #[arg(long, global = true, env = WORKSPACE_ENV)]
    pub workspace: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NetKind {
    Teacher,
    Student,
}

#[derive(Debug, Args)]
pub struct TrainOut {
    /// Checkpoint to write; the loss log goes next to it as `<stem>.log.tsv`.
    #[arg(long)]
    pub out: PathBuf,

    /// Overrides the phase's iteration count.
    #[arg(long)]
    pub iterations: Option<usize>,

    /// Overrides the phase's training seed.
    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and manifest.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to the workspace.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train a freshly initialized network on the base split.
    TrainBase {
        #[arg(long, value_enum)]
        net: NetKind,
        #[command(flatten)]
        out: TrainOut,
    },
    /// Hybrid fine-tuning of the teacher on base and scribbled records.
    FinetuneTeacher {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        base_fraction: Option<f64>,
        #[command(flatten)]
        out: TrainOut,
    },
    /// Write teacher predictions as pseudo-labels and record them in the manifest.
    Distill {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "unlabeled")]
        split: String,
        /// Directory under the workspace for the label PNGs.
        #[arg(long, default_value = "pseudo")]
        dir: String,
        #[arg(long)]
        force: bool,
    },
    /// Fine-tune the student on pseudo-labeled records.
    FinetuneStudent {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "unlabeled")]
        split: String,
        #[command(flatten)]
        out: TrainOut,
    },
    /// Fine-tune the student directly on base and scribbled records.
    FinetuneStudentDirect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        base_fraction: Option<f64>,
        /// Add a refiner phase after the coarse phase.
        #[arg(long)]
        train_refiner: bool,
        #[command(flatten)]
        out: TrainOut,
    },
    /// Write alpha PNGs for every record of a split.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Side-by-side image | prediction | background | diff panels for triage.
    ExportReview {
        #[arg(long)]
        split: String,
        /// Directory of `<id>.png` predictions.
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        pred: Option<PathBuf>,
        /// Predict on the fly instead of reading `--pred`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Annotation API and static frontend.
    Serve {
        /// Manifest to serve; its directory becomes the workspace.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory of `<id>.png` predictions for the prediction layer.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Built frontend assets.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Metrics of predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        split: String,
        /// Restrict to the unknown band of the ground-truth trimap.
        #[arg(long)]
        band: Option<usize>,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Band-restricted check of predictions against the supervisor solver.
    Qc {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long)]
        band: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Teacher fine-tuning at several base fractions, evaluated on validation.
    RatioSweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8,1")]
        values: Vec<f64>,
        /// Directory for the per-ratio checkpoints and the table.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        force: bool,
    },
}
