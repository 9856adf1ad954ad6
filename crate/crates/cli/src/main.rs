mod commands;
mod config;
mod manifest;
mod slice;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// GGO detection on 3D CT volumes.
///
/// Settings come from built-in defaults, then `--config`, then `--set`, then
/// the dedicated flags of each subcommand; later sources win.
#[derive(Debug, Parser)]
#[command(name = "pianet", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// TOML config file (or a run manifest, whose config snapshot is reused).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for every randomized step (phantom.seed and train.seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Log progress to stderr.
    #[arg(short, long)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic scans (MetaImage), lung masks and annotations.csv.
    Phantom {
        #[command(flatten)]
        common: Common,
        /// Number of scans (dataset.phantom_count).
        #[arg(long)]
        count: Option<usize>,
        /// Cube extent in voxels (phantom.extents).
        #[arg(long)]
        side: Option<usize>,
    },
    /// Resample, normalize, mask and crop scans into .pvol volumes.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Directory of <id>.mhd scans with optional <id>_mask.mhd and annotations.csv.
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
    },
    /// Stage 1: train the patch classifier on preprocessed scans.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Preprocessed directory (.pvol files and annotations.csv).
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Number of epochs (train.epochs).
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a stage-1 checkpoint.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Stage 2: fine-tune the detector on preprocessed scans.
    Train {
        #[command(flatten)]
        common: Common,
        /// Preprocessed directory (.pvol files and annotations.csv).
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Number of epochs (train.epochs).
        #[arg(long)]
        epochs: Option<usize>,
        /// Stage-1 checkpoint whose features initialize the detector.
        #[arg(long, value_name = "FILE")]
        pretrained: Option<PathBuf>,
        /// Continue from a stage-2 checkpoint.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Detect in every .pvol volume of a directory; writes detections.csv.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Stage-2 checkpoint.
        #[arg(long, value_name = "FILE", required_unless_present = "untrained")]
        checkpoint: Option<PathBuf>,
        /// Use a freshly initialized detector built from [model] and train.seed.
        #[arg(long, conflicts_with = "checkpoint")]
        untrained: bool,
        /// Minimum score kept (detect.score_threshold).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// FROC and CPM of a detections CSV against annotations.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        detections: PathBuf,
        #[arg(long, value_name = "FILE")]
        annotations: PathBuf,
        /// Directory whose .pvol files name all evaluated scans, including
        /// scans without findings.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every layer and of the detector loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Fraction of each parameter tensor checked in the network test.
        #[arg(long, default_value_t = 0.01)]
        param_fraction: f64,
        /// Input entries checked in the network test.
        #[arg(long, default_value_t = 30)]
        input_entries: usize,
        /// Skip the network test.
        #[arg(long)]
        layers_only: bool,
    },
    /// Axial slices as PGM with detection (solid) and finding (dashed) outlines.
    Slice {
        #[command(flatten)]
        common: Common,
        /// A .pvol or .mhd volume.
        #[arg(long, value_name = "FILE")]
        volume: PathBuf,
        #[arg(long, value_name = "FILE")]
        detections: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        annotations: Option<PathBuf>,
        /// Scan id in the CSVs; defaults to the volume file stem.
        #[arg(long)]
        scan_id: Option<String>,
        /// Slice index; by default one slice per shown detection (or the middle slice).
        #[arg(long)]
        z: Option<usize>,
        /// Detections below this score are not drawn.
        #[arg(long, default_value_t = 0.8)]
        min_score: f64,
        /// Also write zoomed crops around each drawn detection at this factor.
        #[arg(long, default_value_t = 1)]
        zoom: usize,
    },
}

fn single_line(s: &str) -> String {
    s.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join("; ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let text = text.strip_prefix("error: ").unwrap_or(&text);
            eprintln!("error code=E_USAGE exit=2: {}", single_line(text));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error code={} exit={}: {}", e.code(), e.exit_code(), single_line(&e.to_string()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
