use std::path::PathBuf;
use std::process::ExitCode;

use cascade_core::generators::Variant;
use clap::{Args, Parser, Subcommand};

mod commands;

/// Pose-to-video motion transfer with explicit garment shape and structure.
#[derive(Debug, Parser)]
#[command(name = "cascade", version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file; built-in defaults are used when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for synthesis and network initialization.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Cascade variant: P, PS, PSS or PSS-R.
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
    /// Square frame size in pixels.
    #[arg(long, global = true)]
    pub resolution: Option<usize>,
    /// Checkpoint file or directory (written by `train`, read elsewhere).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic sequence directory.
    SynthData {
        /// Output sequence directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of frames.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Extract and cache structure ground truth for a sequence directory.
    Prepare {
        /// Sequence directory.
        #[arg(long)]
        data: PathBuf,
        /// Structure cache directory (default: config, then CASCADE_CACHE_DIR, then <data>/cache).
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Train the cascade stage by stage on a sequence directory.
    Train {
        /// Sequence directory.
        #[arg(long)]
        data: PathBuf,
        /// Epochs per stage.
        #[arg(long)]
        epochs: Option<usize>,
        /// Loss CSV (default: <checkpoint>/losses.csv).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Structure cache directory.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Transfer the motion of a source sequence onto the trained actor.
    Reenact {
        /// Sequence directory with the source keypoints.
        #[arg(long)]
        source: PathBuf,
        /// Sequence directory of the trained actor (keypoint statistics and background).
        #[arg(long)]
        target: PathBuf,
        /// Output directory for frames.
        #[arg(long)]
        out: PathBuf,
        /// Also write predicted shape and structure panels.
        #[arg(long)]
        maps: bool,
    },
    /// Render with swapped shape or structure, or with scaled wrinkles.
    Edit {
        /// Sequence directory supplying the poses and background.
        #[arg(long)]
        poses: PathBuf,
        /// Output directory for frames.
        #[arg(long)]
        out: PathBuf,
        /// Sequence directory whose label maps replace the predicted shape.
        #[arg(long)]
        shape_from: Option<PathBuf>,
        /// Sequence directory whose frames supply the structure.
        #[arg(long)]
        structure_from: Option<PathBuf>,
        /// Multiply structure confidence by this factor.
        #[arg(long)]
        wrinkles: Option<f64>,
    },
    /// Compare two frame directories: L1, SSIM, perceptual and Fréchet distance.
    Evaluate {
        /// Directory of predicted frames.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of reference frames.
        #[arg(long)]
        gt: PathBuf,
    },
    /// Rank methods from paired-comparison votes.
    Study {
        /// CSV with columns method, participant, vote.
        #[arg(long)]
        votes: PathBuf,
        /// Critical value W of the range statistic (default: built-in table).
        #[arg(long = "W")]
        w: Option<f64>,
        /// Participants (default: distinct participants in the CSV).
        #[arg(long)]
        m: Option<usize>,
        /// Methods (default: distinct methods in the CSV).
        #[arg(long)]
        t: Option<usize>,
        /// Confidence level.
        #[arg(long)]
        alpha: Option<f64>,
        /// Times each participant judged each pair.
        #[arg(long)]
        comparisons_per_pair: Option<usize>,
        /// Write <prefix>.csv and <prefix>.txt reports.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write structure and segmentation panels.
    Visualize {
        /// Sequence directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command, &cli.common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // `kind: message`, without the kind repeated from the Display text.
            let text = e.to_string();
            let message = text.strip_prefix(&format!("{} error: ", e.kind())).unwrap_or(&text);
            eprintln!("error: {}: {message}", e.kind());
            ExitCode::from(1)
        }
    }
}
