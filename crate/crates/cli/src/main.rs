mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "sscd", version, about = "Semantic scene change detection: data preparation, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize training tuples for the semantic labeler from segmentation data.
    Synthesize(SynthesizeArgs),
    /// Cut panoramic pairs into rotated square patches.
    Patches(PatchesArgs),
    /// Train the change detector on pairs with change masks.
    TrainCd(TrainArgs),
    /// Train the semantic labeler on synthesized tuples.
    TrainSscd(TrainArgs),
    /// Train the end-to-end semantic change detector on labeled pairs.
    TrainCsscd(TrainArgs),
    /// Evaluate checkpoints on a pair dataset.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Render procedural toy datasets.
    Toygen(ToygenArgs),
}

#[derive(Args, Debug)]
pub struct SynthesizeArgs {
    /// Segmentation dataset: `<id>/image.ppm, labels.pgm`.
    #[arg(long)]
    pub seg_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = sscd_core::synthesis::DEFAULT_N_MAX)]
    pub n_max: usize,
    #[arg(long)]
    pub seed: u64,
    /// Class mapping applied to the source labels (`source target` lines).
    #[arg(long)]
    pub mapping: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PatchesArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 224)]
    pub crop: usize,
    /// Side length after resizing.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 30)]
    pub crops_per_image: usize,
    /// Comma-separated clockwise rotations in degrees.
    #[arg(long, default_value = "0,90,180,270", value_delimiter = ',')]
    pub rotations: Vec<u32>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Pair dataset (`<id>/t0.ppm, t1.ppm, mask.pgm[, label0.pgm, label1.pgm]`).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, loss trace and run manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// `key=value` file with model and training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named preset: `toy` (widths 16..128, batch 8) or `full`.
    #[arg(long, default_value = "full")]
    pub preset: String,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Correlation search radius of the change detector trunk.
    #[arg(long)]
    pub max_disp: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Morphological mask augmentation (semantic labeler only).
    #[arg(long)]
    pub augment: bool,
    /// Cut the pairs into patches with the default geometry before training.
    #[arg(long)]
    pub extract_patches: bool,
    /// Number of cross-validation folds; training uses every fold but `--fold`.
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// cd, sscd, pipeline or csscd.
    #[arg(long)]
    pub mode: String,
    /// Change detector (cd, pipeline) or semantic model (sscd, csscd).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Semantic labeler for pipeline mode.
    #[arg(long)]
    pub semantic_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f32,
    /// `class_id R G B` palette for overlays.
    #[arg(long)]
    pub palette: Option<PathBuf>,
    /// Evaluate only the test part of fold `--fold` of a `--folds`-way split.
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// Seed of the fold split; must match the one used for training.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Also write the report to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ToygenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// `pairs` (change pairs with labels) or `seg` (segmentation samples).
    #[arg(long, default_value = "pairs")]
    pub kind: String,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long)]
    pub seed: u64,
    /// Horizontal shift of the second image's content, in pixels.
    #[arg(long, default_value_t = 0)]
    pub shift: isize,
    /// Altered objects per scene as `min,max`.
    #[arg(long, value_delimiter = ',')]
    pub alterations: Option<Vec<usize>>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain() {
                let text = cause.to_string();
                if !msg.contains(&text) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&text);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
