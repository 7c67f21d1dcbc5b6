//! `portraitgan` command-line driver.
//!
//! Bootstrap order on a fresh workspace: `make-data`, `pretrain`,
//! `train-encoder` (w, wplus, zplus), `finetune-unconstrained`, `make-pairs`,
//! `finetune`; then `stylize`, `mix`, `invert-ref`, `evaluate`, `study` or
//! `serve`.

mod commands;
mod config;
mod workspace;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use portraitgan::encoder::EncoderTarget;
use portraitgan::pseudo_pairs::PairLevel;
use portraitgan::{Error, Result};

pub use config::{Config, DataConfig, EvalConfig, StudyConfig};
pub use workspace::Workspace;

#[derive(Debug, Parser)]
#[command(name = "portraitgan", version, about = "Constrained StyleGAN fine-tuning for portrait stylization")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// JSON config; defaults apply to missing fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    pub workspace: PathBuf,
    #[arg(long, global = true, default_value = "cartoon")]
    pub style: String,
    /// Truncation ψ override.
    #[arg(long, global = true)]
    pub psi: Option<f64>,
    /// Mixing layer index.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub pair_level: Option<PairLevel>,
    /// Iteration override for the subcommand's optimizer.
    #[arg(long, global = true)]
    pub iters: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Render the procedural photo, portrait and style datasets.
    MakeData,
    /// Train the real-face generator and discriminator.
    Pretrain,
    /// Train an image encoder against the pretrained generator.
    TrainEncoder {
        #[arg(long)]
        target: EncoderTarget,
    },
    /// Fine-tune without constraints, producing G*.
    FinetuneUnconstrained,
    /// Build the pseudo-paired dataset for a style.
    MakePairs,
    /// Constrained fine-tuning, producing G′.
    Finetune {
        #[arg(long)]
        lambda_semantic: Option<f64>,
        #[arg(long)]
        lambda_paired: Option<f64>,
        /// Model name under models/<style>/.
        #[arg(long, default_value = "g_prime")]
        name: String,
    },
    /// General stylization of one image or a directory of images.
    Stylize(RenderArgs),
    /// Multimodal (noise) or reference-guided mixing.
    Mix {
        #[command(flatten)]
        render: RenderArgs,
        /// Reference image; switches from noise to reference mode.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Embed reference images into the style's V space (cached).
    InvertRef {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long, default_value = "g_prime")]
        model: String,
    },
    /// Metrics report for every fine-tuned model of a style.
    Evaluate,
    Study {
        #[arg(value_enum)]
        kind: StudyKind,
        #[arg(long, default_value = "g_prime")]
        model: String,
    },
    /// Run the studio HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Built frontend bundle served at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    /// Image file or directory of PNGs.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file (single input) or directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "g_prime")]
    pub model: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StudyKind {
    /// Content encoding in W, W+ and Z+.
    ContentSpace,
    /// Reference inversion in W, W+, Z+ and V.
    RefSpace,
    /// Fine-tuning with pair levels 1, 2 and 3.
    PairLevel,
    /// λ_semantic and λ_paired sweeps.
    Sweep,
}

/// Process exit code for a failed run.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::InvalidParameter(_)
        | Error::EmptyDataset(_)
        | Error::Load { .. }
        | Error::StyleMismatch { .. } => 2,
        Error::NumericAbort { .. } => 3,
        _ => 1,
    }
}

/// Resolves the config and runs one subcommand.
pub fn run(cli: Cli) -> Result<()> {
    let base = match &cli.global.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let seed = cli.global.seed.unwrap_or(base.seed);
    let cfg = base.with_seed(seed);
    cfg.validate()?;
    if let Some(psi) = cli.global.psi {
        if !(0.0..=1.0).contains(&psi) {
            return Err(Error::InvalidParameter(format!("psi {psi} outside [0, 1]")));
        }
    }
    let ctx = commands::Ctx {
        cfg,
        ws: Workspace::new(&cli.global.workspace),
        g: cli.global,
    };
    commands::dispatch(&ctx, cli.command)
}
