//! Command-line surface. Defaults marked [paper] come from the published
//! method; [tuned] ones were chosen for this implementation.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use peel_core::blockinv::ComplementarityMode;
use peel_core::model::PIXEL_SCALE;
use peel_core::{PenaltyConfig, ShallowConfig};

#[derive(Debug, Parser)]
#[command(
    name = "peel",
    version,
    about = "Reconstruct residual-network inputs from intermediate features"
)]
pub struct Cli {
    /// Only report warnings and errors on standard error.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a randomly initialized model directory.
    GenModel(GenModelArgs),
    /// Run inference and write the stem and block outputs.
    Forward(ForwardArgs),
    /// Recover the input of one block from its output.
    InvertBlock(InvertBlockArgs),
    /// Recover an image from the stem output.
    InvertShallow(InvertShallowArgs),
    /// Reconstruct the image from the last block output.
    Peel(PeelArgs),
    /// Globally optimal block inversion by sign-pattern enumeration.
    Oracle(OracleArgs),
    /// Compare two tensors or images.
    Metrics(MetricsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, clap::ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitArg {
    FanInUniform,
    FanIn,
    Gaussian,
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    /// resnet18, resnet34, resnet50a, resnet152a or a custom manifest path.
    #[arg(long)]
    pub arch: String,
    #[arg(long, env = "PEEL_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Weight distribution [tuned].
    #[arg(long, value_enum, default_value_t = InitArg::FanInUniform)]
    pub init: InitArg,
    /// Standard deviation for --init gaussian.
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    /// Max-pool after the stem convolution (built-in architectures).
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub pooling: bool,
    /// Replace every activation by PReLU with this negative slope.
    #[arg(long, value_name = "A")]
    pub prelu: Option<f64>,
    /// C,H,W of the input (built-in architectures).
    #[arg(long, value_parser = parse_dims, default_value = "3,64,64")]
    pub input_dims: [usize; 3],
    /// Channels of the first stage (built-in architectures).
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Input normalization in front of the stem [tuned: maps 0–255 to 0–1].
    #[arg(long, default_value_t = PIXEL_SCALE)]
    pub input_scale: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Image (.ppm/.pgm) or tensor (.tns).
    #[arg(long)]
    pub input: PathBuf,
    /// Directory receiving stem.tns, block_KK.tns and output.tns.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BlockSolverArgs {
    /// Complementarity weight [paper].
    #[arg(long, default_value_t = 1000.0)]
    pub lambda1: f64,
    /// Splitting weight [paper].
    #[arg(long, default_value_t = 1000.0)]
    pub lambda2: f64,
    /// Adam step size [paper].
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Epochs per block [paper].
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
    /// Step size reached at the last epoch by geometric decay [tuned: off].
    #[arg(long)]
    pub final_lr: Option<f64>,
    /// Fraction of epochs before the decay starts [tuned].
    #[arg(long, default_value_t = 0.5)]
    pub decay_start: f64,
    /// Spread of the random starting point [tuned].
    #[arg(long, default_value_t = 0.01)]
    pub init_scale: f64,
    /// Complementarity penalty form [tuned].
    #[arg(long, value_parser = parse_comp, default_value = "scalar")]
    pub comp: ComplementarityMode,
}

fn parse_list<T: std::str::FromStr, const N: usize>(s: &str) -> Result<[T; N], String> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| format!("'{p}' is not a number"))
        })
        .collect::<Result<_, _>>()?;
    let n = parts.len();
    parts
        .try_into()
        .map_err(|_| format!("expected {N} comma-separated values, got {n}"))
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    parse_list(s)
}

fn parse_box(s: &str) -> Result<[f64; 2], String> {
    parse_list(s)
}

fn parse_comp(s: &str) -> Result<ComplementarityMode, String> {
    s.parse().map_err(|e: peel_core::PeelError| e.to_string())
}

impl BlockSolverArgs {
    pub fn config(&self, seed: u64) -> PenaltyConfig {
        PenaltyConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lr: self.lr,
            final_lr: self.final_lr,
            decay_start: if self.final_lr.is_some() {
                self.decay_start
            } else {
                0.0
            },
            epochs: self.epochs,
            seed,
            init_scale: self.init_scale,
            complementarity: self.comp,
            ..PenaltyConfig::default()
        }
    }
}

/// Regularizer flags shared by invert-shallow and peel.
#[derive(Debug, Clone, Args)]
pub struct ShallowRegArgs {
    /// Weight of the α-norm prior [tuned].
    #[arg(long, default_value_t = 1e-7)]
    pub lalpha: f64,
    /// Weight of the total-variation prior [tuned].
    #[arg(long, default_value_t = 1e-6)]
    pub lvbeta: f64,
    /// α-norm exponent [paper].
    #[arg(long, default_value_t = 6.0)]
    pub alpha: f64,
    /// Total-variation exponent [paper].
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    /// Pixel range lo,hi [tuned].
    #[arg(long, value_parser = parse_box, default_value = "0,255")]
    pub pixel_box: [f64; 2],
}

impl ShallowRegArgs {
    pub fn config(&self, lr: f64, final_lr: f64, epochs: usize, seed: u64) -> ShallowConfig {
        ShallowConfig {
            lambda_alpha: self.lalpha,
            lambda_vbeta: self.lvbeta,
            alpha: self.alpha,
            beta: self.beta,
            lr,
            final_lr: Some(final_lr),
            epochs,
            seed,
            pixel_box: self.pixel_box,
            ..ShallowConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct InvertBlockArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// 1-based block index.
    #[arg(long)]
    pub block: usize,
    /// Output of the block.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value = "xhat.tns")]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// True block input, for scoring.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, env = "PEEL_SEED", default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub solver: BlockSolverArgs,
}

#[derive(Debug, Args)]
pub struct InvertShallowArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Stem output.
    #[arg(long)]
    pub features: PathBuf,
    /// Image (.ppm/.pgm) or tensor (.tns).
    #[arg(long, default_value = "recon.ppm")]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// True image, for scoring.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, env = "PEEL_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Adam step size [tuned].
    #[arg(long, default_value_t = 5.0)]
    pub lr: f64,
    /// Step size at the last epoch [tuned].
    #[arg(long, default_value_t = 0.01)]
    pub final_lr: f64,
    /// Epochs [tuned].
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
    #[command(flatten)]
    pub reg: ShallowRegArgs,
}

#[derive(Debug, Args)]
pub struct PeelArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Output of the last block.
    #[arg(long)]
    pub features: PathBuf,
    /// Reconstructed image (.ppm/.pgm) or tensor (.tns).
    #[arg(long, default_value = "recon.ppm")]
    pub out: PathBuf,
    #[arg(long, default_value = "report.json")]
    pub report: PathBuf,
    /// Per-layer error table (markdown); defaults to REPORT with .md.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// True image; enables per-block relative errors.
    #[arg(long)]
    pub truth_image: Option<PathBuf>,
    #[arg(long, env = "PEEL_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Independent runs with seeds SEED, SEED+1, ...
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    /// Worker threads across runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub solver: BlockSolverArgs,
    /// Shallow-stage step size [tuned].
    #[arg(long, default_value_t = 5.0)]
    pub shallow_lr: f64,
    /// Shallow-stage step size at the last epoch [tuned].
    #[arg(long, default_value_t = 0.01)]
    pub shallow_final_lr: f64,
    /// Shallow-stage epochs [tuned].
    #[arg(long, default_value_t = 2000)]
    pub shallow_epochs: usize,
    #[command(flatten)]
    pub reg: ShallowRegArgs,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub block: usize,
    #[arg(long)]
    pub features: PathBuf,
    /// Refuse blocks with more hidden units than this (2^N patterns).
    #[arg(long, default_value_t = peel_core::oracle::DEFAULT_MAX_HIDDEN)]
    pub max_hidden: usize,
    #[arg(long, default_value = "oracle.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Peak value for PSNR.
    #[arg(long, default_value_t = 255.0)]
    pub max_val: f64,
    /// Reference feature tensors for the nearest-neighbour distance of --test.
    #[arg(long)]
    pub knn_ref: Vec<PathBuf>,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
