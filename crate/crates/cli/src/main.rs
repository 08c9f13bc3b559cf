mod commands;
mod resolve;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Disentangled content/attribute image-to-image translation.
#[derive(Debug, Parser)]
#[command(name = "distran", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Hyperparameter file: a flat JSON object keyed by hyperparameter name.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory. Defaults to `$DISTRAN_OUT_ROOT/<verb>`, or
    /// `distran-out/<verb>` when the variable is unset.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Hyperparameter override `key=value`; repeatable, wins over --config.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic two-factor dataset.
    Dataset(DatasetArgs),
    /// Train a model on an image folder.
    Train(TrainArgs),
    /// Translate one image with random attributes.
    Translate(TranslateArgs),
    /// Walk the attribute space between two endpoints.
    Interpolate(InterpolateArgs),
    /// Render one image's content with another image's attributes.
    Transfer(TransferArgs),
    /// Compute distribution, diversity and disentanglement metrics.
    Evaluate(EvaluateArgs),
    /// Export flattened content codes as CSV.
    Embed(EmbedArgs),
    /// Write a markdown summary of a run directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Synthetic set parameters: `k=<domains> n=<per domain> [size=<pixels>]`.
    #[arg(long, num_args = 1.., value_name = "KEY=VALUE", required = true)]
    pub synth: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root holding `domain_<i>/` (or `trainA/`, `trainB/`) folders.
    #[arg(long)]
    pub data: PathBuf,
    /// `dual` (per-domain networks) or `multi` (shared, code-conditioned).
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Channel width of the first convolution stage.
    #[arg(long)]
    pub base_width: Option<usize>,
    /// Checkpoint period in steps (0: final only).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Sample-grid period in steps (0: final only).
    #[arg(long)]
    pub sample_every: Option<u64>,
    /// Train on random crops of images loaded slightly larger.
    #[arg(long)]
    pub random_crop: bool,
    /// Continue from this checkpoint; its configuration must match.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Source image (PNG).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub source_domain: usize,
    #[arg(long)]
    pub target_domain: usize,
    /// Number of samples.
    #[arg(long, default_value_t = 5)]
    pub n: usize,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub source_domain: usize,
    #[arg(long)]
    pub target_domain: usize,
    /// Frame count including both endpoints.
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    /// Image whose attribute mean (in the target domain) is the first
    /// endpoint. Without both endpoint images, endpoints are prior draws.
    #[arg(long, requires = "endpoint_b")]
    pub endpoint_a: Option<PathBuf>,
    /// Image for the last endpoint.
    #[arg(long, requires = "endpoint_a")]
    pub endpoint_b: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image providing the content.
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long)]
    pub content_domain: usize,
    /// Image providing the attributes; its domain is the output domain.
    #[arg(long)]
    pub attribute: PathBuf,
    #[arg(long)]
    pub attribute_domain: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Label sidecar; defaults to `<data>/labels.json` when present.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Random translations per source image.
    #[arg(long, default_value_t = 10)]
    pub samples_per_image: usize,
    /// Use at most this many source images per domain.
    #[arg(long)]
    pub max_images: Option<usize>,
    /// K-means bins for the bin-proportion metrics.
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Seed of the random feature network.
    #[arg(long, default_value_t = 0)]
    pub feature_seed: u64,
    /// Precomputed real-set features (CSV). With --gen-features, adds
    /// `external_fid`, `external_ndb`, `external_jsd` and
    /// `external_perceptual_diversity` computed from the two files.
    #[arg(long, requires = "gen_features")]
    pub real_features: Option<PathBuf>,
    /// Precomputed generated-set features (CSV).
    #[arg(long, requires = "real_features")]
    pub gen_features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory produced by `train` (and optionally `evaluate`).
    #[arg(long)]
    pub run: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message().replace('\n', " "));
            ExitCode::from(e.exit_code())
        }
    }
}
