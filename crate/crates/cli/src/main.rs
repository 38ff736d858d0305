//! `cxrlt` command-line pipelines over EMB1 features, CSV label/score tables
//! and JSON configuration.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 when an input file is
//! missing or malformed. Set `CXRLT_LOG` (e.g. `info`, `debug`) for log output
//! on stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cxrlt", version, about = "Long-tailed multi-label and zero-shot classification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Evaluate scores against binary labels and print an EvalReport as JSON.
    Metrics(MetricsArgs),
    /// Per-class ECE, mECE and reliability bins as JSON.
    Calibrate(CalibrateArgs),
    /// Logit-ensemble weight search.
    #[command(subcommand)]
    Ensemble(EnsembleCommand),
    /// Fit a linear AP/PA vs lateral router.
    TrainRouter(TrainRouterArgs),
    /// Route samples to projection branches and fuse member logits.
    Route(RouteArgs),
    /// Zero-shot class probabilities from image embeddings and a prompt file.
    Zeroshot(ZeroshotArgs),
    /// Train dual-branch projection heads and write a checkpoint and trace.
    TrainDual(TrainDualArgs),
    /// Leak-free proxy split for held-out class groups.
    ProxySplit(ProxySplitArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct OutputArg {
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Score or logit CSV (`id,<class>...`).
    #[arg(long)]
    scores: PathBuf,
    /// Binary label CSV with the same ids and classes.
    #[arg(long)]
    labels: PathBuf,
    /// Treat scores as probabilities instead of logits.
    #[arg(long)]
    probabilities: bool,
    /// Number of equal-width ECE bins.
    #[arg(long, default_value_t = 15)]
    bins: usize,
    /// Decision threshold on probabilities for F1.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Restrict evaluation to these classes (comma separated).
    #[arg(long, value_delimiter = ',')]
    columns: Vec<String>,
    #[command(flatten)]
    output: OutputArg,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Treat scores as logits and apply a sigmoid first.
    #[arg(long)]
    logits: bool,
    #[arg(long, default_value_t = 15)]
    bins: usize,
    #[command(flatten)]
    output: OutputArg,
}

#[derive(Debug, Subcommand)]
enum EnsembleCommand {
    /// Grid search for simplex weights over member logit files.
    Search(EnsembleSearchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ObjectiveArg {
    Map,
    Mauc,
    NegBce,
}

#[derive(Debug, Args)]
struct EnsembleSearchArgs {
    /// AP/PA member logit CSVs, in member order.
    #[arg(long, num_args = 1.., required = true)]
    members: Vec<PathBuf>,
    /// Labels for the AP/PA members.
    #[arg(long)]
    labels: PathBuf,
    /// Lateral member logit CSVs.
    #[arg(long, num_args = 1..)]
    lateral_members: Vec<PathBuf>,
    /// Labels for the lateral members.
    #[arg(long)]
    lateral_labels: Option<PathBuf>,
    /// Lattice spacing; must divide 1 evenly.
    #[arg(long, default_value_t = 0.05)]
    step: f64,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Map)]
    objective: ObjectiveArg,
    #[command(flatten)]
    output: OutputArg,
}

#[derive(Debug, Args)]
struct TrainRouterArgs {
    /// EMB1 feature matrix.
    #[arg(long)]
    features: PathBuf,
    /// CSV `id,lateral` with 1 for lateral views.
    #[arg(long)]
    projections: PathBuf,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: OutputArg,
}

#[derive(Debug, Args)]
struct RouteArgs {
    #[arg(long)]
    features: PathBuf,
    /// Router JSON from `train-router`.
    #[arg(long)]
    router: PathBuf,
    /// Weights JSON from `ensemble search`.
    #[arg(long)]
    weights: PathBuf,
    /// AP/PA branch member logit CSVs.
    #[arg(long, num_args = 1..)]
    ap_pa: Vec<PathBuf>,
    /// Lateral branch member logit CSVs.
    #[arg(long, num_args = 1..)]
    lateral: Vec<PathBuf>,
    #[command(flatten)]
    output: OutputArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Prob,
    Embed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PromptSource {
    /// Class names and descriptions together.
    Hybrid,
    Names,
    Descriptions,
}

#[derive(Debug, Args)]
struct ZeroshotArgs {
    /// EMB1 image embeddings (raw features when `--checkpoint` is given).
    #[arg(long)]
    images: PathBuf,
    /// Prompt JSON file.
    #[arg(long)]
    prompts: PathBuf,
    /// Dual-branch checkpoint projecting images and prompts to a joint space.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Softmax temperature; defaults to the checkpoint's, else 0.07.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, value_enum, default_value_t = ModeArg::Prob)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = PromptSource::Hybrid)]
    source: PromptSource,
    /// Seed of the built-in bag-of-words text embedder.
    #[arg(long, default_value_t = 0)]
    embed_seed: u64,
    #[command(flatten)]
    output: OutputArg,
}

#[derive(Debug, Args)]
struct TrainDualArgs {
    /// EMB1 image feature matrix.
    #[arg(long)]
    features: PathBuf,
    /// Binary label CSV.
    #[arg(long)]
    labels: PathBuf,
    /// JSON array with one description per label column.
    #[arg(long)]
    descriptions: PathBuf,
    /// Run configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Proxy split JSON from `proxy-split`; trains on retained classes and
    /// validates on held-out ones.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dimension of the built-in text embedder.
    #[arg(long, default_value_t = 64)]
    text_dim: usize,
    #[arg(long, default_value_t = 0)]
    embed_seed: u64,
    /// Checkpoint of the final weights.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Checkpoint of the EMA weights.
    #[arg(long)]
    ema_checkpoint: Option<PathBuf>,
    /// Per-epoch trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProxySplitArgs {
    #[arg(long)]
    labels: PathBuf,
    /// JSON array of three fold specs; built-in folds when omitted.
    #[arg(long)]
    folds: Option<PathBuf>,
    /// Only this group (A, B or C).
    #[arg(long)]
    group: Option<String>,
    #[command(flatten)]
    output: OutputArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SynthKind {
    /// Long-tailed features and labels.
    Longtail,
    /// Long-tailed data with an AP/PA vs lateral shift.
    Projection,
    /// Projection data plus per-branch ensemble member logits.
    Members,
    /// Description-grounded data with prompts and proxy folds.
    Zeroshot,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    /// Output directory; created if missing.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long, default_value_t = 30)]
    classes: usize,
    #[arg(long, default_value_t = 1.2)]
    zipf: f64,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Members per branch for `--kind members`.
    #[arg(long, default_value_t = 3)]
    members: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CXRLT_LOG", "warn")).init();
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
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
