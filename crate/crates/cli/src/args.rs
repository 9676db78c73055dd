use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lsp_core::attack::{AttackKind, AttackLoss, Norm};
use lsp_core::certify::LipschitzMode;
use lsp_core::structure::{Discrepancy, StructureMode};

#[derive(Debug, Parser)]
#[command(name = "lsp", version, about = "Local structure preserving training and robustness evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a feature extractor by instance discrimination.
    Pretext(PretextArgs),
    /// Standard training with the structure-preserving term.
    Train(TrainArgs),
    /// Adversarial training with the memory-bank structure term.
    TrainAdv(TrainAdvArgs),
    /// Evaluate a checkpoint under an attack and append a robustness row.
    Attack(AttackArgs),
    /// Certified radii for a checkpoint.
    Certify(CertifyArgs),
    /// Comparison table and curve CSVs for finished runs.
    Report(ReportArgs),
    /// Re-run a command from its manifest and compare artifact hashes.
    Replay(ReplayArgs),
}

/// Flags accepted by every run-producing command.
#[derive(Debug, Args)]
pub struct Common {
    /// JSON file with settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenKind {
    Moons,
    Blobs,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub kind: Option<GenKind>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Gaussian noise of the two-moons generator.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Cluster spread of the blobs generator.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Number of blob centers.
    #[arg(long)]
    pub centers: Option<usize>,
}

/// Optimizer and schedule flags shared by every training command.
#[derive(Debug, Args)]
pub struct OptimFlags {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning-rate drops as `epoch:divisor`, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub lr_drops: Option<Vec<String>>,
    #[arg(long)]
    pub momentum: Option<f64>,
}

/// Structure-term flags.
#[derive(Debug, Args)]
pub struct StructureFlags {
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub lsp_kind: Option<Discrepancy>,
    #[arg(long)]
    pub structure: Option<StructureMode>,
    #[arg(long)]
    pub early_stopping: Option<bool>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

/// Attack budget flags.
#[derive(Debug, Args)]
pub struct AttackFlags {
    #[arg(long)]
    pub norm: Option<Norm>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub attack_loss: Option<AttackLoss>,
    #[arg(long)]
    pub random_init: Option<bool>,
}

#[derive(Debug, Args)]
pub struct PretextArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub optim: OptimFlags,
    /// Embedding width.
    #[arg(long)]
    pub out_dim: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub bank_momentum: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub optim: OptimFlags,
    #[command(flatten)]
    pub structure: StructureFlags,
    #[command(flatten)]
    pub attack: AttackFlags,
    /// Encoder checkpoint whose features define the input-space structure.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Beta parameter of the Mixup baseline.
    #[arg(long)]
    pub mixup_alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainAdvArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub optim: OptimFlags,
    #[command(flatten)]
    pub structure: StructureFlags,
    #[command(flatten)]
    pub attack: AttackFlags,
    #[arg(long)]
    pub bank_momentum: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub kind: Option<AttackKind>,
    #[command(flatten)]
    pub attack: AttackFlags,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<LipschitzMode>,
    #[arg(long)]
    pub radius_probes: Option<usize>,
    #[arg(long)]
    pub probe_radius: Option<f64>,
    #[arg(long)]
    pub falsify_probes: Option<usize>,
    /// Certify only the first rows of the dataset.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories, one table row each.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Manifest of the run to reproduce.
    pub manifest: PathBuf,
    /// Directory for the reproduced artifacts.
    #[arg(long)]
    pub out: PathBuf,
}
