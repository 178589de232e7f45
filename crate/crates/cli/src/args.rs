use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kernflow::embed::EmbeddingKind;
use kernflow::pipeline::{KernelName, LossKind, RunConfig, SupportMode};

#[derive(Debug, Parser)]
#[command(name = "kernflow", version, about = "Kernel scene flow estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the flow between one source and target cloud.
    Estimate(EstimateArgs),
    /// Run every pair of a manifest and report metrics.
    Benchmark(BenchmarkArgs),
    /// Write a synthetic scene pair and register it in a manifest.
    Synth(SynthArgs),
    /// Write a flow-colored PLY for viewing.
    ExportViz(ExportVizArgs),
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Predicted flow output (.flw or .xyz).
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth flow; adds metrics to the run record.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Run record JSON.
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Per-iteration trace as JSON lines.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Aggregate JSON output; printed to stdout when unset.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Process samples concurrently. Per-sample timings then overlap.
    #[arg(long)]
    pub parallel_samples: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CloudFormat {
    Xyz,
    Pcf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory; created when missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Scene spec JSON; flags below override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub objects: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub background: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of pairs, seeded consecutively from the base seed.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Id prefix for file names and manifest entries.
    #[arg(long, default_value = "scene")]
    pub id: String,
    #[arg(long, value_enum, default_value = "pcf")]
    pub format: CloudFormat,
    /// Manifest to create or extend; defaults to `<out>/manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportVizArgs {
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long)]
    pub flow: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmbeddingArg {
    Identity,
    Rff,
    Peat,
    PeatKnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Rbf,
    Sinc,
    Softmax,
    Sigmoid,
    Tanh,
    Laplacian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SupportArg {
    Grid,
    TargetPoints,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Chamfer,
    Dt,
}

/// Run configuration flags. Each one overrides the config file, which
/// overrides the built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub embedding: Option<EmbeddingArg>,
    #[arg(long)]
    pub rff_dim: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub rff_scale: Option<f64>,
    #[arg(long)]
    pub peat_weights: Option<PathBuf>,
    #[arg(long)]
    pub knn: Option<usize>,
    #[arg(long, value_enum)]
    pub kernel: Option<KernelArg>,
    #[arg(long, allow_negative_numbers = true)]
    pub sigma: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub kernel_scale: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub width: Option<f64>,
    #[arg(long, value_enum)]
    pub support: Option<SupportArg>,
    #[arg(long, allow_negative_numbers = true)]
    pub grid_spacing: Option<f64>,
    /// Explicit lattice counts as `nx,ny,nz`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub grid_counts: Option<Vec<usize>>,
    #[arg(long)]
    pub max_supports: Option<usize>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long)]
    pub bidirectional: bool,
    #[arg(long, allow_negative_numbers = true)]
    pub dt_spacing: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub dt_padding: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub min_delta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    /// Overlays the flags that were given onto `cfg`.
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(e) = self.embedding {
            cfg.embedding.kind = match e {
                EmbeddingArg::Identity => EmbeddingKind::Identity,
                EmbeddingArg::Rff => EmbeddingKind::Rff,
                EmbeddingArg::Peat => EmbeddingKind::Peat,
                EmbeddingArg::PeatKnn => EmbeddingKind::PeatKnn,
            };
        }
        set(&mut cfg.embedding.rff_dim, self.rff_dim);
        if self.rff_scale.is_some() {
            cfg.embedding.rff_scale = self.rff_scale;
        }
        if self.peat_weights.is_some() {
            cfg.embedding.peat_weights = self.peat_weights.clone();
        }
        set(&mut cfg.embedding.knn, self.knn);
        if let Some(k) = self.kernel {
            cfg.kernel.kind = match k {
                KernelArg::Rbf => KernelName::Rbf,
                KernelArg::Sinc => KernelName::Sinc,
                KernelArg::Softmax => KernelName::Softmax,
                KernelArg::Sigmoid => KernelName::Sigmoid,
                KernelArg::Tanh => KernelName::Tanh,
                KernelArg::Laplacian => KernelName::Laplacian,
            };
        }
        if self.sigma.is_some() {
            cfg.kernel.sigma = self.sigma;
        }
        if self.kernel_scale.is_some() {
            cfg.kernel.scale = self.kernel_scale;
        }
        if self.width.is_some() {
            cfg.kernel.width = self.width;
        }
        if let Some(s) = self.support {
            cfg.support.mode = match s {
                SupportArg::Grid => SupportMode::Grid,
                SupportArg::TargetPoints => SupportMode::TargetPoints,
            };
        }
        set(&mut cfg.support.spacing, self.grid_spacing);
        if let Some(c) = &self.grid_counts {
            cfg.support.counts = Some([c[0], c[1], c[2]]);
        }
        set(&mut cfg.support.max_total, self.max_supports);
        if let Some(l) = self.loss {
            cfg.loss.kind = match l {
                LossArg::Chamfer => LossKind::Chamfer,
                LossArg::Dt => LossKind::Dt,
            };
        }
        if self.bidirectional {
            cfg.loss.bidirectional = true;
        }
        set(&mut cfg.loss.dt_spacing, self.dt_spacing);
        set(&mut cfg.loss.dt_padding, self.dt_padding);
        set(&mut cfg.optim.learning_rate, self.lr);
        set(&mut cfg.optim.max_iters, self.iters);
        set(&mut cfg.optim.lambda_l1, self.lambda);
        set(&mut cfg.optim.early_stop_patience, self.patience);
        set(&mut cfg.optim.early_stop_min_delta, self.min_delta);
        set(&mut cfg.seed, self.seed);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
