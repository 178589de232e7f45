//! End-to-end flow estimation for one source/target pair.
//!
//! Widths left unset in the configuration are derived from the scene: the
//! RFF bandwidth from the support lattice spacing, and kernel widths from the
//! feature-space distance between spatially adjacent supports.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::embed::{
    embed_identity, peat_forward, peat_knn_forward, rff_encode, EmbeddedCloud, EmbeddingKind,
    PeatWeights, RffEncoder,
};
use crate::error::{Error, Result};
use crate::geometry::{bounding_box, FlowField, PointCloud};
use crate::kernel::{
    apply_coefficients, grid_supports, support_lattice, kernel_entries, kernel_matrix,
    CoefficientVector, KernelKind, KernelMatrix, SupportSet,
};
use crate::loss::{build_dt_with_budget, ChamferTerm, DataTerm, DtTerm, DEFAULT_VOXEL_BUDGET};
use crate::optimize::{optimize_alpha, OptimConfig, OptimTrace};
use crate::spatial::KdTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub kind: EmbeddingKind,
    pub rff_dim: usize,
    /// RFF bandwidth; derived from the support spacing when unset.
    pub rff_scale: Option<f64>,
    pub peat_dk: usize,
    pub peat_dv: usize,
    /// Weight file for the attention block; seeded random weights when unset.
    pub peat_weights: Option<PathBuf>,
    pub knn: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::Identity,
            rff_dim: RffEncoder::DEFAULT_DIM,
            rff_scale: None,
            peat_dk: 32,
            peat_dv: 32,
            peat_weights: None,
            knn: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelName {
    Rbf,
    Sinc,
    Softmax,
    Sigmoid,
    Tanh,
    Laplacian,
}

impl KernelName {
    pub const ALL: [KernelName; 6] = [
        KernelName::Rbf,
        KernelName::Sinc,
        KernelName::Softmax,
        KernelName::Sigmoid,
        KernelName::Tanh,
        KernelName::Laplacian,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            KernelName::Rbf => "rbf",
            KernelName::Sinc => "sinc",
            KernelName::Softmax => "softmax",
            KernelName::Sigmoid => "sigmoid",
            KernelName::Tanh => "tanh",
            KernelName::Laplacian => "laplacian",
        }
    }
}

impl std::str::FromStr for KernelName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelName::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown kernel {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub kind: KernelName,
    /// Width for rbf, sinc and laplacian; derived when unset.
    pub sigma: Option<f64>,
    /// Inner-product multiplier for softmax, sigmoid and tanh; derived when unset.
    pub scale: Option<f64>,
    /// Derived widths, in units of the adjacent-support feature distance.
    /// Unset means 1.0 for raw coordinates and 0.7 for learned or encoded features.
    pub width: Option<f64>,
    /// Sinc argument uses the squared feature distance.
    pub sinc_squared: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            kind: KernelName::Rbf,
            sigma: None,
            scale: None,
            width: None,
            sinc_squared: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupportMode {
    Grid,
    TargetPoints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupportConfig {
    pub mode: SupportMode,
    /// Target lattice spacing in meters before the caps apply.
    pub spacing: f64,
    pub max_per_axis: usize,
    pub max_total: usize,
    /// Explicit lattice counts, overriding spacing and caps.
    pub counts: Option<[usize; 3]>,
    pub padding: f64,
    /// Extra lattice layers beyond the padded box on each side.
    pub margin_layers: usize,
}

impl Default for SupportConfig {
    fn default() -> Self {
        Self {
            mode: SupportMode::Grid,
            spacing: 0.35,
            max_per_axis: 40,
            max_total: 300,
            counts: None,
            padding: 0.5,
            margin_layers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Chamfer,
    Dt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub bidirectional: bool,
    pub dt_spacing: f64,
    pub dt_padding: f64,
    pub voxel_budget: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Dt,
            bidirectional: false,
            dt_spacing: 0.1,
            dt_padding: 2.0,
            voxel_budget: DEFAULT_VOXEL_BUDGET,
        }
    }
}

pub const DEFAULT_KERNEL_BUDGET: u64 = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub embedding: EmbeddingConfig,
    pub kernel: KernelConfig,
    pub support: SupportConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub seed: u64,
    /// Largest allowed `N * M` for the dense kernel matrix.
    pub kernel_budget: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            embedding: EmbeddingConfig::default(),
            kernel: KernelConfig::default(),
            support: SupportConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            seed: 0,
            kernel_budget: DEFAULT_KERNEL_BUDGET,
        }
    }
}

impl RunConfig {
    /// Attention embeddings always anchor on the raw target points.
    pub fn support_mode(&self) -> SupportMode {
        match self.embedding.kind {
            EmbeddingKind::Peat | EmbeddingKind::PeatKnn => SupportMode::TargetPoints,
            _ => self.support.mode.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")))
            }
        };
        pos("support spacing", self.support.spacing)?;
        pos("dt spacing", self.loss.dt_spacing)?;
        if let Some(w) = self.kernel.width {
            pos("kernel width", w)?;
        }
        if let Some(s) = self.kernel.sigma {
            pos("kernel sigma", s)?;
        }
        if let Some(s) = self.kernel.scale {
            pos("kernel scale", s)?;
        }
        if let Some(s) = self.embedding.rff_scale {
            pos("rff scale", s)?;
        }
        if !(self.support.padding >= 0.0 && self.loss.dt_padding >= 0.0) {
            return Err(Error::InvalidConfig("padding must be >= 0".into()));
        }
        if self.embedding.knn == 0 {
            return Err(Error::InvalidConfig("knn must be >= 1".into()));
        }
        Ok(())
    }
}

/// Parameters actually used for a run, after derivation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedParams {
    pub n_source: usize,
    pub n_support: usize,
    pub grid_counts: Option<[usize; 3]>,
    pub support_spacing: Option<f64>,
    pub rff_scale: Option<f64>,
    pub kernel: KernelKind,
    pub dt_dims: Option<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub embed_s: f64,
    pub kernel_s: f64,
    pub loss_setup_s: f64,
    pub optimize_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub flow: FlowField,
    pub alpha: CoefficientVector,
    pub trace: OptimTrace,
    pub params: ResolvedParams,
    pub times: StageTimes,
}

/// Everything fixed before optimization starts.
pub struct Problem {
    pub kernel: KernelMatrix,
    pub support: SupportSet,
    pub data: Box<dyn DataTerm>,
    pub params: ResolvedParams,
}

/// Builds supports, embeddings, kernel matrix and data term.
pub fn prepare(source: &PointCloud, target: &PointCloud, cfg: &RunConfig) -> Result<(Problem, StageTimes)> {
    cfg.validate()?;
    let t0 = Instant::now();
    let mode = cfg.support_mode();

    let (support, counts) = match mode {
        SupportMode::TargetPoints => (SupportSet::target_points(target), None),
        SupportMode::Grid => {
            let bbox = bounding_box(&[source, target], cfg.support.padding)?;
            let (lattice, counts) = match cfg.support.counts {
                Some(c) => (bbox, c),
                None => support_lattice(
                    &bbox,
                    cfg.support.spacing,
                    cfg.support.max_per_axis,
                    cfg.support.max_total,
                    cfg.support.margin_layers,
                )?,
            };
            (grid_supports(&lattice, counts)?, Some(counts))
        }
    };
    let entries = kernel_entries(source.len(), support.len());
    if entries > cfg.kernel_budget {
        return Err(Error::KernelTooLarge {
            entries,
            budget: cfg.kernel_budget,
        });
    }
    let spacing = support.max_spacing().filter(|h| *h > 0.0);
    let support_cloud = support.as_cloud()?;

    let mut rff_scale = None;
    let (src_feat, sup_feat) = match cfg.embedding.kind {
        EmbeddingKind::Identity => (embed_identity(source), embed_identity(&support_cloud)),
        EmbeddingKind::Rff => {
            let beta = cfg
                .embedding
                .rff_scale
                .or(spacing.map(rff_scale_for_spacing))
                .unwrap_or(RffEncoder::DEFAULT_SCALE);
            rff_scale = Some(beta);
            let enc = RffEncoder::new(cfg.embedding.rff_dim, beta, cfg.seed)?;
            (rff_encode(source, &enc), rff_encode(&support_cloud, &enc))
        }
        EmbeddingKind::Peat | EmbeddingKind::PeatKnn => {
            let beta = cfg.embedding.rff_scale.unwrap_or(RffEncoder::DEFAULT_SCALE);
            rff_scale = Some(beta);
            let enc = RffEncoder::new(cfg.embedding.rff_dim, beta, cfg.seed)?;
            let weights = match &cfg.embedding.peat_weights {
                Some(p) => crate::io::read_peat_weights(p)?,
                None => PeatWeights::random(cfg.embedding.rff_dim, cfg.embedding.peat_dk, cfg.embedding.peat_dv, cfg.seed)?,
            };
            if cfg.embedding.kind == EmbeddingKind::Peat {
                for n in [source.len(), target.len()] {
                    let e = kernel_entries(n, n);
                    if e > cfg.kernel_budget {
                        return Err(Error::KernelTooLarge {
                            entries: e,
                            budget: cfg.kernel_budget,
                        });
                    }
                }
                (peat_forward(source, &enc, &weights)?, peat_forward(target, &enc, &weights)?)
            } else {
                let l = cfg.embedding.knn;
                (
                    peat_knn_forward(source, &enc, &weights, l.min(source.len()))?,
                    peat_knn_forward(target, &enc, &weights, l.min(target.len()))?,
                )
            }
        }
    };
    let t_embed = t0.elapsed().as_secs_f64();

    let kind = resolve_kernel(&cfg.kernel, cfg.embedding.kind, &support, &sup_feat)?;
    let kernel = kernel_matrix(&src_feat, &sup_feat, kind)?;
    let t_kernel = t0.elapsed().as_secs_f64();

    let (data, dt_dims): (Box<dyn DataTerm>, _) = match cfg.loss.kind {
        LossKind::Chamfer => (Box::new(ChamferTerm::new(target, cfg.loss.bidirectional)), None),
        LossKind::Dt => {
            let bbox = bounding_box(&[source, target], cfg.loss.dt_padding)?;
            let grid = build_dt_with_budget(target, &bbox, cfg.loss.dt_spacing, cfg.loss.voxel_budget)?;
            let dims = grid.dims();
            (Box::new(DtTerm::new(grid)), Some(dims))
        }
    };
    let t_loss = t0.elapsed().as_secs_f64();

    let params = ResolvedParams {
        n_source: source.len(),
        n_support: support.len(),
        grid_counts: counts,
        support_spacing: spacing,
        rff_scale,
        kernel: kind,
        dt_dims,
    };
    let times = StageTimes {
        embed_s: t_embed,
        kernel_s: t_kernel - t_embed,
        loss_setup_s: t_loss - t_kernel,
        optimize_s: 0.0,
        total_s: t_loss,
    };
    Ok((
        Problem {
            kernel,
            support,
            data,
            params,
        },
        times,
    ))
}

/// Bandwidth that makes the RFF-space RBF kernel with `sigma = sqrt(D)/4`
/// behave like a Gaussian of width `h` in coordinate space.
pub fn rff_scale_for_spacing(h: f64) -> f64 {
    1.0 / (4.0 * std::f64::consts::SQRT_2 * std::f64::consts::PI * h)
}

/// Median squared feature distance between each support and its spatially
/// nearest other support, over at most 512 evenly strided supports.
fn adjacent_feature_distance2(support: &SupportSet, features: &EmbeddedCloud) -> f64 {
    let m = support.len();
    if m < 2 {
        return 1.0;
    }
    let tree = KdTree::build(&support.points);
    let stride = m.div_ceil(512);
    let mut d2: Vec<f64> = (0..m)
        .step_by(stride)
        .filter_map(|i| {
            let nb = tree.knn(&support.points[i], 2).into_iter().find(|n| n.index != i)?;
            let a = features.features.row(i);
            let b = features.features.row(nb.index);
            Some((a - b).norm_squared())
        })
        .filter(|d| *d > 0.0)
        .collect();
    if d2.is_empty() {
        return 1.0;
    }
    d2.sort_by(f64::total_cmp);
    d2[d2.len() / 2]
}

pub const RAW_WIDTH: f64 = 1.0;
pub const FEATURE_WIDTH: f64 = 0.7;

fn resolve_kernel(
    cfg: &KernelConfig,
    embedding: EmbeddingKind,
    support: &SupportSet,
    sup_feat: &EmbeddedCloud,
) -> Result<KernelKind> {
    let needs_r2 = match cfg.kind {
        KernelName::Rbf | KernelName::Sinc | KernelName::Laplacian => cfg.sigma.is_none(),
        _ => cfg.scale.is_none(),
    };
    let r2 = if needs_r2 {
        adjacent_feature_distance2(support, sup_feat)
    } else {
        1.0
    };
    let w = cfg.width.unwrap_or(match embedding {
        EmbeddingKind::Identity => RAW_WIDTH,
        _ => FEATURE_WIDTH,
    });
    let kind = match cfg.kind {
        KernelName::Rbf => KernelKind::Rbf {
            sigma: cfg.sigma.unwrap_or(w * r2.sqrt()),
        },
        KernelName::Laplacian => KernelKind::Laplacian {
            sigma: cfg.sigma.unwrap_or(w * r2.sqrt()),
        },
        // first zero of the sinc lobe two adjacent-support distances out
        KernelName::Sinc => KernelKind::Sinc {
            sigma: cfg.sigma.unwrap_or(if cfg.sinc_squared {
                1.0 / (4.0 * w * w * r2)
            } else {
                1.0 / (2.0 * w * r2.sqrt())
            }),
            squared: cfg.sinc_squared,
        },
        KernelName::Softmax => KernelKind::Softmax {
            scale: cfg.scale.unwrap_or(1.0 / (w * w * r2)),
        },
        KernelName::Sigmoid => KernelKind::Sigmoid {
            scale: cfg.scale.unwrap_or(1.0 / (w * w * r2)),
        },
        KernelName::Tanh => KernelKind::Tanh {
            scale: cfg.scale.unwrap_or(1.0 / (w * w * r2)),
        },
    };
    kind.validate()?;
    Ok(kind)
}

/// Estimates the flow taking `source` onto `target`.
pub fn estimate_flow(source: &PointCloud, target: &PointCloud, cfg: &RunConfig) -> Result<Estimate> {
    let start = Instant::now();
    let (problem, mut times) = prepare(source, target, cfg)?;
    let t_opt = Instant::now();
    let (alpha, trace) = optimize_alpha(&problem.kernel, source.points(), problem.data.as_ref(), &cfg.optim)?;
    let flow = apply_coefficients(&problem.kernel, &alpha)?;
    times.optimize_s = t_opt.elapsed().as_secs_f64();
    times.total_s = start.elapsed().as_secs_f64();
    Ok(Estimate {
        flow,
        alpha,
        trace,
        params: problem.params,
        times,
    })
}
