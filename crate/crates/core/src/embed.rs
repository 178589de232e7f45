//! Per-point embeddings used as kernel inputs.
//!
//! Four variants share one output type, [`EmbeddedCloud`]:
//! raw coordinates, random Fourier features, and a single-head
//! positional-embedding attention block (full or restricted to k nearest
//! neighbours). Attention weights are supplied by the caller or drawn from a
//! seeded stream; nothing here trains them.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::rng::GaussianStream;
use crate::spatial::KdTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    Identity,
    Rff,
    Peat,
    PeatKnn,
}

/// `N x D` feature matrix; row `i` belongs to point `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedCloud {
    pub features: DMatrix<f64>,
    pub kind: EmbeddingKind,
}

impl EmbeddedCloud {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

pub fn embed_identity(cloud: &PointCloud) -> EmbeddedCloud {
    let pts = cloud.points();
    EmbeddedCloud {
        features: DMatrix::from_fn(pts.len(), 3, |i, j| pts[i][j]),
        kind: EmbeddingKind::Identity,
    }
}

/// Random Fourier feature encoder `p -> [cos(2πBp), sin(2πBp)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RffEncoder {
    frequencies: DMatrix<f64>,
    scale: f64,
    seed: u64,
}

impl RffEncoder {
    pub const DEFAULT_DIM: usize = 128;
    pub const DEFAULT_SCALE: f64 = 1.0;

    /// Draws the `dim/2 x 3` frequency matrix from N(0, scale²).
    pub fn new(dim: usize, scale: f64, seed: u64) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "RFF output dimension must be even and positive, got {dim}"
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "RFF scale must be positive, got {scale}"
            )));
        }
        let mut stream = GaussianStream::new(seed);
        // row-major draw order so the matrix does not depend on storage layout
        let mut values = Vec::with_capacity(dim / 2 * 3);
        for _ in 0..dim / 2 * 3 {
            values.push(stream.next_normal() * scale);
        }
        Ok(Self {
            frequencies: DMatrix::from_row_slice(dim / 2, 3, &values),
            scale,
            seed,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.frequencies.nrows() * 2
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frequencies(&self) -> &DMatrix<f64> {
        &self.frequencies
    }

    fn encode_points(&self, pts: &[Point]) -> DMatrix<f64> {
        let half = self.frequencies.nrows();
        let mut out = DMatrix::zeros(pts.len(), 2 * half);
        for (i, p) in pts.iter().enumerate() {
            for j in 0..half {
                let b = self.frequencies.row(j);
                let phase =
                    std::f64::consts::TAU * (b[0] * p.x + b[1] * p.y + b[2] * p.z);
                out[(i, j)] = phase.cos();
                out[(i, half + j)] = phase.sin();
            }
        }
        out
    }
}

pub fn rff_encode(cloud: &PointCloud, encoder: &RffEncoder) -> EmbeddedCloud {
    EmbeddedCloud {
        features: encoder.encode_points(cloud.points()),
        kind: EmbeddingKind::Rff,
    }
}

/// Query, key and value projections of one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct PeatWeights {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
}

impl PeatWeights {
    pub fn new(w_q: DMatrix<f64>, w_k: DMatrix<f64>, w_v: DMatrix<f64>) -> Result<Self> {
        let d_pe = w_q.nrows();
        if w_k.nrows() != d_pe || w_v.nrows() != d_pe {
            return Err(Error::DimensionMismatch {
                context: "PEAT weight input width",
                left: d_pe,
                right: if w_k.nrows() != d_pe { w_k.nrows() } else { w_v.nrows() },
            });
        }
        if w_q.ncols() != w_k.ncols() {
            return Err(Error::DimensionMismatch {
                context: "PEAT query/key width",
                left: w_q.ncols(),
                right: w_k.ncols(),
            });
        }
        for m in [&w_q, &w_k, &w_v] {
            if let Some(index) = m.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "PEAT weights",
                    index,
                });
            }
        }
        Ok(Self { w_q, w_k, w_v })
    }

    /// Gaussian weights with standard deviation `1/sqrt(d_pe)`.
    pub fn random(d_pe: usize, d_k: usize, d_v: usize, seed: u64) -> Result<Self> {
        if d_pe == 0 || d_k == 0 || d_v == 0 {
            return Err(Error::InvalidConfig("PEAT dimensions must be positive".into()));
        }
        let mut stream = GaussianStream::new(seed);
        let std = 1.0 / (d_pe as f64).sqrt();
        let mut draw = |rows, cols| {
            let vals: Vec<f64> = (0..rows * cols).map(|_| stream.next_normal() * std).collect();
            DMatrix::from_row_slice(rows, cols, &vals)
        };
        let w_q = draw(d_pe, d_k);
        let w_k = draw(d_pe, d_k);
        let w_v = draw(d_pe, d_v);
        Self::new(w_q, w_k, w_v)
    }

    pub fn d_pe(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn d_k(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn d_v(&self) -> usize {
        self.w_v.ncols()
    }
}

struct Projections {
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
}

fn project(cloud: &PointCloud, pe: &RffEncoder, weights: &PeatWeights) -> Result<Projections> {
    if pe.output_dim() != weights.d_pe() {
        return Err(Error::DimensionMismatch {
            context: "positional encoding width vs PEAT weights",
            left: pe.output_dim(),
            right: weights.d_pe(),
        });
    }
    let x = pe.encode_points(cloud.points());
    Ok(Projections {
        q: &x * &weights.w_q,
        k: &x * &weights.w_k,
        v: &x * &weights.w_v,
    })
}

/// In-place softmax with max subtraction.
fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

/// Full `N x N` attention map of the PEAT block (rows sum to one).
pub fn peat_attention(
    cloud: &PointCloud,
    pe: &RffEncoder,
    weights: &PeatWeights,
) -> Result<DMatrix<f64>> {
    let proj = project(cloud, pe, weights)?;
    Ok(attention_from(&proj))
}

fn attention_from(proj: &Projections) -> DMatrix<f64> {
    // logits are Q K^T; transpose so each query's row is a contiguous column
    let mut logits_t = &proj.k * proj.q.transpose();
    logits_t
        .par_column_iter_mut()
        .for_each(|mut col| softmax_in_place(col.as_mut_slice()));
    logits_t.transpose()
}

/// Full attention: `Softmax(X W_Q W_K^T X^T) X W_V` with `X = PE(cloud)`.
pub fn peat_forward(
    cloud: &PointCloud,
    pe: &RffEncoder,
    weights: &PeatWeights,
) -> Result<EmbeddedCloud> {
    let proj = project(cloud, pe, weights)?;
    let attn = attention_from(&proj);
    Ok(EmbeddedCloud {
        features: attn * &proj.v,
        kind: EmbeddingKind::Peat,
    })
}

/// Indices of the `l` nearest points of `cloud` to `query`, closest first.
/// The query's own point, if present, is eligible.
pub fn knn_sample(query: &Point, cloud: &PointCloud, l: usize) -> Result<Vec<usize>> {
    check_knn(l, cloud.len())?;
    let tree = KdTree::build(cloud.points());
    Ok(tree.knn(query, l).into_iter().map(|n| n.index).collect())
}

fn check_knn(l: usize, n: usize) -> Result<()> {
    if l == 0 || l > n {
        return Err(Error::InvalidConfig(format!(
            "neighbourhood size must satisfy 1 <= L <= N ({n}), got {l}"
        )));
    }
    Ok(())
}

/// Sparse `N x L` attention map: neighbour indices and weights per point.
#[derive(Debug, Clone)]
pub struct LocalAttention {
    pub neighbors: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

impl LocalAttention {
    /// Number of stored attention entries (`N * L`).
    pub fn entries(&self) -> usize {
        self.weights.iter().map(Vec::len).sum()
    }
}

fn local_attention_from(cloud: &PointCloud, proj: &Projections, l: usize) -> LocalAttention {
    let tree = KdTree::build(cloud.points());
    let (neighbors, weights): (Vec<_>, Vec<_>) = cloud
        .points()
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let idx: Vec<usize> = tree.knn(p, l).into_iter().map(|n| n.index).collect();
            let q = proj.q.row(i);
            let mut logits: Vec<f64> = idx.iter().map(|&j| q.dot(&proj.k.row(j))).collect();
            softmax_in_place(&mut logits);
            (idx, logits)
        })
        .unzip();
    LocalAttention { neighbors, weights }
}

pub fn peat_knn_attention(
    cloud: &PointCloud,
    pe: &RffEncoder,
    weights: &PeatWeights,
    l: usize,
) -> Result<LocalAttention> {
    check_knn(l, cloud.len())?;
    let proj = project(cloud, pe, weights)?;
    Ok(local_attention_from(cloud, &proj, l))
}

/// Attention restricted to each point's `l` nearest neighbours.
pub fn peat_knn_forward(
    cloud: &PointCloud,
    pe: &RffEncoder,
    weights: &PeatWeights,
    l: usize,
) -> Result<EmbeddedCloud> {
    check_knn(l, cloud.len())?;
    let proj = project(cloud, pe, weights)?;
    let attn = local_attention_from(cloud, &proj, l);
    let d_v = proj.v.ncols();
    let mut out = DMatrix::zeros(cloud.len(), d_v);
    for (i, (idx, w)) in attn.neighbors.iter().zip(&attn.weights).enumerate() {
        for (&j, &a) in idx.iter().zip(w) {
            for c in 0..d_v {
                out[(i, c)] += a * proj.v[(j, c)];
            }
        }
    }
    Ok(EmbeddedCloud {
        features: out,
        kind: EmbeddingKind::PeatKnn,
    })
}
