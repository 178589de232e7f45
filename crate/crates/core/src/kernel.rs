//! Supporting points and the dense source-by-support kernel matrix.
//!
//! Flow at source point `i` is `sum_m K[i, m] * alpha[m]`, so the kernel
//! matrix is built once per scene pair and only `alpha` changes afterwards.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddedCloud;
use crate::error::{Error, Result};
use crate::geometry::{Aabb, FlowField, Point, PointCloud};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum SupportSource {
    Grid {
        origin: [f64; 3],
        spacing: [f64; 3],
        counts: [usize; 3],
    },
    TargetPoints,
}

/// The `M` supporting points anchoring the kernel expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    pub points: Vec<Point>,
    pub source: SupportSource,
}

impl SupportSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn target_points(target: &PointCloud) -> Self {
        Self {
            points: target.points().to_vec(),
            source: SupportSource::TargetPoints,
        }
    }

    pub fn as_cloud(&self) -> Result<PointCloud> {
        PointCloud::new(self.points.clone())
    }

    /// Largest lattice step over the axes, or `None` for non-grid supports.
    pub fn max_spacing(&self) -> Option<f64> {
        match &self.source {
            SupportSource::Grid { spacing, .. } => Some(spacing.iter().copied().fold(0.0, f64::max)),
            SupportSource::TargetPoints => None,
        }
    }
}

/// Regular lattice spanning `bbox` inclusively, x fastest.
///
/// An axis with a count of one gets a single point at its midpoint.
pub fn grid_supports(bbox: &Aabb, counts: [usize; 3]) -> Result<SupportSet> {
    if counts.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "grid counts must be >= 1, got {counts:?}"
        )));
    }
    let bbox = Aabb::new(bbox.min, bbox.max)?;
    let mut origin = [0.0; 3];
    let mut spacing = [0.0; 3];
    for a in 0..3 {
        if counts[a] == 1 {
            origin[a] = 0.5 * (bbox.min[a] + bbox.max[a]);
        } else {
            origin[a] = bbox.min[a];
            spacing[a] = (bbox.max[a] - bbox.min[a]) / (counts[a] - 1) as f64;
        }
    }
    let coord = |a: usize, i: usize| {
        if counts[a] > 1 && i == counts[a] - 1 {
            bbox.max[a]
        } else {
            origin[a] + i as f64 * spacing[a]
        }
    };
    let mut points = Vec::with_capacity(counts.iter().product());
    for iz in 0..counts[2] {
        for iy in 0..counts[1] {
            for ix in 0..counts[0] {
                points.push(Point::new(coord(0, ix), coord(1, iy), coord(2, iz)));
            }
        }
    }
    Ok(SupportSet {
        points,
        source: SupportSource::Grid {
            origin,
            spacing,
            counts,
        },
    })
}

/// Lattice of roughly `spacing` meters covering `bbox`, plus `margin` extra
/// layers beyond it on every side.
///
/// Each axis is capped at `max_per_axis` points (a capped axis gets a wider
/// step). If the total still exceeds `max_total`, the spacing is widened
/// uniformly until it fits. Returns the lattice's own inclusive box, centred
/// on `bbox`, and the per-axis counts for [`grid_supports`].
pub fn support_lattice(
    bbox: &Aabb,
    spacing: f64,
    max_per_axis: usize,
    max_total: usize,
    margin: usize,
) -> Result<(Aabb, [usize; 3])> {
    if !(spacing > 0.0 && spacing.is_finite()) || max_per_axis == 0 || max_total == 0 {
        return Err(Error::InvalidConfig(format!(
            "grid spacing must be positive and caps >= 1 (spacing {spacing}, per-axis {max_per_axis}, total {max_total})"
        )));
    }
    let ext = bbox.extent();
    let counts_for = |h: f64| -> [usize; 3] {
        let mut c = [1; 3];
        for a in 0..3 {
            let inner = (ext[a] / h - 1e-9).ceil().max(0.0) as usize;
            c[a] = (inner + 1 + 2 * margin).min(max_per_axis);
        }
        c
    };
    let mut h = spacing;
    let mut counts = counts_for(h);
    while counts.iter().product::<usize>() > max_total {
        h *= 1.02;
        counts = counts_for(h);
    }
    let center = (bbox.min + bbox.max) * 0.5;
    let mut half = Point::zeros();
    for a in 0..3 {
        let inner = counts[a] as isize - 1 - 2 * margin as isize;
        let step = if inner > 0 && ext[a] / inner as f64 > h {
            ext[a] / inner as f64
        } else {
            h
        };
        half[a] = 0.5 * (counts[a] - 1) as f64 * step;
    }
    Ok((Aabb::new(center - half, center + half)?, counts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KernelKind {
    /// `exp(-|a-b|^2 / (2 sigma^2))`
    Rbf { sigma: f64 },
    /// `sin(pi d)/(pi d)` with `d = sigma |a-b|^2`, or `sigma |a-b|` when
    /// `squared` is false.
    Sinc { sigma: f64, squared: bool },
    /// Row-wise softmax of `scale <a, b>` over all supports.
    Softmax { scale: f64 },
    /// `1 / (1 + exp(-scale <a, b>))`
    Sigmoid { scale: f64 },
    /// `tanh(scale <a, b>)`
    Tanh { scale: f64 },
    /// `exp(-|a-b| / sigma)`
    Laplacian { sigma: f64 },
}

impl KernelKind {
    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::Rbf { .. } => "rbf",
            KernelKind::Sinc { .. } => "sinc",
            KernelKind::Softmax { .. } => "softmax",
            KernelKind::Sigmoid { .. } => "sigmoid",
            KernelKind::Tanh { .. } => "tanh",
            KernelKind::Laplacian { .. } => "laplacian",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (name, v) = match *self {
            KernelKind::Rbf { sigma } | KernelKind::Sinc { sigma, .. } | KernelKind::Laplacian { sigma } => {
                ("sigma", sigma)
            }
            KernelKind::Softmax { scale } | KernelKind::Sigmoid { scale } | KernelKind::Tanh { scale } => {
                ("scale", scale)
            }
        };
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "{} kernel needs a positive {name}, got {v}",
                self.name()
            )));
        }
        Ok(())
    }

    fn uses_distance(&self) -> bool {
        matches!(
            self,
            KernelKind::Rbf { .. } | KernelKind::Sinc { .. } | KernelKind::Laplacian { .. }
        )
    }

    /// Kernel value from a squared feature distance (distance kernels) or an
    /// inner product (the rest). Softmax returns the raw logit.
    #[inline]
    pub fn eval(&self, stat: f64) -> f64 {
        match *self {
            KernelKind::Rbf { sigma } => (-stat / (2.0 * sigma * sigma)).exp(),
            KernelKind::Laplacian { sigma } => (-stat.sqrt() / sigma).exp(),
            KernelKind::Sinc { sigma, squared } => {
                let d = if squared { sigma * stat } else { sigma * stat.sqrt() };
                if d == 0.0 {
                    1.0
                } else {
                    let x = std::f64::consts::PI * d;
                    x.sin() / x
                }
            }
            KernelKind::Softmax { scale } => scale * stat,
            KernelKind::Sigmoid { scale } => 1.0 / (1.0 + (-scale * stat).exp()),
            KernelKind::Tanh { scale } => (scale * stat).tanh(),
        }
    }
}

/// Dense `N x M` similarity matrix between embedded sources and supports.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    values: DMatrix<f64>,
}

impl KernelMatrix {
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "kernel matrix",
                index,
            });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_source(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_support(&self) -> usize {
        self.values.ncols()
    }

    /// `K * alpha` as an `N x 3` matrix.
    pub fn apply(&self, alpha: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(alpha.shape(), (self.n_support(), 3), "alpha shape");
        let n = self.n_source();
        let k = self.values.as_slice();
        let mut out = DMatrix::zeros(n, 3);
        let (ox, rest) = out.as_mut_slice().split_at_mut(n);
        let (oy, oz) = rest.split_at_mut(n);
        // row blocks keep the three output segments cache-resident while
        // each kernel column streams past exactly once
        ox.par_chunks_mut(ROW_BLOCK)
            .zip(oy.par_chunks_mut(ROW_BLOCK))
            .zip(oz.par_chunks_mut(ROW_BLOCK))
            .enumerate()
            .for_each(|(b, ((x, y), z))| {
                let r0 = b * ROW_BLOCK;
                for m in 0..alpha.nrows() {
                    let (a0, a1, a2) = (alpha[(m, 0)], alpha[(m, 1)], alpha[(m, 2)]);
                    if a0 == 0.0 && a1 == 0.0 && a2 == 0.0 {
                        continue;
                    }
                    let col = &k[m * n + r0..m * n + r0 + x.len()];
                    for (((c, x), y), z) in col.iter().zip(x.iter_mut()).zip(y.iter_mut()).zip(z.iter_mut()) {
                        *x += c * a0;
                        *y += c * a1;
                        *z += c * a2;
                    }
                }
            });
        out
    }

    /// `K^T * g` for an `N x 3` matrix `g`, returned as `M x 3`.
    pub fn apply_transpose(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n_source();
        assert_eq!(g.shape(), (n, 3), "gradient shape");
        let (gx, rest) = g.as_slice().split_at(n);
        let (gy, gz) = rest.split_at(n);
        let sums: Vec<[f64; 3]> = self
            .values
            .as_slice()
            .par_chunks(n.max(1))
            .map(|col| dot3(col, gx, gy, gz))
            .collect();
        DMatrix::from_fn(self.n_support(), 3, |m, c| sums[m][c])
    }
}

const ROW_BLOCK: usize = 2048;

/// Three dot products of `col` in one pass, with four partial sums per
/// component so the loop vectorizes without reassociating a single sum.
fn dot3(col: &[f64], gx: &[f64], gy: &[f64], gz: &[f64]) -> [f64; 3] {
    let mut acc = [[0.0f64; 4]; 3];
    let mut cc = col.chunks_exact(4);
    let mut xc = gx.chunks_exact(4);
    let mut yc = gy.chunks_exact(4);
    let mut zc = gz.chunks_exact(4);
    for (((c, x), y), z) in (&mut cc).zip(&mut xc).zip(&mut yc).zip(&mut zc) {
        for l in 0..4 {
            acc[0][l] += c[l] * x[l];
            acc[1][l] += c[l] * y[l];
            acc[2][l] += c[l] * z[l];
        }
    }
    let mut out = [0.0; 3];
    for (o, a) in out.iter_mut().zip(&acc) {
        *o = (a[0] + a[1]) + (a[2] + a[3]);
    }
    for (((c, x), y), z) in cc.remainder().iter().zip(xc.remainder()).zip(yc.remainder()).zip(zc.remainder()) {
        out[0] += c * x;
        out[1] += c * y;
        out[2] += c * z;
    }
    out
}

/// Entry count of a would-be kernel matrix, for budget checks.
pub fn kernel_entries(n_source: usize, n_support: usize) -> u64 {
    n_source as u64 * n_support as u64
}

pub fn kernel_matrix(
    source: &EmbeddedCloud,
    support: &EmbeddedCloud,
    kind: KernelKind,
) -> Result<KernelMatrix> {
    kind.validate()?;
    if source.dim() != support.dim() {
        return Err(Error::DimensionMismatch {
            context: "kernel feature width",
            left: source.dim(),
            right: support.dim(),
        });
    }
    let dim = source.dim();
    let n = source.len();
    // row-contiguous copies: column j of the transpose is feature row j
    let src = source.features.transpose();
    let sup = support.features.transpose();
    let distance = kind.uses_distance();

    let mut values = DMatrix::<f64>::zeros(n, support.len());
    values
        .par_column_iter_mut()
        .enumerate()
        .for_each(|(m, mut col)| {
            let b = &sup.as_slice()[m * dim..(m + 1) * dim];
            for i in 0..n {
                let a = &src.as_slice()[i * dim..(i + 1) * dim];
                let stat = if distance {
                    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
                } else {
                    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
                };
                col[i] = kind.eval(stat);
            }
        });

    if matches!(kind, KernelKind::Softmax { .. }) {
        normalize_rows_softmax(&mut values);
    }
    KernelMatrix::from_matrix(values)
}

fn normalize_rows_softmax(values: &mut DMatrix<f64>) {
    let n = values.nrows();
    let mut max = vec![f64::NEG_INFINITY; n];
    for col in values.column_iter() {
        for (m, v) in max.iter_mut().zip(col.iter()) {
            *m = m.max(*v);
        }
    }
    let mut sum = vec![0.0; n];
    for mut col in values.column_iter_mut() {
        for ((v, m), s) in col.iter_mut().zip(&max).zip(sum.iter_mut()) {
            *v = (*v - m).exp();
            *s += *v;
        }
    }
    for mut col in values.column_iter_mut() {
        for (v, s) in col.iter_mut().zip(&sum) {
            *v /= s;
        }
    }
}

/// The `M x 3` linear coefficients, one 3-vector per supporting point.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVector {
    pub alpha: DMatrix<f64>,
}

impl CoefficientVector {
    pub fn zeros(m: usize) -> Self {
        Self {
            alpha: DMatrix::zeros(m, 3),
        }
    }

    pub fn new(alpha: DMatrix<f64>) -> Result<Self> {
        if alpha.ncols() != 3 {
            return Err(Error::DimensionMismatch {
                context: "coefficient columns",
                left: alpha.ncols(),
                right: 3,
            });
        }
        Ok(Self { alpha })
    }

    pub fn len(&self) -> usize {
        self.alpha.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.nrows() == 0
    }

    pub fn l1_norm(&self) -> f64 {
        self.alpha.iter().map(|v| v.abs()).sum()
    }
}

pub(crate) fn matrix_to_vectors(m: &DMatrix<f64>) -> Vec<Point> {
    (0..m.nrows())
        .map(|i| Point::new(m[(i, 0)], m[(i, 1)], m[(i, 2)]))
        .collect()
}

/// Flow `f_i = sum_m K[i, m] alpha_m`.
pub fn apply_coefficients(k: &KernelMatrix, alpha: &CoefficientVector) -> Result<FlowField> {
    if alpha.len() != k.n_support() {
        return Err(Error::LengthMismatch {
            context: "apply_coefficients",
            expected: k.n_support(),
            found: alpha.len(),
        });
    }
    FlowField::new(matrix_to_vectors(&k.apply(&alpha.alpha)))
}
