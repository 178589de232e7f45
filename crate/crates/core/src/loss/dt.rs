//! Correspondence-free loss over a precomputed Euclidean distance transform.
//!
//! Voxel `(i, j, k)` is centred at `origin + spacing * (i, j, k)` and stores
//! the exact distance from its centre to the nearest centre of a voxel that
//! holds at least one target point. The transform is the separable
//! lower-envelope-of-parabolas algorithm run once per axis on integer squared
//! distances, so voxel values are exact before the final square root.

use rayon::prelude::*;

use super::{DataTerm, LossReport};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, Point, PointCloud};

pub const DEFAULT_VOXEL_BUDGET: u64 = 512 * 512 * 512;

const UNREACHED: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTransformGrid {
    origin: Point,
    spacing: f64,
    dims: [usize; 3],
    values: Vec<f64>,
}

impl DistanceTransformGrid {
    pub fn origin(&self) -> Point {
        self.origin
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Distances in meters, x fastest.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn voxel_count(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Point {
        self.origin + Point::new(i as f64, j as f64, k as f64) * self.spacing
    }

    /// Nearest voxel to `p`, clamped into the grid.
    pub fn voxel_of(&self, p: &Point) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            let u = ((p[a] - self.origin[a]) / self.spacing).round();
            out[a] = u.clamp(0.0, (self.dims[a] - 1) as f64) as usize;
        }
        out
    }

    /// Trilinear interpolation of the distance at `p` with its analytic
    /// gradient. Coordinates outside the grid clamp to the boundary, and the
    /// gradient is zero along any clamped axis.
    pub fn sample(&self, p: &Point) -> (f64, Point) {
        let mut base = [0usize; 3];
        let mut t = [0.0; 3];
        let mut live = [true; 3];
        for a in 0..3 {
            let last = (self.dims[a] - 1) as f64;
            let u = (p[a] - self.origin[a]) / self.spacing;
            if self.dims[a] == 1 {
                live[a] = false;
                continue;
            }
            if !(0.0..=last).contains(&u) {
                live[a] = false;
            }
            let u = u.clamp(0.0, last);
            let i0 = (u.floor() as usize).min(self.dims[a] - 2);
            base[a] = i0;
            t[a] = u - i0 as f64;
        }
        let step = |a: usize| usize::from(self.dims[a] > 1);
        let mut c = [[[0.0; 2]; 2]; 2];
        for (dz, cz) in c.iter_mut().enumerate() {
            for (dy, cy) in cz.iter_mut().enumerate() {
                for (dx, cx) in cy.iter_mut().enumerate() {
                    *cx = self.value(
                        base[0] + dx * step(0),
                        base[1] + dy * step(1),
                        base[2] + dz * step(2),
                    );
                }
            }
        }
        let [tx, ty, tz] = t;
        let lerp = |a: f64, b: f64, s: f64| a + (b - a) * s;
        // collapse x, then y, then z
        let c00 = lerp(c[0][0][0], c[0][0][1], tx);
        let c10 = lerp(c[0][1][0], c[0][1][1], tx);
        let c01 = lerp(c[1][0][0], c[1][0][1], tx);
        let c11 = lerp(c[1][1][0], c[1][1][1], tx);
        let c0 = lerp(c00, c10, ty);
        let c1 = lerp(c01, c11, ty);
        let value = lerp(c0, c1, tz);

        let dx = {
            let d00 = c[0][0][1] - c[0][0][0];
            let d10 = c[0][1][1] - c[0][1][0];
            let d01 = c[1][0][1] - c[1][0][0];
            let d11 = c[1][1][1] - c[1][1][0];
            lerp(lerp(d00, d10, ty), lerp(d01, d11, ty), tz)
        };
        let dy = lerp(c10 - c00, c11 - c01, tz);
        let dz = c1 - c0;
        let h = self.spacing;
        let grad = Point::new(
            if live[0] { dx / h } else { 0.0 },
            if live[1] { dy / h } else { 0.0 },
            if live[2] { dz / h } else { 0.0 },
        );
        (value, grad)
    }
}

pub fn build_dt(target: &PointCloud, bbox: &Aabb, spacing: f64) -> Result<DistanceTransformGrid> {
    build_dt_with_budget(target, bbox, spacing, DEFAULT_VOXEL_BUDGET)
}

/// Rasterizes `target` into a grid over `bbox` and runs the exact EDT.
pub fn build_dt_with_budget(
    target: &PointCloud,
    bbox: &Aabb,
    spacing: f64,
    voxel_budget: u64,
) -> Result<DistanceTransformGrid> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "distance-transform spacing must be positive, got {spacing}"
        )));
    }
    if let Some(i) = target.points().iter().position(|p| !bbox.contains(p)) {
        return Err(Error::InvalidConfig(format!(
            "target point {i} lies outside the distance-transform box"
        )));
    }
    let ext = bbox.extent();
    let dims_for = |h: f64| {
        let mut dims = [1usize; 3];
        for a in 0..3 {
            dims[a] = (ext[a] / h - 1e-9).ceil().max(0.0) as usize + 1;
        }
        dims
    };
    let count = |d: [usize; 3]| d.iter().map(|&n| n as u64).product::<u64>();
    let dims = dims_for(spacing);
    let voxels = count(dims);
    if voxels > voxel_budget {
        let mut h = spacing * (voxels as f64 / voxel_budget as f64).cbrt();
        while count(dims_for(h)) > voxel_budget {
            h *= 1.01;
        }
        return Err(Error::GridTooLarge {
            voxels,
            budget: voxel_budget,
            suggested_spacing: h,
        });
    }
    let mut grid = DistanceTransformGrid {
        origin: bbox.min,
        spacing,
        dims,
        values: Vec::new(),
    };
    let mut occupied = vec![false; voxels as usize];
    for p in target.points() {
        let [i, j, k] = grid.voxel_of(p);
        occupied[grid.index(i, j, k)] = true;
    }
    let sq = squared_edt(&occupied, dims);
    grid.values = sq
        .par_iter()
        .map(|&d| (d as f64).sqrt() * spacing)
        .collect();
    Ok(grid)
}

/// Exact squared Euclidean distance transform in voxel units.
///
/// `occupied` is x-fastest with shape `dims`; each output entry is the squared
/// distance to the nearest occupied voxel, or `u32::MAX` when none exists.
pub fn squared_edt(occupied: &[bool], dims: [usize; 3]) -> Vec<u32> {
    let [nx, ny, nz] = dims;
    assert_eq!(occupied.len(), nx * ny * nz, "occupancy shape");
    let mut d: Vec<u32> = occupied
        .iter()
        .map(|&o| if o { 0 } else { UNREACHED })
        .collect();

    // x: rows are contiguous
    d.par_chunks_mut(nx).for_each(|row| {
        let mut buf = Envelope::new(nx);
        let input = row.to_vec();
        buf.transform(&input, row);
    });

    // y: independent per z slab
    d.par_chunks_mut(nx * ny).for_each(|slab| {
        let mut buf = Envelope::new(ny);
        let mut line = vec![0u32; ny];
        let mut out = vec![0u32; ny];
        for i in 0..nx {
            for j in 0..ny {
                line[j] = slab[i + nx * j];
            }
            buf.transform(&line, &mut out);
            for j in 0..ny {
                slab[i + nx * j] = out[j];
            }
        }
    });

    // z: gather each column into a scratch line
    let plane = nx * ny;
    if nz > 1 {
        let mut buf = Envelope::new(nz);
        let mut line = vec![0u32; nz];
        let mut out = vec![0u32; nz];
        for c in 0..plane {
            for k in 0..nz {
                line[k] = d[c + plane * k];
            }
            buf.transform(&line, &mut out);
            for k in 0..nz {
                d[c + plane * k] = out[k];
            }
        }
    }
    d
}

/// Scratch space for the 1D lower envelope of parabolas.
struct Envelope {
    vertices: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn new(n: usize) -> Self {
        Self {
            vertices: Vec::with_capacity(n),
            bounds: Vec::with_capacity(n + 1),
        }
    }

    /// `out[p] = min_q f[q] + (p - q)^2` over finite `f[q]`.
    fn transform(&mut self, f: &[u32], out: &mut [u32]) {
        let v = &mut self.vertices;
        let z = &mut self.bounds;
        v.clear();
        z.clear();
        let key = |q: usize| f[q] as f64 + (q * q) as f64;
        for q in 0..f.len() {
            if f[q] == UNREACHED {
                continue;
            }
            loop {
                let Some(&last) = v.last() else { break };
                let s = (key(q) - key(last)) / (2.0 * (q as f64 - last as f64));
                if s <= *z.last().unwrap() {
                    v.pop();
                    z.pop();
                } else {
                    z.push(s);
                    break;
                }
            }
            if v.is_empty() {
                z.clear();
                z.push(f64::NEG_INFINITY);
            }
            v.push(q);
        }
        if v.is_empty() {
            out.fill(UNREACHED);
            return;
        }
        z.push(f64::INFINITY);
        let mut k = 0;
        for (p, o) in out.iter_mut().enumerate() {
            while z[k + 1] < p as f64 {
                k += 1;
            }
            let q = v[k];
            let diff = p.abs_diff(q) as u64;
            *o = (diff * diff + f[q] as u64).min(UNREACHED as u64 - 1) as u32;
        }
    }
}

/// Mean interpolated distance of the deformed points, as a data term.
#[derive(Debug, Clone)]
pub struct DtTerm {
    grid: DistanceTransformGrid,
}

impl DtTerm {
    pub fn new(grid: DistanceTransformGrid) -> Self {
        Self { grid }
    }

    pub fn grid(&self) -> &DistanceTransformGrid {
        &self.grid
    }
}

impl DataTerm for DtTerm {
    fn evaluate(&self, deformed: &[Point]) -> LossReport {
        dt_loss_points(deformed, &self.grid)
    }

    fn name(&self) -> &'static str {
        "dt"
    }
}

fn dt_loss_points(deformed: &[Point], grid: &DistanceTransformGrid) -> LossReport {
    let n = deformed.len() as f64;
    let samples: Vec<(f64, Point)> = deformed.par_iter().map(|p| grid.sample(p)).collect();
    let value = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let gradient = samples.into_iter().map(|s| s.1 / n).collect();
    LossReport { value, gradient }
}

pub fn dt_loss(deformed: &PointCloud, grid: &DistanceTransformGrid) -> LossReport {
    dt_loss_points(deformed.points(), grid)
}
