//! Synthetic scene pairs with exact ground-truth flow.
//!
//! A scene is a static (or uniformly translated) background box of points
//! plus rigid box-shaped objects whose points lie on the box surfaces, the
//! way a range sensor sees them. Sensor noise is added to the target only,
//! never to the ground truth.

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FlowField, Point, PointCloud};
use crate::rng::GaussianStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub points: usize,
    /// Box side lengths in meters.
    pub extent: [f64; 3],
    pub center: [f64; 3],
    /// Rotation about the object center as axis times angle in radians.
    pub axis_angle: [f64; 3],
    pub translation: [f64; 3],
}

impl ObjectSpec {
    fn motion(&self) -> (Rotation3<f64>, Point, Point) {
        let rot = Rotation3::new(Vector3::from(self.axis_angle));
        (rot, Point::from(self.center), Point::from(self.translation))
    }

    /// Whether `p` is within `margin` of the box at either time step.
    fn occupies(&self, p: &Point, margin: f64) -> bool {
        let (rot, c, t) = self.motion();
        let inside = |local: Point| (0..3).all(|a| local[a].abs() <= 0.5 * self.extent[a] + margin);
        inside(p - c) || inside(rot.inverse() * (p - c - t))
    }
}

pub const DEFAULT_CLEARANCE: f64 = 1.0;
const MAX_REJECTIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub background_points: usize,
    /// Background box sides; x and y are centred on the origin, z spans `[0, extent.z]`.
    pub background_extent: [f64; 3],
    pub background_translation: [f64; 3],
    pub objects: Vec<ObjectSpec>,
    pub noise_sigma: f64,
    /// Background points are kept at least this far from every object box,
    /// before and after its motion.
    pub object_clearance: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::with_random_objects(2, 0.0, 0)
    }
}

impl SceneSpec {
    /// The default 10,000-point background with `objects` randomly placed
    /// boxes of 1,000 points each, moving by at most 1 m.
    pub fn with_random_objects(objects: usize, noise_sigma: f64, seed: u64) -> Self {
        let extent = [40.0, 40.0, 4.0];
        // placement draws use a stream separate from point sampling
        let mut s = GaussianStream::new(seed ^ 0x005e_ed0b_1ec7_u64);
        let objects = (0..objects)
            .map(|_| {
                let size = [s.next_uniform(2.0, 5.0), s.next_uniform(1.5, 3.0), s.next_uniform(1.0, 2.0)];
                let center = [
                    s.next_uniform(-14.0, 14.0),
                    s.next_uniform(-14.0, 14.0),
                    0.5 * size[2] + s.next_uniform(0.0, 1.0),
                ];
                let heading = s.next_uniform(0.0, std::f64::consts::TAU);
                let speed = s.next_uniform(0.3, 1.0);
                let yaw = s.next_uniform(-5.0, 5.0).to_radians();
                ObjectSpec {
                    points: 1000,
                    extent: size,
                    center,
                    axis_angle: [0.0, 0.0, yaw],
                    translation: [speed * heading.cos(), speed * heading.sin(), 0.0],
                }
            })
            .collect();
        Self {
            background_points: 10_000,
            background_extent: extent,
            background_translation: [0.0; 3],
            objects,
            noise_sigma,
            object_clearance: DEFAULT_CLEARANCE,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let total = self.background_points + self.objects.iter().map(|o| o.points).sum::<usize>();
        if total == 0 {
            return Err(Error::InvalidConfig("scene has no points".into()));
        }
        if !(self.object_clearance >= 0.0 && self.object_clearance.is_finite()) {
            return Err(Error::InvalidConfig(format!("object clearance must be >= 0, got {}", self.object_clearance)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        let finite = |v: &[f64; 3]| v.iter().all(|c| c.is_finite());
        let nonneg = |v: &[f64; 3]| v.iter().all(|c| *c >= 0.0 && c.is_finite());
        if !nonneg(&self.background_extent) || !finite(&self.background_translation) {
            return Err(Error::InvalidConfig("background extent/translation must be finite, extent >= 0".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !nonneg(&o.extent) || !finite(&o.center) || !finite(&o.axis_angle) || !finite(&o.translation) {
                return Err(Error::InvalidConfig(format!("object {i} has a non-finite or negative field")));
            }
        }
        Ok(())
    }
}

/// Uniform sample on the surface of a centred box, faces weighted by area.
/// Degenerate boxes fall back to the volume.
fn surface_sample(s: &mut GaussianStream, e: &[f64; 3]) -> Point {
    let areas = [e[1] * e[2], e[0] * e[2], e[0] * e[1]];
    let total: f64 = areas.iter().sum();
    let mut local = Point::new(
        s.next_uniform(-0.5, 0.5) * e[0],
        s.next_uniform(-0.5, 0.5) * e[1],
        s.next_uniform(-0.5, 0.5) * e[2],
    );
    let r = s.next_uniform(0.0, total);
    let side = if s.next_uniform(0.0, 1.0) < 0.5 { -0.5 } else { 0.5 };
    if total > 0.0 {
        let axis = if r < areas[0] { 0 } else if r < areas[0] + areas[1] { 1 } else { 2 };
        local[axis] = side * e[axis];
    }
    local
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub source: PointCloud,
    pub target: PointCloud,
    pub gt_flow: FlowField,
    /// 0 for background points, `k + 1` for points of object `k`.
    pub owner: Vec<usize>,
}

pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut s = GaussianStream::new(spec.seed);
    let mut source = Vec::new();
    let mut moved = Vec::new();
    let mut owner = Vec::new();

    let be = spec.background_extent;
    let bt = Point::from(spec.background_translation);
    for _ in 0..spec.background_points {
        let mut tries = 0;
        let p = loop {
            let p = Point::new(
                s.next_uniform(-0.5 * be[0], 0.5 * be[0]),
                s.next_uniform(-0.5 * be[1], 0.5 * be[1]),
                s.next_uniform(0.0, be[2]),
            );
            if !spec.objects.iter().any(|o| o.occupies(&p, spec.object_clearance)) {
                break p;
            }
            tries += 1;
            if tries == MAX_REJECTIONS {
                return Err(Error::InvalidConfig("objects leave no free space for background points".into()));
            }
        };
        source.push(p);
        moved.push(p + bt);
        owner.push(0);
    }
    for (k, obj) in spec.objects.iter().enumerate() {
        let (rot, c, t) = obj.motion();
        for _ in 0..obj.points {
            let p = c + surface_sample(&mut s, &obj.extent);
            source.push(p);
            moved.push(rot * (p - c) + c + t);
            owner.push(k + 1);
        }
    }

    let gt: Vec<Point> = moved.iter().zip(&source).map(|(m, p)| m - p).collect();
    // rounded so that source + gt reproduces the target bit for bit
    let moved: Vec<Point> = source.iter().zip(&gt).map(|(p, f)| p + f).collect();
    let target: Vec<Point> = if spec.noise_sigma > 0.0 {
        moved
            .iter()
            .map(|m| m + Point::new(s.next_normal(), s.next_normal(), s.next_normal()) * spec.noise_sigma)
            .collect()
    } else {
        moved
    };
    Ok(Scene {
        source: PointCloud::new(source)?,
        target: PointCloud::new(target)?,
        gt_flow: FlowField::new(gt)?,
        owner,
    })
}
