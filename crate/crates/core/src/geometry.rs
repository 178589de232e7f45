//! Point clouds, flow fields and bounding boxes.
//!
//! Coordinates are kept in `f64` in memory. Both [`PointCloud`] and
//! [`FlowField`] validate on construction and are immutable afterwards.

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Point = Vector3<f64>;

/// Ordered, non-empty set of 3D points in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        check_finite(&points, "point cloud")?;
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self> {
        Self::new(rows.iter().map(|r| Point::new(r[0], r[1], r[2])).collect())
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }
}

/// Per-point displacement vectors, index-aligned with a source cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    vectors: Vec<Point>,
}

impl FlowField {
    pub fn new(vectors: Vec<Point>) -> Result<Self> {
        check_finite(&vectors, "flow field")?;
        Ok(Self { vectors })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            vectors: vec![Point::zeros(); n],
        }
    }

    pub fn vectors(&self) -> &[Point] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn negate(&self) -> FlowField {
        FlowField {
            vectors: self.vectors.iter().map(|v| -v).collect(),
        }
    }

    /// Errors unless this field pairs with a cloud of `n` points.
    pub fn check_len(&self, n: usize, context: &'static str) -> Result<()> {
        if self.vectors.len() != n {
            return Err(Error::LengthMismatch {
                context,
                expected: n,
                found: self.vectors.len(),
            });
        }
        Ok(())
    }
}

/// Axis-aligned box. `min <= max` per axis; flat axes are allowed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point,
    pub max: Point,
}

impl Aabb {
    pub fn new(min: Point, max: Point) -> Result<Self> {
        let ok = (0..3).all(|a| min[a].is_finite() && max[a].is_finite() && min[a] <= max[a]);
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "invalid bounding box: min {:?} max {:?}",
                min.as_slice(),
                max.as_slice()
            )));
        }
        Ok(Self { min, max })
    }

    pub fn extent(&self) -> Point {
        self.max - self.min
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn padded(&self, padding: f64) -> Aabb {
        let pad = Point::repeat(padding);
        Aabb {
            min: self.min - pad,
            max: self.max + pad,
        }
    }
}

fn check_finite(values: &[Point], what: &'static str) -> Result<()> {
    match values.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

/// Deforms `source` by `flow`: `out[i] = source[i] + flow[i]`.
pub fn apply_flow(source: &PointCloud, flow: &FlowField) -> Result<PointCloud> {
    flow.check_len(source.len(), "apply_flow")?;
    let points = source
        .points()
        .iter()
        .zip(flow.vectors())
        .map(|(p, f)| p + f)
        .collect();
    PointCloud::new(points)
}

/// Smallest box covering every point of every cloud, grown by `padding` on each side.
pub fn bounding_box(clouds: &[&PointCloud], padding: f64) -> Result<Aabb> {
    if !(padding >= 0.0 && padding.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "padding must be finite and >= 0, got {padding}"
        )));
    }
    let mut iter = clouds.iter().flat_map(|c| c.points().iter());
    let first = iter.next().ok_or(Error::EmptyCloud)?;
    let (mut min, mut max) = (*first, *first);
    for p in iter {
        min = min.inf(p);
        max = max.sup(p);
    }
    Ok(Aabb { min, max }.padded(padding))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(rows: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_rows(rows).unwrap()
    }

    #[test]
    fn rejects_empty_and_nan() {
        assert!(matches!(PointCloud::new(vec![]), Err(Error::EmptyCloud)));
        let err = PointCloud::from_rows(&[[0.0, 0.0, 0.0], [f64::NAN, 0.0, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
        assert!(FlowField::new(vec![Point::new(f64::INFINITY, 0.0, 0.0)]).is_err());
    }

    #[test]
    fn apply_zero_and_unit_flow() {
        let c = cloud(&[[1.0, 2.0, 3.0]]);
        let out = apply_flow(&c, &FlowField::zeros(1)).unwrap();
        assert_eq!(out.points()[0], Point::new(1.0, 2.0, 3.0));

        let c = cloud(&[[0.0, 0.0, 0.0]]);
        let f = FlowField::new(vec![Point::new(0.5, 0.0, 0.0)]).unwrap();
        assert_eq!(apply_flow(&c, &f).unwrap().points()[0], Point::new(0.5, 0.0, 0.0));
    }

    #[test]
    fn apply_negated_cloud_collapses_to_origin() {
        let rows: Vec<[f64; 3]> = (0..100)
            .map(|i| {
                let t = i as f64;
                [t.sin() * 10.0, t.cos() * 3.0, t * 0.1]
            })
            .collect();
        let c = cloud(&rows);
        let f = FlowField::new(c.points().iter().map(|p| -p).collect()).unwrap();
        let out = apply_flow(&c, &f).unwrap();
        assert!(out.points().iter().all(|p| *p == Point::zeros()));
    }

    #[test]
    fn apply_length_mismatch() {
        let c = cloud(&[[0.0; 3], [1.0; 3]]);
        let err = apply_flow(&c, &FlowField::zeros(3)).unwrap_err();
        assert!(matches!(
            err,
            Error::LengthMismatch {
                expected: 2,
                found: 3,
                ..
            }
        ));
    }

    #[test]
    fn bounding_box_examples() {
        let b = bounding_box(&[&cloud(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]])], 0.0).unwrap();
        assert_eq!(b.min, Point::zeros());
        assert_eq!(b.max, Point::new(1.0, 2.0, 3.0));

        let b = bounding_box(&[&cloud(&[[0.0, 0.0, 0.0]])], 1.0).unwrap();
        assert_eq!(b.min, Point::repeat(-1.0));
        assert_eq!(b.max, Point::repeat(1.0));

        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let c = cloud(&[[5.0, 0.0, 0.0]]);
        assert_eq!(bounding_box(&[&a, &c], 0.0).unwrap().max.x, 5.0);

        assert!(bounding_box(&[], 0.0).is_err());
        assert!(bounding_box(&[&a], -1.0).is_err());
    }

    fn arb_point() -> impl Strategy<Value = [f64; 3]> {
        prop::array::uniform3(-100.0f64..100.0)
    }

    proptest! {
        #[test]
        fn flow_round_trip_within_one_ulp(
            rows in prop::collection::vec((arb_point(), arb_point()), 1..50)
        ) {
            let c = PointCloud::from_rows(&rows.iter().map(|r| r.0).collect::<Vec<_>>()).unwrap();
            let f = FlowField::new(rows.iter().map(|r| Point::from(r.1)).collect()).unwrap();
            let back = apply_flow(&apply_flow(&c, &f).unwrap(), &f.negate()).unwrap();
            for ((a, b), fv) in c.points().iter().zip(back.points()).zip(f.vectors()) {
                for k in 0..3 {
                    // (x + f) - f errs by at most one rounding of the intermediate sum
                    let ulp = (a[k] + fv[k]).abs().max(a[k].abs()).max(f64::MIN_POSITIVE) * f64::EPSILON;
                    prop_assert!((a[k] - b[k]).abs() <= ulp);
                }
            }
        }

        #[test]
        fn bounding_box_is_monotone(
            base in prop::collection::vec(arb_point(), 1..30),
            extra in prop::collection::vec(arb_point(), 1..30),
        ) {
            let a = PointCloud::from_rows(&base).unwrap();
            let b = PointCloud::from_rows(&extra).unwrap();
            let small = bounding_box(&[&a], 0.0).unwrap();
            let big = bounding_box(&[&a, &b], 0.0).unwrap();
            for k in 0..3 {
                prop_assert!(big.min[k] <= small.min[k]);
                prop_assert!(big.max[k] >= small.max[k]);
            }
            for p in a.points().iter().chain(b.points()) {
                prop_assert!(big.contains(p));
            }
        }
    }
}
