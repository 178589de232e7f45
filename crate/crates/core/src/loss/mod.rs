//! Data terms of the coefficient objective.
//!
//! Both terms report a scalar value and its gradient with respect to every
//! deformed source point. Per-point work runs in parallel; reductions run
//! sequentially in index order so results do not depend on thread count.

mod chamfer;
mod dt;

pub use chamfer::{chamfer, chamfer_brute_force, ChamferTerm};
pub use dt::{
    build_dt, build_dt_with_budget, dt_loss, squared_edt, DistanceTransformGrid, DtTerm,
    DEFAULT_VOXEL_BUDGET,
};

use crate::geometry::Point;

/// Loss value plus `d loss / d p'` for each deformed point.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub gradient: Vec<Point>,
}

/// A differentiable data term over deformed source points.
pub trait DataTerm: Sync {
    fn evaluate(&self, deformed: &[Point]) -> LossReport;

    fn name(&self) -> &'static str;
}

/// Squared distance to a fixed per-point target, averaged over points.
///
/// Useful as a least-squares surrogate when true correspondences are known.
#[derive(Debug, Clone)]
pub struct LeastSquaresTerm {
    targets: Vec<Point>,
}

impl LeastSquaresTerm {
    pub fn new(targets: Vec<Point>) -> Self {
        Self { targets }
    }
}

impl DataTerm for LeastSquaresTerm {
    fn evaluate(&self, deformed: &[Point]) -> LossReport {
        assert_eq!(deformed.len(), self.targets.len(), "least-squares term length");
        let n = deformed.len() as f64;
        let mut value = 0.0;
        let gradient = deformed
            .iter()
            .zip(&self.targets)
            .map(|(p, t)| {
                let d = p - t;
                value += d.norm_squared();
                d * (2.0 / n)
            })
            .collect();
        LossReport {
            value: value / n,
            gradient,
        }
    }

    fn name(&self) -> &'static str {
        "least-squares"
    }
}
