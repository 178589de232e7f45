use rayon::prelude::*;

use super::{DataTerm, LossReport};
use crate::geometry::{Point, PointCloud};
use crate::spatial::{brute_force_nearest, KdTree};

/// Chamfer distance against a fixed target, with a k-d tree over the target.
///
/// The forward term is the mean squared distance from each deformed point to
/// its nearest target point. With `bidirectional`, the mean squared distance
/// from each target point to its nearest deformed point is added, and its
/// gradient lands on the matched deformed points. Matches are recomputed on
/// every call and treated as locally constant for the gradient.
#[derive(Debug, Clone)]
pub struct ChamferTerm {
    target: KdTree,
    bidirectional: bool,
}

impl ChamferTerm {
    pub fn new(target: &PointCloud, bidirectional: bool) -> Self {
        Self {
            target: KdTree::build(target.points()),
            bidirectional,
        }
    }

    pub fn bidirectional(&self) -> bool {
        self.bidirectional
    }
}

impl DataTerm for ChamferTerm {
    fn evaluate(&self, deformed: &[Point]) -> LossReport {
        let n = deformed.len() as f64;
        let matches: Vec<(f64, Point)> = deformed
            .par_iter()
            .map(|p| {
                let nn = self.target.nearest(p).expect("non-empty target");
                (nn.dist2, (p - self.target.points()[nn.index]) * (2.0 / n))
            })
            .collect();
        let mut value = matches.iter().map(|m| m.0).sum::<f64>() / n;
        let mut gradient: Vec<Point> = matches.into_iter().map(|m| m.1).collect();

        if self.bidirectional {
            let targets = self.target.points();
            let t = targets.len() as f64;
            let tree = KdTree::build(deformed);
            let back: Vec<_> = targets
                .par_iter()
                .map(|q| tree.nearest(q).expect("non-empty deformed cloud"))
                .collect();
            let mut sum = 0.0;
            for (q, nn) in targets.iter().zip(&back) {
                sum += nn.dist2;
                gradient[nn.index] += (deformed[nn.index] - q) * (2.0 / t);
            }
            value += sum / t;
        }
        LossReport { value, gradient }
    }

    fn name(&self) -> &'static str {
        "chamfer"
    }
}

pub fn chamfer(deformed: &PointCloud, target: &PointCloud, bidirectional: bool) -> LossReport {
    ChamferTerm::new(target, bidirectional).evaluate(deformed.points())
}

/// O(N·M) reference with the same conventions as [`ChamferTerm`].
pub fn chamfer_brute_force(deformed: &[Point], target: &[Point], bidirectional: bool) -> LossReport {
    let n = deformed.len() as f64;
    let mut value = 0.0;
    let mut gradient = Vec::with_capacity(deformed.len());
    for p in deformed {
        let nn = brute_force_nearest(target, p).expect("non-empty target");
        value += nn.dist2;
        gradient.push((p - target[nn.index]) * (2.0 / n));
    }
    value /= n;
    if bidirectional {
        let t = target.len() as f64;
        let mut sum = 0.0;
        for q in target {
            let nn = brute_force_nearest(deformed, q).expect("non-empty deformed cloud");
            sum += nn.dist2;
            gradient[nn.index] += (deformed[nn.index] - q) * (2.0 / t);
        }
        value += sum / t;
    }
    LossReport { value, gradient }
}
