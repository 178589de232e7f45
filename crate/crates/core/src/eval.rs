//! Flow accuracy metrics and wall-clock timing.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FlowField, Point};

pub const STRICT_THRESHOLDS: (f64, f64) = (0.05, 0.05);
pub const RELAXED_THRESHOLDS: (f64, f64) = (0.1, 0.1);

/// Norms below this are treated as zero when measuring angles.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "epe_m")]
    pub epe: f64,
    #[serde(rename = "acc5_pct")]
    pub acc_strict: f64,
    #[serde(rename = "acc10_pct")]
    pub acc_relaxed: f64,
    #[serde(rename = "angle_rad")]
    pub angle_error: f64,
    #[serde(rename = "time_s")]
    pub time_seconds: f64,
}

impl MetricReport {
    pub fn compute(pred: &FlowField, gt: &FlowField, time_seconds: f64) -> Result<Self> {
        Ok(Self {
            epe: epe(pred, gt)?,
            acc_strict: acc_strict(pred, gt)?,
            acc_relaxed: acc_relaxed(pred, gt)?,
            angle_error: angle_error(pred, gt)?,
            time_seconds,
        })
    }

    /// Field-wise arithmetic mean.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricReport {
            epe: avg(|r| r.epe),
            acc_strict: avg(|r| r.acc_strict),
            acc_relaxed: avg(|r| r.acc_relaxed),
            angle_error: avg(|r| r.angle_error),
            time_seconds: avg(|r| r.time_seconds),
        })
    }
}

fn paired<'a>(pred: &'a FlowField, gt: &'a FlowField) -> Result<impl Iterator<Item = (&'a Point, &'a Point)>> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            context: "predicted vs ground-truth flow",
            expected: gt.len(),
            found: pred.len(),
        });
    }
    if gt.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(pred.vectors().iter().zip(gt.vectors()))
}

/// Mean end-point error in meters.
pub fn epe(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    let n = gt.len() as f64;
    Ok(paired(pred, gt)?.map(|(p, g)| (p - g).norm()).sum::<f64>() / n)
}

/// Percentage of points whose error is under `abs_threshold` meters or under
/// `rel_threshold` relative to the ground-truth magnitude. Static ground-truth
/// points are judged by the absolute test alone.
pub fn accuracy(pred: &FlowField, gt: &FlowField, abs_threshold: f64, rel_threshold: f64) -> Result<f64> {
    if !(abs_threshold > 0.0 && rel_threshold > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "accuracy thresholds must be positive, got ({abs_threshold}, {rel_threshold})"
        )));
    }
    let n = gt.len() as f64;
    let hits = paired(pred, gt)?
        .filter(|(p, g)| {
            let err = (*p - *g).norm();
            let gn = g.norm();
            err < abs_threshold || (gn > 0.0 && err / gn < rel_threshold)
        })
        .count();
    Ok(100.0 * hits as f64 / n)
}

pub fn acc_strict(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    accuracy(pred, gt, STRICT_THRESHOLDS.0, STRICT_THRESHOLDS.1)
}

pub fn acc_relaxed(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    accuracy(pred, gt, RELAXED_THRESHOLDS.0, RELAXED_THRESHOLDS.1)
}

/// Mean angle between predicted and true flow directions, in radians.
///
/// A pair where both vectors are below [`NORM_FLOOR`] contributes 0; a pair
/// where exactly one is contributes pi/2.
pub fn angle_error(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    let n = gt.len() as f64;
    let total: f64 = paired(pred, gt)?
        .map(|(p, g)| {
            let (pn, gn) = (p.norm(), g.norm());
            match (pn < NORM_FLOOR, gn < NORM_FLOOR) {
                (true, true) => 0.0,
                (true, false) | (false, true) => std::f64::consts::FRAC_PI_2,
                _ => (p.dot(g) / (pn * gn)).clamp(-1.0, 1.0).acos(),
            }
        })
        .sum();
    Ok(total / n)
}

/// Runs `f` once and returns its result with the elapsed seconds.
pub fn time_run<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub samples: Vec<f64>,
    pub mean: f64,
    /// Unbiased sample variance; zero for a single sample.
    pub variance: f64,
}

/// Times `repeats` runs of `f`.
pub fn time_repeated(repeats: usize, mut f: impl FnMut()) -> TimingStats {
    let samples: Vec<f64> = (0..repeats).map(|_| time_run(&mut f).1).collect();
    let n = samples.len() as f64;
    let mean = if samples.is_empty() { 0.0 } else { samples.iter().sum::<f64>() / n };
    let variance = if samples.len() < 2 {
        0.0
    } else {
        samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
    };
    TimingStats {
        samples,
        mean,
        variance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn flow(rows: &[[f64; 3]]) -> FlowField {
        FlowField::new(rows.iter().map(|r| Point::new(r[0], r[1], r[2])).collect()).unwrap()
    }

    #[test]
    fn epe_examples() {
        let a = flow(&[[1.0, 2.0, 3.0], [0.0, 0.0, 1.0]]);
        assert_eq!(epe(&a, &a).unwrap(), 0.0);
        assert_eq!(epe(&flow(&[[1.0, 0.0, 0.0]]), &flow(&[[0.0; 3]])).unwrap(), 1.0);
        let e = epe(&flow(&[[0.1, 0.0, 0.0], [0.0, 0.3, 0.0]]), &flow(&[[0.0; 3], [0.0; 3]])).unwrap();
        assert!((e - 0.2).abs() < 1e-15);
        assert!(epe(&flow(&[[0.0; 3]]), &flow(&[[0.0; 3], [0.0; 3]])).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let a = flow(&[[1.0, 2.0, 3.0]]);
        assert_eq!(acc_strict(&a, &a).unwrap(), 100.0);
        assert_eq!(acc_strict(&flow(&[[1.04, 0.0, 0.0]]), &flow(&[[1.0, 0.0, 0.0]])).unwrap(), 100.0);
        let (p, g) = (flow(&[[0.2, 0.0, 0.0]]), flow(&[[0.0; 3]]));
        assert_eq!(acc_strict(&p, &g).unwrap(), 0.0);
        assert_eq!(acc_relaxed(&p, &g).unwrap(), 0.0);
        // relative branch: error 0.3 on a 10 m vector is 3 %
        assert_eq!(acc_strict(&flow(&[[10.3, 0.0, 0.0]]), &flow(&[[10.0, 0.0, 0.0]])).unwrap(), 100.0);
    }

    #[test]
    fn angle_examples() {
        let g = flow(&[[1.0, 0.0, 0.0]]);
        assert_eq!(angle_error(&g, &g).unwrap(), 0.0);
        assert!((angle_error(&flow(&[[0.0, 1.0, 0.0]]), &g).unwrap() - FRAC_PI_2).abs() < 1e-15);
        assert!((angle_error(&flow(&[[-1.0, 0.0, 0.0]]), &g).unwrap() - PI).abs() < 1e-15);
        let z = flow(&[[0.0; 3]]);
        assert_eq!(angle_error(&z, &z).unwrap(), 0.0);
        assert_eq!(angle_error(&z, &g).unwrap(), FRAC_PI_2);
    }

    #[test]
    fn report_serializes_with_fixed_names() {
        let r = MetricReport {
            epe: 0.1,
            acc_strict: 50.0,
            acc_relaxed: 75.0,
            angle_error: 0.2,
            time_seconds: 1.5,
        };
        let v = serde_json::to_value(&r).unwrap();
        for key in ["epe_m", "acc5_pct", "acc10_pct", "angle_rad", "time_s"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn timing_sanity() {
        let (_, t) = time_run(|| ());
        assert!(t < 1e-3);
        let (_, t) = time_run(|| std::thread::sleep(std::time::Duration::from_millis(100)));
        assert!((t - 0.1).abs() < 0.02, "{t}");
        let stats = time_repeated(3, || ());
        assert_eq!(stats.samples.len(), 3);
        assert!(stats.variance >= 0.0);
    }

    fn vec3() -> impl Strategy<Value = [f64; 3]> {
        prop::array::uniform3(-5.0..5.0f64)
    }

    proptest! {
        #[test]
        fn epe_translation_invariant(p in prop::collection::vec(vec3(), 1..20), shift in vec3(), seed in 0u64..1000) {
            let g: Vec<[f64; 3]> = p.iter().enumerate().map(|(i, r)| {
                let o = ((seed + i as u64) % 7) as f64 * 0.1;
                [r[0] + o, r[1] - o, r[2]]
            }).collect();
            let s = Point::new(shift[0], shift[1], shift[2]);
            let (pf, gf) = (flow(&p), flow(&g));
            let ps = FlowField::new(pf.vectors().iter().map(|v| v + s).collect()).unwrap();
            let gs = FlowField::new(gf.vectors().iter().map(|v| v + s).collect()).unwrap();
            prop_assert!((epe(&pf, &gf).unwrap() - epe(&ps, &gs).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn relaxed_at_least_strict(p in prop::collection::vec(vec3(), 1..20), g in prop::collection::vec(vec3(), 20)) {
            let gf = flow(&g[..p.len()]);
            let pf = flow(&p);
            prop_assert!(acc_relaxed(&pf, &gf).unwrap() >= acc_strict(&pf, &gf).unwrap());
        }

        #[test]
        fn angle_scale_invariant(p in prop::collection::vec(vec3(), 1..20), g in prop::collection::vec(vec3(), 20), s in prop::collection::vec(0.01..100.0f64, 40)) {
            let n = p.len();
            let pf = flow(&p);
            let gf = flow(&g[..n]);
            let ps = FlowField::new(pf.vectors().iter().zip(&s).map(|(v, k)| v * *k).collect()).unwrap();
            let gs = FlowField::new(gf.vectors().iter().zip(&s[20..]).map(|(v, k)| v * *k).collect()).unwrap();
            let a = angle_error(&pf, &gf).unwrap();
            prop_assert!((a - angle_error(&ps, &gs).unwrap()).abs() < 1e-9);
            prop_assert!((0.0..=PI).contains(&a));
        }
    }
}
