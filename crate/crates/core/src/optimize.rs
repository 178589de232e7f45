//! Runtime fitting of the coefficient matrix `alpha`.
//!
//! The objective is `D(p + K alpha) + lambda * |alpha|_1`, minimized by Adam
//! with the L1 term entering as a subgradient (`sign(0) = 0`). A closed-form
//! ridge solve is provided for the case where ground-truth flow is known.

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FlowField, Point};
use crate::kernel::{CoefficientVector, KernelMatrix};
use crate::loss::DataTerm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub lambda_l1: f64,
    pub early_stop_patience: usize,
    /// Relative improvement of the best loss that resets the patience counter.
    pub early_stop_min_delta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            max_iters: 500,
            lambda_l1: 1e-4,
            early_stop_patience: 30,
            early_stop_min_delta: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda_l1));
        }
        if self.early_stop_patience == 0 {
            return bad("early-stop patience must be >= 1".into());
        }
        if !(self.early_stop_min_delta >= 0.0 && self.early_stop_min_delta.is_finite()) {
            return bad(format!("early-stop delta must be >= 0, got {}", self.early_stop_min_delta));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad(format!("Adam betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("Adam epsilon must be positive, got {}", self.epsilon));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub t: u32,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: DMatrix::zeros(rows, cols),
            v: DMatrix::zeros(rows, cols),
            t: 0,
        }
    }

    /// One bias-corrected Adam update of `param` in place.
    pub fn step(&mut self, param: &mut DMatrix<f64>, grad: &DMatrix<f64>, cfg: &OptimConfig) {
        assert_eq!(param.shape(), grad.shape(), "Adam gradient shape");
        assert_eq!(param.shape(), self.m.shape(), "Adam state shape");
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let ps = param.as_mut_slice();
        let ms = self.m.as_mut_slice();
        let vs = self.v.as_mut_slice();
        for (((p, m), v), g) in ps.iter_mut().zip(ms).zip(vs).zip(grad.as_slice()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxIters,
    EarlyStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub data_loss: f64,
    pub l1_term: f64,
    pub total: f64,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimTrace {
    pub records: Vec<TraceRecord>,
    pub stop_reason: StopReason,
    pub best_iteration: Option<usize>,
}

impl OptimTrace {
    pub fn best_total(&self) -> Option<f64> {
        self.best_iteration.map(|i| self.records[i].total)
    }

    /// One JSON object per iteration, newline separated.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Value of the objective split into its parts, plus the gradient over alpha.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub data: f64,
    pub l1: f64,
    pub total: f64,
    pub gradient: DMatrix<f64>,
}

pub struct Objective<'a> {
    kernel: &'a KernelMatrix,
    source: &'a [Point],
    data: &'a dyn DataTerm,
    lambda: f64,
}

impl<'a> Objective<'a> {
    pub fn new(
        kernel: &'a KernelMatrix,
        source: &'a [Point],
        data: &'a dyn DataTerm,
        lambda: f64,
    ) -> Result<Self> {
        if source.len() != kernel.n_source() {
            return Err(Error::LengthMismatch {
                context: "objective source points",
                expected: kernel.n_source(),
                found: source.len(),
            });
        }
        Ok(Self {
            kernel,
            source,
            data,
            lambda,
        })
    }

    pub fn deformed(&self, alpha: &DMatrix<f64>) -> Vec<Point> {
        let flow = self.kernel.apply(alpha);
        self.source
            .iter()
            .enumerate()
            .map(|(i, p)| p + Point::new(flow[(i, 0)], flow[(i, 1)], flow[(i, 2)]))
            .collect()
    }

    pub fn evaluate(&self, alpha: &DMatrix<f64>) -> ObjectiveValue {
        assert_eq!(alpha.nrows(), self.kernel.n_support(), "alpha rows");
        let report = self.data.evaluate(&self.deformed(alpha));
        let g = DMatrix::from_fn(report.gradient.len(), 3, |i, a| report.gradient[i][a]);
        let mut gradient = self.kernel.apply_transpose(&g);
        let l1 = self.lambda * alpha.iter().map(|v| v.abs()).sum::<f64>();
        if self.lambda != 0.0 {
            for (gr, a) in gradient.iter_mut().zip(alpha.iter()) {
                *gr += self.lambda * sign(*a);
            }
        }
        ObjectiveValue {
            data: report.value,
            l1,
            total: report.value + l1,
            gradient,
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Value and gradient of the objective at `alpha`.
pub fn objective(
    kernel: &KernelMatrix,
    source: &[Point],
    alpha: &CoefficientVector,
    data: &dyn DataTerm,
    lambda: f64,
) -> Result<ObjectiveValue> {
    if alpha.len() != kernel.n_support() {
        return Err(Error::LengthMismatch {
            context: "objective alpha",
            expected: kernel.n_support(),
            found: alpha.len(),
        });
    }
    Ok(Objective::new(kernel, source, data, lambda)?.evaluate(&alpha.alpha))
}

/// Adam from `alpha = 0` until `max_iters` or early stop; returns the best
/// coefficients seen.
pub fn optimize_alpha(
    kernel: &KernelMatrix,
    source: &[Point],
    data: &dyn DataTerm,
    cfg: &OptimConfig,
) -> Result<(CoefficientVector, OptimTrace)> {
    cfg.validate()?;
    let obj = Objective::new(kernel, source, data, cfg.lambda_l1)?;
    let m = kernel.n_support();
    let mut alpha = DMatrix::zeros(m, 3);
    let mut best_alpha = alpha.clone();
    let mut best = f64::INFINITY;
    let mut best_iteration = None;
    let mut stale = 0;
    let mut adam = AdamState::new(m, 3);
    let mut records = Vec::with_capacity(cfg.max_iters);
    let mut stop_reason = StopReason::MaxIters;
    let start = Instant::now();

    for iteration in 0..cfg.max_iters {
        let val = obj.evaluate(&alpha);
        records.push(TraceRecord {
            iteration,
            data_loss: val.data,
            l1_term: val.l1,
            total: val.total,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if !val.total.is_finite() || val.gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration,
                trace: Box::new(OptimTrace {
                    records,
                    stop_reason: StopReason::EarlyStop,
                    best_iteration,
                }),
            });
        }
        let improved = if best.is_finite() {
            best - val.total > cfg.early_stop_min_delta * best.abs()
        } else {
            true
        };
        if val.total < best {
            best = val.total;
            best_alpha.copy_from(&alpha);
            best_iteration = Some(iteration);
        }
        if improved {
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                stop_reason = StopReason::EarlyStop;
                break;
            }
        }
        adam.step(&mut alpha, &val.gradient, cfg);
    }

    let trace = OptimTrace {
        records,
        stop_reason,
        best_iteration,
    };
    Ok((CoefficientVector::new(best_alpha)?, trace))
}

pub const DEFAULT_RIDGE_DELTA: f64 = 1e-8;

/// Solves `(K^T K + delta I) alpha = K^T f` for each flow component.
pub fn closed_form_alpha(
    kernel: &KernelMatrix,
    flow_gt: &FlowField,
    delta: f64,
) -> Result<CoefficientVector> {
    flow_gt.check_len(kernel.n_source(), "closed-form ground-truth flow")?;
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidConfig(format!("ridge delta must be >= 0, got {delta}")));
    }
    let k = kernel.values();
    let m = k.ncols();
    let f = DMatrix::from_fn(flow_gt.len(), 3, |i, a| flow_gt.vectors()[i][a]);
    let mut gram = k.transpose() * k;
    for i in 0..m {
        gram[(i, i)] += delta;
    }
    let rhs = k.transpose() * f;
    let scale = (0..m).map(|i| gram[(i, i)]).fold(0.0, f64::max);

    match gram.clone().cholesky() {
        Some(chol) => {
            if delta == 0.0 {
                let diag_min = (0..m).map(|i| chol.l_dirty()[(i, i)]).fold(f64::INFINITY, f64::min);
                if diag_min * diag_min <= f64::EPSILON * m as f64 * scale {
                    return Err(Error::Singular);
                }
            }
            CoefficientVector::new(chol.solve(&rhs))
        }
        None if delta == 0.0 || scale == 0.0 => Err(Error::Singular),
        None => gram
            .lu()
            .solve(&rhs)
            .ok_or(Error::Singular)
            .and_then(CoefficientVector::new),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{ChamferTerm, LeastSquaresTerm, LossReport};
    use crate::geometry::PointCloud;
    use crate::rng::GaussianStream;

    struct NoData;

    impl DataTerm for NoData {
        fn evaluate(&self, deformed: &[Point]) -> LossReport {
            LossReport {
                value: 0.0,
                gradient: vec![Point::zeros(); deformed.len()],
            }
        }

        fn name(&self) -> &'static str {
            "none"
        }
    }

    fn random_kernel(s: &mut GaussianStream, n: usize, m: usize) -> KernelMatrix {
        KernelMatrix::from_matrix(DMatrix::from_fn(n, m, |_, _| s.next_uniform(0.0, 1.0))).unwrap()
    }

    fn random_points(s: &mut GaussianStream, n: usize) -> Vec<Point> {
        (0..n)
            .map(|_| Point::new(s.next_normal(), s.next_normal(), s.next_normal()))
            .collect()
    }

    #[test]
    fn zero_alpha_identical_clouds() {
        let mut s = GaussianStream::new(1);
        let pts = random_points(&mut s, 30);
        let k = random_kernel(&mut s, 30, 5);
        let term = ChamferTerm::new(&PointCloud::new(pts.clone()).unwrap(), false);
        let v = objective(&k, &pts, &CoefficientVector::zeros(5), &term, 0.0).unwrap();
        assert_eq!(v.total, 0.0);
        assert!(v.gradient.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn lambda_only_gradient_is_sign() {
        let mut s = GaussianStream::new(2);
        let pts = random_points(&mut s, 10);
        let k = random_kernel(&mut s, 10, 4);
        let mut alpha = DMatrix::from_fn(4, 3, |_, _| s.next_normal());
        alpha[(1, 2)] = 0.0;
        let v = objective(&k, &pts, &CoefficientVector::new(alpha.clone()).unwrap(), &NoData, 0.3).unwrap();
        for (g, a) in v.gradient.iter().zip(alpha.iter()) {
            assert_eq!(*g, 0.3 * sign(*a));
        }
        assert_eq!(v.gradient[(1, 2)], 0.0);
        assert!((v.total - 0.3 * alpha.iter().map(|a| a.abs()).sum::<f64>()).abs() < 1e-15);
    }

    #[test]
    fn least_squares_gradient_matches_finite_differences() {
        let mut s = GaussianStream::new(3);
        let pts = random_points(&mut s, 40);
        let targets = random_points(&mut s, 40);
        let k = random_kernel(&mut s, 40, 8);
        let term = LeastSquaresTerm::new(targets);
        let obj = Objective::new(&k, &pts, &term, 0.0).unwrap();
        let alpha = DMatrix::from_fn(8, 3, |_, _| 0.1 * s.next_normal());
        let g = obj.evaluate(&alpha).gradient;
        let h = 1e-6;
        for idx in 0..alpha.len() {
            let mut hi = alpha.clone();
            hi.as_mut_slice()[idx] += h;
            let mut lo = alpha.clone();
            lo.as_mut_slice()[idx] -= h;
            let fd = (obj.evaluate(&hi).total - obj.evaluate(&lo).total) / (2.0 * h);
            assert!((fd - g.as_slice()[idx]).abs() <= 1e-6 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn zero_iterations_returns_zero() {
        let mut s = GaussianStream::new(4);
        let pts = random_points(&mut s, 10);
        let k = random_kernel(&mut s, 10, 3);
        let term = ChamferTerm::new(&PointCloud::new(pts.clone()).unwrap(), false);
        let cfg = OptimConfig {
            max_iters: 0,
            ..OptimConfig::default()
        };
        let (alpha, trace) = optimize_alpha(&k, &pts, &term, &cfg).unwrap();
        assert!(alpha.alpha.iter().all(|a| *a == 0.0));
        assert!(trace.records.is_empty());
    }

    #[test]
    fn trace_totals_and_best_so_far() {
        let mut s = GaussianStream::new(5);
        let pts = random_points(&mut s, 60);
        let target: Vec<Point> = pts.iter().map(|p| p + Point::new(0.3, -0.1, 0.05)).collect();
        let k = KernelMatrix::from_matrix(DMatrix::from_element(60, 1, 1.0)).unwrap();
        let term = ChamferTerm::new(&PointCloud::new(target).unwrap(), false);
        let cfg = OptimConfig {
            max_iters: 200,
            ..OptimConfig::default()
        };
        let (alpha, trace) = optimize_alpha(&k, &pts, &term, &cfg).unwrap();
        let mut best = f64::INFINITY;
        for r in &trace.records {
            assert!((r.total - (r.data_loss + r.l1_term)).abs() <= 1e-10);
            best = best.min(r.total);
        }
        assert_eq!(Some(best), trace.best_total());
        let a = alpha.alpha.row(0);
        assert!((a[0] - 0.3).abs() < 0.02, "{a}");
    }

    #[test]
    fn heavy_l1_shrinks_coefficients() {
        let mut s = GaussianStream::new(6);
        let pts = random_points(&mut s, 50);
        let target: Vec<Point> = pts.iter().map(|p| p + Point::new(1e-4, 0.0, 0.0)).collect();
        let k = random_kernel(&mut s, 50, 6);
        let term = LeastSquaresTerm::new(target);
        let run = |lambda: f64| {
            let cfg = OptimConfig {
                lambda_l1: lambda,
                max_iters: 400,
                ..OptimConfig::default()
            };
            optimize_alpha(&k, &pts, &term, &cfg).unwrap().0
        };
        let heavy = run(1e3);
        let free = run(0.0);
        assert!(heavy.alpha.iter().all(|a| a.abs() < 1e-3));
        assert!(heavy.l1_norm() <= free.l1_norm());
    }

    #[test]
    fn non_finite_loss_aborts_with_trace() {
        struct Nan;
        impl DataTerm for Nan {
            fn evaluate(&self, deformed: &[Point]) -> LossReport {
                LossReport {
                    value: f64::NAN,
                    gradient: vec![Point::zeros(); deformed.len()],
                }
            }
            fn name(&self) -> &'static str {
                "nan"
            }
        }
        let k = KernelMatrix::from_matrix(DMatrix::from_element(2, 1, 1.0)).unwrap();
        let pts = vec![Point::zeros(); 2];
        match optimize_alpha(&k, &pts, &Nan, &OptimConfig::default()) {
            Err(Error::NonFiniteLoss { iteration, trace }) => {
                assert_eq!(iteration, 0);
                assert_eq!(trace.records.len(), 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn closed_form_examples() {
        let mut s = GaussianStream::new(7);
        let k = random_kernel(&mut s, 20, 5);
        let zero = closed_form_alpha(&k, &FlowField::zeros(20), DEFAULT_RIDGE_DELTA).unwrap();
        assert!(zero.alpha.iter().all(|a| *a == 0.0));

        let id = KernelMatrix::from_matrix(DMatrix::identity(6, 6)).unwrap();
        let f = FlowField::new(random_points(&mut s, 6)).unwrap();
        let a = closed_form_alpha(&id, &f, 0.0).unwrap();
        for (i, v) in f.vectors().iter().enumerate() {
            for c in 0..3 {
                assert!((a.alpha[(i, c)] - v[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn closed_form_singular_without_ridge() {
        let k = KernelMatrix::from_matrix(DMatrix::from_element(5, 3, 1.0)).unwrap();
        let f = FlowField::new(vec![Point::new(1.0, 0.0, 0.0); 5]).unwrap();
        assert!(matches!(closed_form_alpha(&k, &f, 0.0), Err(Error::Singular)));
        assert!(closed_form_alpha(&k, &f, 1e-6).is_ok());
    }

    #[test]
    fn jsonl_has_one_line_per_record() {
        let trace = OptimTrace {
            records: (0..3)
                .map(|i| TraceRecord {
                    iteration: i,
                    data_loss: 1.0,
                    l1_term: 0.0,
                    total: 1.0,
                    elapsed_ms: 0.0,
                })
                .collect(),
            stop_reason: StopReason::MaxIters,
            best_iteration: Some(0),
        };
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        let first: TraceRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first.iteration, 0);
    }
}
