use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kernflow::embed::embed_identity;
use kernflow::kernel::kernel_matrix;
use kernflow::loss::{build_dt, ChamferTerm, DtTerm};
use kernflow::optimize::Objective;
use kernflow::pipeline::{prepare, LossKind};
use kernflow::synth::{generate, Scene, SceneSpec};
use kernflow::{bounding_box, DataTerm, KernelKind, PointCloud, RunConfig};
use nalgebra::DMatrix;

fn scene(background: usize) -> Scene {
    generate(&SceneSpec {
        background_points: background,
        ..SceneSpec::with_random_objects(2, 0.01, 1)
    })
    .unwrap()
}

fn kernel_build(c: &mut Criterion) {
    let s = scene(10_000);
    let (problem, _) = prepare(&s.source, &s.target, &RunConfig::default()).unwrap();
    let src = embed_identity(&s.source);
    let sup = embed_identity(&PointCloud::new(problem.support.points.clone()).unwrap());
    c.bench_function("kernel_matrix/rbf_12k", |b| {
        b.iter(|| kernel_matrix(&src, &sup, KernelKind::Rbf { sigma: 1.0 }).unwrap())
    });
}

fn dt_build(c: &mut Criterion) {
    let s = scene(10_000);
    let bbox = bounding_box(&[&s.source, &s.target], 2.0).unwrap();
    let mut g = c.benchmark_group("build_dt");
    g.sample_size(10);
    for spacing in [0.2, 0.1] {
        g.bench_with_input(BenchmarkId::from_parameter(spacing), &spacing, |b, &h| {
            b.iter(|| build_dt(&s.target, &bbox, h).unwrap())
        });
    }
    g.finish();
}

fn loss_terms(c: &mut Criterion) {
    let s = scene(10_000);
    let bbox = bounding_box(&[&s.source, &s.target], 2.0).unwrap();
    let dt = DtTerm::new(build_dt(&s.target, &bbox, 0.1).unwrap());
    let forward = ChamferTerm::new(&s.target, false);
    let both = ChamferTerm::new(&s.target, true);
    let pts = s.source.points();
    let mut g = c.benchmark_group("loss_12k");
    g.bench_function("dt", |b| b.iter(|| dt.evaluate(pts)));
    g.bench_function("chamfer_forward", |b| b.iter(|| forward.evaluate(pts)));
    g.bench_function("chamfer_bidirectional", |b| b.iter(|| both.evaluate(pts)));
    g.finish();
}

fn objective_step(c: &mut Criterion) {
    let s = scene(10_000);
    let mut g = c.benchmark_group("objective_12k");
    for kind in [LossKind::Dt, LossKind::Chamfer] {
        let mut cfg = RunConfig::default();
        cfg.loss.kind = kind;
        let (problem, _) = prepare(&s.source, &s.target, &cfg).unwrap();
        let obj = Objective::new(&problem.kernel, s.source.points(), problem.data.as_ref(), cfg.optim.lambda_l1).unwrap();
        let alpha = DMatrix::from_element(problem.kernel.n_support(), 3, 0.01);
        g.bench_function(format!("{kind:?}").to_lowercase(), |b| b.iter(|| obj.evaluate(&alpha)));
    }
    g.finish();
}

criterion_group!(benches, kernel_build, dt_build, loss_terms, objective_step);
criterion_main!(benches);
