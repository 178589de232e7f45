use kernflow::embed::{embed_identity, peat_attention, peat_forward, peat_knn_forward, rff_encode};
use kernflow::pipeline::{estimate_flow, EmbeddingConfig, LossKind};
use kernflow::synth::{generate, SceneSpec};
use kernflow::{apply_flow, io, EmbeddingKind, FlowField, PeatWeights, Point, PointCloud, RffEncoder, RunConfig};
use proptest::prelude::*;

fn point() -> impl Strategy<Value = Point> {
    (-10.0..10.0f64, -10.0..10.0f64, -2.0..2.0f64).prop_map(|(x, y, z)| Point::new(x, y, z))
}

fn small_scene(seed: u64) -> kernflow::synth::Scene {
    generate(&SceneSpec {
        background_points: 1500,
        ..SceneSpec::with_random_objects(1, 0.01, seed)
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rff_rows_have_constant_norm(points in prop::collection::vec(point(), 1..40), half in 1usize..32, scale in 0.1..4.0f64) {
        let enc = RffEncoder::new(2 * half, scale, 3).unwrap();
        let e = rff_encode(&PointCloud::new(points.clone()).unwrap(), &enc);
        prop_assert_eq!(e.len(), points.len());
        let want = (half as f64).sqrt();
        for r in e.features.row_iter() {
            prop_assert!((r.norm() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn peat_rows_are_distributions_and_knn_with_all_neighbours_is_exact(
        points in prop::collection::vec(point(), 2..40),
        seed in 0u64..1000,
    ) {
        let pc = PointCloud::new(points.clone()).unwrap();
        let enc = RffEncoder::new(8, 0.3, seed).unwrap();
        let w = PeatWeights::random(8, 4, 5, seed).unwrap();
        for r in peat_attention(&pc, &enc, &w).unwrap().row_iter() {
            prop_assert!((r.sum() - 1.0).abs() <= 1e-12);
        }
        let full = peat_forward(&pc, &enc, &w).unwrap().features;
        let knn = peat_knn_forward(&pc, &enc, &w, points.len()).unwrap().features;
        prop_assert_eq!(full.nrows(), points.len());
        prop_assert!((&full - &knn).amax() <= 1e-10);
    }

    #[test]
    fn synthetic_gt_is_exact_without_noise(seed in 0u64..10_000, objects in 0usize..3) {
        let spec = SceneSpec { background_points: 300, ..SceneSpec::with_random_objects(objects, 0.0, seed) };
        let scene = generate(&spec).unwrap();
        let moved = apply_flow(&scene.source, &scene.gt_flow).unwrap();
        prop_assert_eq!(moved.points(), scene.target.points());
        let again = generate(&spec).unwrap();
        prop_assert_eq!(again.source.points(), scene.source.points());
    }

    #[test]
    fn flow_files_round_trip_at_single_precision(vectors in prop::collection::vec(point(), 1..50)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flw");
        let flow = FlowField::new(vectors.clone()).unwrap();
        io::write_flow(&path, &flow).unwrap();
        let back = io::read_flow(&path).unwrap();
        for (a, b) in back.vectors().iter().zip(&vectors) {
            for c in 0..3 {
                prop_assert_eq!(a[c], b[c] as f32 as f64);
            }
        }
    }
}

#[test]
fn identity_embedding_preserves_alignment() {
    let pts = vec![Point::new(1.0, 2.0, 3.0), Point::new(-4.0, 0.5, 9.0)];
    let e = embed_identity(&PointCloud::new(pts.clone()).unwrap());
    for (i, p) in pts.iter().enumerate() {
        assert_eq!([e.features[(i, 0)], e.features[(i, 1)], e.features[(i, 2)]], [p.x, p.y, p.z]);
    }
}

#[test]
fn runs_are_bitwise_reproducible() {
    let scene = small_scene(4);
    for kind in [LossKind::Dt, LossKind::Chamfer] {
        let mut cfg = RunConfig::default();
        cfg.loss.kind = kind;
        cfg.optim.max_iters = 40;
        let a = estimate_flow(&scene.source, &scene.target, &cfg).unwrap();
        let b = estimate_flow(&scene.source, &scene.target, &cfg).unwrap();
        assert_eq!(a.alpha.alpha, b.alpha.alpha);
        assert_eq!(a.flow, b.flow);
    }
}

#[test]
fn every_embedding_runs_end_to_end() {
    let scene = small_scene(9);
    for kind in [EmbeddingKind::Identity, EmbeddingKind::Rff, EmbeddingKind::Peat, EmbeddingKind::PeatKnn] {
        let mut cfg = RunConfig {
            embedding: EmbeddingConfig { kind, ..EmbeddingConfig::default() },
            ..RunConfig::default()
        };
        cfg.optim.max_iters = 20;
        let est = estimate_flow(&scene.source, &scene.target, &cfg).unwrap();
        assert_eq!(est.flow.len(), scene.source.len());
        let first = est.trace.records[0].total;
        assert!(est.trace.best_total().unwrap() <= first, "{kind:?}");
    }
}

#[test]
fn translation_is_recovered_by_both_losses() {
    let scene = generate(&SceneSpec {
        background_points: 3000,
        background_translation: [0.3, -0.2, 0.0],
        objects: vec![],
        noise_sigma: 0.0,
        seed: 6,
        ..SceneSpec::default()
    })
    .unwrap();
    for kind in [LossKind::Dt, LossKind::Chamfer] {
        let mut cfg = RunConfig::default();
        cfg.loss.kind = kind;
        let est = estimate_flow(&scene.source, &scene.target, &cfg).unwrap();
        let epe = kernflow::eval::epe(&est.flow, &scene.gt_flow).unwrap();
        assert!(epe < 0.02, "{kind:?}: {epe}");
    }
}
