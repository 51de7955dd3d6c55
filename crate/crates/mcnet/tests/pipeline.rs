//! End-to-end structural checks of the assembled network.

use mcnet::cloud::{synth_scene, ClassGeometry, ClassSpec, SceneSpec};
use mcnet::model::{build_model, ModelConfig, PatchInput};
use mcnet::tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_patch(n: usize, seed: u64) -> PatchInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PatchInput {
        positions: (0..n)
            .map(|_| {
                [
                    rng.random_range(0.0..4.0),
                    rng.random_range(0.0..4.0),
                    rng.random_range(0.0..1.0),
                ]
            })
            .collect(),
        colors: (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect(),
    }
}

#[test]
fn test_profile_decode_width_is_top_channel() {
    // 3 levels, channels [8,16,32]: the heads see [N0, 32] features, so
    // logits are [N0, C] for both heads.
    let cfg = ModelConfig::test_profile(256, 3);
    let mut model = build_model(&cfg).unwrap();
    let patch = random_patch(256, 1);
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let out = model.forward(&mut tape, &binding, &patch, true, &mut rng).unwrap();
    assert_eq!(tape.value(out.logits_point).shape(), &[256, 3]);
    assert_eq!(tape.value(out.logits_nei).shape(), &[256, 3]);
}

#[test]
fn full_decode_is_nan_free_across_seeds() {
    let cfg = ModelConfig::test_profile(144, 3);
    for seed in 0..100u64 {
        let mut cfg = cfg.clone();
        cfg.seed = seed;
        let mut model = build_model(&cfg).unwrap();
        let patch = random_patch(144, seed ^ 0xabcd);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = model.forward(&mut tape, &binding, &patch, false, &mut rng).unwrap();
        assert!(
            tape.value(out.logits_point).data().iter().all(|v| v.is_finite()),
            "seed {seed}"
        );
        assert!(
            tape.value(out.logits_nei).data().iter().all(|v| v.is_finite()),
            "seed {seed}"
        );
    }
}

#[test]
fn forward_is_deterministic_given_seed() {
    let cfg = ModelConfig::test_profile(160, 3);
    let patch = random_patch(160, 5);
    let run = || {
        let mut model = build_model(&cfg).unwrap();
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let out = model.forward(&mut tape, &binding, &patch, true, &mut rng).unwrap();
        tape.value(out.logits_point).data().to_vec()
    };
    assert_eq!(run(), run());
}

#[cfg(feature = "parallel")]
#[test]
fn kernels_are_bitwise_identical_across_thread_counts() {
    use mcnet::knn::{default_cell_size, knn_grid};

    let cfg = ModelConfig::test_profile(192, 3);
    let patch = random_patch(192, 7);
    let run_forward = || {
        let mut model = build_model(&cfg).unwrap();
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = model.forward(&mut tape, &binding, &patch, true, &mut rng).unwrap();
        let loss = tape.sum(out.logits_point).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut flat: Vec<f64> = tape.value(out.logits_point).data().to_vec();
        for (_, id) in &binding.named {
            if let Some(g) = grads.get(*id) {
                flat.extend_from_slice(g.data());
            }
        }
        flat
    };
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let seq = single.install(run_forward);
    let par = run_forward();
    assert_eq!(seq, par);

    let knn_run = || {
        let pts = &patch.positions;
        let nn = knn_grid(pts, pts, 9, default_cell_size(pts)).unwrap();
        (nn.indices().to_vec(), nn.distances().to_vec())
    };
    assert_eq!(single.install(knn_run), knn_run());
}

#[test]
fn overfit_trend_on_tiny_scene() {
    // Loss decreases over a short run on an easy two-class scene; the full
    // overfit benchmark lives in the acceptance suite.
    let cloud = synth_scene(&SceneSpec {
        classes: vec![
            ClassSpec {
                name: "low".into(),
                point_count: 160,
                geometry: ClassGeometry::Plane { center: [0., 0., 0.], extent: [1.5, 1.5] },
                color_mean: [0.9, 0.1, 0.1],
                color_jitter: 0.02,
                noise_sigma: 0.01,
            },
            ClassSpec {
                name: "high".into(),
                point_count: 160,
                geometry: ClassGeometry::Plane { center: [0., 0., 1.0], extent: [1.5, 1.5] },
                color_mean: [0.1, 0.1, 0.9],
                color_jitter: 0.02,
                noise_sigma: 0.01,
            },
        ],
        seed: 3,
    })
    .unwrap();
    let mut cfg = ModelConfig::test_profile(96, 2);
    cfg.k_neighbors = 5;
    cfg.epochs = 30;
    cfg.batch_size = 2;
    cfg.learning_rate = 0.05;
    let mut model = build_model(&cfg).unwrap();
    let report = mcnet::train::train(&mut model, &cloud).unwrap();
    let first = report.epoch_loss[0];
    let last = *report.epoch_loss.last().unwrap();
    assert!(last < first, "loss went {first} -> {last}");
}
