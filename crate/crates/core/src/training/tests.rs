use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoder::EncoderConfig;
use crate::matcher::MatcherConfig;
use crate::model::Model;
use crate::scenegraph::{generate_scene_pair, GeneratorConfig};

#[test]
fn matching_loss_of_half_is_ln2() {
    let mut s = DMatrix::from_element(3, 3, 0.1);
    s[(0, 1)] = 0.5;
    let l = matching_loss(&s, &[(0, 1)]).unwrap();
    assert!((l - 2f64.ln()).abs() < 1e-9);
}

#[test]
fn matching_loss_averages_cells() {
    let mut s = DMatrix::from_element(3, 4, 0.0);
    s[(0, 0)] = 1.0;
    s[(1, 2)] = 0.25;
    let l = matching_loss(&s, &[(0, 0), (1, 2)]).unwrap();
    assert!((l - 4f64.ln() / 2.0).abs() < 1e-9);
}

#[test]
fn matching_loss_errors() {
    let s = DMatrix::from_element(3, 3, 0.2);
    assert!(matches!(matching_loss(&s, &[]), Err(TrainError::EmptyGroundTruth)));
    assert!(matches!(
        matching_loss(&s, &[(0, 0), (3, 1)]),
        Err(TrainError::CellOutOfRange { cell: (3, 1), shape: (3, 3) })
    ));
}

#[test]
fn recorded_matching_loss_equals_direct() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = DMatrix::from_fn(5, 6, |_, _| rng.random_range(0.01..1.0));
    let gt = [(0, 3), (2, 2), (4, 0)];
    let tape = Tape::new();
    let on = matching_loss_on(&tape.constant(s.clone()), &gt).unwrap().scalar();
    assert!((on - matching_loss(&s, &gt).unwrap()).abs() < 1e-12);
}

#[test]
fn similarity_loss_examples() {
    assert_eq!(similarity_loss(0.5, 2, 4, 6), 0.0);
    assert!((similarity_loss(0.0, 2, 4, 6) - 0.25).abs() < 1e-15);
    assert_eq!(target_similarity(3, 0, 5), 0.0);
    assert_eq!(target_similarity(3, 6, 4), 0.75);
}

#[test]
fn similarity_loss_gradient_matches_finite_differences() {
    let (n, ms, mr) = (3, 5, 7);
    for k_tilde in [0.05, 0.3, 0.6, 0.97] {
        let tape = Tape::new();
        let kv = tape.param(DMatrix::from_element(1, 1, k_tilde));
        let l = similarity_loss_on(&kv, n, ms, mr);
        let g = tape.backward(&l).wrt(&kv)[0];
        let h = 1e-6;
        let fd = (similarity_loss(k_tilde + h, n, ms, mr) - similarity_loss(k_tilde - h, n, ms, mr)) / (2.0 * h);
        let exact = -2.0 * (target_similarity(n, ms, mr) - k_tilde);
        assert!((g - exact).abs() <= 1e-12 * exact.abs().max(1.0));
        assert!((g - fd).abs() / fd.abs().max(1e-12) < 1e-6, "{g} vs {fd}");
    }
}

#[test]
fn total_loss_examples() {
    let r = total_loss(&[(1.0, 0.1)], 10.0).unwrap();
    assert!((r.l - 2.0).abs() < 1e-12);
    let r = total_loss(&[(1.0, 0.3), (3.0, 0.5)], 0.0).unwrap();
    assert_eq!(r.l, 2.0);
    assert!(matches!(total_loss(&[], 10.0), Err(TrainError::EmptyBatch)));
}

#[test]
fn total_loss_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch: Vec<(f64, f64)> = (0..17).map(|_| (rng.random_range(0.0..3.0), rng.random_range(0.0..1.0))).collect();
    let mut acc = 0.0;
    for (s, k) in &batch {
        acc += s + 7.5 * k;
    }
    let r = total_loss(&batch, 7.5).unwrap();
    assert!((r.l - acc / 17.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn total_loss_is_permutation_invariant(
        batch in prop::collection::vec((0.0..5.0f64, 0.0..1.0f64), 1..20),
        seed in any::<u64>(),
    ) {
        let mut shuffled = batch.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = total_loss(&batch, 10.0).unwrap();
        let b = total_loss(&shuffled, 10.0).unwrap();
        prop_assert!((a.l - b.l).abs() < 1e-12);
        prop_assert!((a.l_s - b.l_s).abs() < 1e-12);
    }
}

#[test]
fn adam_step_descends_a_quadratic() {
    let target = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
    let f = |p: &DMatrix<f64>| (p - &target).norm_squared();
    let mut params = vec![DMatrix::zeros(2, 2)];
    let mut adam = Adam::new(&[(2, 2)]);
    let before = f(&params[0]);
    let grad = vec![(&params[0] - &target) * 2.0];
    adam.update(&mut params, &grad, 1e-2);
    assert!(f(&params[0]) < before);
    for (p, t) in params[0].iter().zip(target.iter()) {
        assert!((p - 1e-2 * t.signum()).abs() < 1e-9);
    }
}

#[test]
fn adam_with_zero_rate_keeps_parameters() {
    let mut params = vec![DMatrix::from_element(3, 1, 0.1 + 0.2)];
    let copy = params.clone();
    let mut adam = Adam::new(&[(3, 1)]);
    adam.update(&mut params, &[DMatrix::from_element(3, 1, 5.0)], 0.0);
    assert_eq!(params, copy);
    assert_eq!(adam.step, 1);
}

#[test]
fn learning_rate_schedule() {
    let cfg = TrainConfig::default();
    let lrs: Vec<f64> = (0..10).map(|e| cfg.learning_rate(e)).collect();
    for (e, lr) in lrs.iter().enumerate() {
        let expected = match e {
            0..=3 => 1e-4,
            4..=7 => 1e-5,
            _ => 1e-6,
        };
        assert!((lr - expected).abs() < 1e-18, "epoch {e}: {lr}");
    }
}

#[test]
fn train_config_rejects_bad_values() {
    let ok = TrainConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        TrainConfig { lr: -1.0, ..ok.clone() },
        TrainConfig { lr: f64::NAN, ..ok.clone() },
        TrainConfig { batch_size: 0, ..ok.clone() },
        TrainConfig { decay_every: 0, ..ok.clone() },
        TrainConfig { sinkhorn_iters: 0, ..ok.clone() },
        TrainConfig { lr_decay: 0.0, ..ok.clone() },
        TrainConfig { alpha: -0.5, ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_))));
    }
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "learning_rate": 1}"#).is_err());
    let partial: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
    assert_eq!(partial, TrainConfig { epochs: 3, ..TrainConfig::default() });
}

fn five_node_sample(seed: u64, use_geometry: bool) -> (Model, TrainingSample) {
    let gen = GeneratorConfig {
        nodes_per_fragment: (5, 5),
        points_per_object: (30, 40),
        ..GeneratorConfig::default()
    };
    let pair = generate_scene_pair(&gen, seed).unwrap();
    let enc = EncoderConfig {
        use_geometry,
        ..EncoderConfig::default()
    };
    let model = Model::init(enc, MatcherConfig::default(), seed).unwrap();
    let sample = TrainingSample::new(&pair, &model.encoder_config).unwrap();
    (model, sample)
}

fn perturbed(model: &Model, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.with_tensors(model.tensors().into_iter().map(|t| t.map(|v| v + rng.random_range(-0.05..0.05))).collect())
}

#[test]
fn pipeline_gradient_matches_finite_differences() {
    for (seed, geo) in [(3, true), (4, false)] {
        let (model, sample) = five_node_sample(seed, geo);
        let r = loss_grad_check(&perturbed(&model, seed), &sample, &TrainConfig::default(), 1e-4, 6, seed).unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
        assert!(r.probed > 50);
    }
}

#[test]
fn pair_without_matches_trains_only_similarity() {
    let (model, mut sample) = five_node_sample(5, true);
    sample.gt.clear();
    let cfg = TrainConfig::default();
    let (l_s, l_k, grads) = sample_gradient(&model, &sample, &cfg).unwrap();
    assert_eq!(l_s, 0.0);
    assert!(l_k > 0.0);
    assert_eq!(grads.len(), model.tensors().len());
    let report = dataset_loss(&model, std::slice::from_ref(&sample), &cfg).unwrap();
    assert!((report.l - cfg.alpha * l_k).abs() < 1e-12);
}

#[test]
fn batch_gradient_is_the_mean_of_sample_gradients() {
    let (model, a) = five_node_sample(6, true);
    let (_, b) = five_node_sample(7, true);
    let cfg = TrainConfig::default();
    let (_, _, ga) = sample_gradient(&model, &a, &cfg).unwrap();
    let (_, _, gb) = sample_gradient(&model, &b, &cfg).unwrap();
    let (_, g) = batch_gradient(&model, &[&a, &b], &cfg).unwrap();
    for ((x, y), m) in ga.iter().zip(&gb).zip(&g) {
        assert!(((x + y) * 0.5 - m).abs().max() < 1e-12);
    }
    assert!(matches!(batch_gradient(&model, &[], &cfg), Err(TrainError::EmptyBatch)));
}
