use sg_align::encoder::EncoderConfig;
use sg_align::matcher::MatcherConfig;
use sg_align::model::{Model, ModelError, CHECKPOINT_MAGIC};
use sg_align::scenegraph::{generate_scene_pair, GeneratorConfig, ScenePair};
use sg_align::training::*;

fn pairs(overlap: (f64, f64), seeds: std::ops::Range<u64>) -> Vec<ScenePair> {
    let cfg = GeneratorConfig {
        overlap,
        ..GeneratorConfig::default()
    };
    seeds.map(|s| generate_scene_pair(&cfg, s).unwrap()).collect()
}

fn fresh() -> Model {
    Model::init(EncoderConfig::default(), MatcherConfig::default(), 3).unwrap()
}

#[test]
fn training_on_easy_pairs_converges() {
    let data = pairs((1.0, 1.0), 0..200);
    let model = fresh();
    let cfg = TrainConfig::default();
    let samples = prepare_dataset(&data, &model.encoder_config).unwrap();
    let initial = dataset_loss(&model, &samples, &cfg).unwrap().l_s;
    let (trained, curve) = train(&data, model, &cfg).unwrap();
    let last = dataset_loss(&trained, &samples, &cfg).unwrap().l_s;
    assert_eq!(curve.len(), cfg.epochs);
    assert!(last < 0.1 * initial, "initial {initial}, final {last}");
}

#[test]
fn zero_learning_rate_keeps_parameters_bitwise() {
    let data = pairs((0.3, 1.0), 0..6);
    let model = fresh();
    let cfg = TrainConfig {
        lr: 0.0,
        epochs: 2,
        ..TrainConfig::default()
    };
    let (trained, curve) = train(&data, model.clone(), &cfg).unwrap();
    assert_eq!(trained, model);
    assert!((curve[0].l - curve[1].l).abs() < 1e-12);
}

#[test]
fn same_seed_gives_identical_curves() {
    let data = pairs((0.3, 1.0), 0..8);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 3,
        seed: 11,
        ..TrainConfig::default()
    };
    let (a, ca) = train(&data, fresh(), &cfg).unwrap();
    let (b, cb) = train(&data, fresh(), &cfg).unwrap();
    assert_eq!(ca, cb);
    assert_eq!(a, b);
    let (_, cc) = train(&data, fresh(), &TrainConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(ca[1], cc[1]);
}

#[test]
fn non_finite_parameters_are_reported_as_divergence() {
    let data = pairs((0.3, 1.0), 0..2);
    let model = fresh();
    let mut tensors = model.tensors();
    tensors[0][0] = f64::NAN;
    let err = train(&data, model.with_tensors(tensors), &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, TrainError::DivergenceDetected { epoch: 0 }), "{err}");
}

#[test]
fn training_rejects_empty_dataset_and_bad_config() {
    assert!(matches!(train(&[], fresh(), &TrainConfig::default()), Err(TrainError::EmptyDataset)));
    let data = pairs((0.3, 1.0), 0..1);
    let cfg = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    assert!(matches!(train(&data, fresh(), &cfg), Err(TrainError::InvalidConfig(_))));
}

#[test]
fn checkpoint_round_trip_with_state() {
    let data = pairs((0.3, 1.0), 0..4);
    let mut model = fresh();
    let samples = prepare_dataset(&data, &model.encoder_config).unwrap();
    let mut state = TrainState::new(&model);
    train_epoch(&mut model, &mut state, &samples, &TrainConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path, Some(&state)).unwrap();
    let (loaded, loaded_state) = Model::load(&path).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(loaded_state.unwrap(), state);

    model.save(&path, None).unwrap();
    let (loaded, none) = Model::load(&path).unwrap();
    assert_eq!(loaded, model);
    assert!(none.is_none());
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let data = pairs((0.3, 1.0), 0..6);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let (straight, straight_curve) = train(&data, fresh(), &cfg).unwrap();

    let mut model = fresh();
    let samples = prepare_dataset(&data, &model.encoder_config).unwrap();
    let mut state = TrainState::new(&model);
    train_epoch(&mut model, &mut state, &samples, &cfg).unwrap();
    let bytes = model.to_bytes(Some(&state));
    let (mut model, state) = Model::from_bytes(&bytes).unwrap();
    let mut state = state.unwrap();
    train_epoch(&mut model, &mut state, &samples, &cfg).unwrap();

    assert_eq!(model, straight);
    assert_eq!(state.curve, straight_curve);
    assert!(state.curve.windows(2).all(|w| w[1].epoch == w[0].epoch + 1));
}

fn patch(bytes: &[u8], from: &str, to: &str) -> Vec<u8> {
    assert_eq!(from.len(), to.len());
    let pos = bytes.windows(from.len()).position(|w| w == from.as_bytes()).expect("pattern present");
    let mut out = bytes.to_vec();
    out[pos..pos + to.len()].copy_from_slice(to.as_bytes());
    out
}

#[test]
fn checkpoint_errors() {
    let bytes = fresh().to_bytes(None);
    let wrong_shape = patch(&bytes, "\"afa_hidden\":16", "\"afa_hidden\":17");
    assert!(matches!(Model::from_bytes(&wrong_shape), Err(ModelError::CheckpointMismatch(_))));
    let future = patch(&bytes, "\"version\":1", "\"version\":7");
    assert!(matches!(Model::from_bytes(&future), Err(ModelError::UnsupportedVersion(7))));
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    assert!(matches!(Model::from_bytes(&bad_magic), Err(ModelError::Format(_))));
    assert!(matches!(Model::from_bytes(&bytes[..bytes.len() - 8]), Err(ModelError::Format(_))));
    assert!(matches!(Model::from_bytes(&CHECKPOINT_MAGIC[..]), Err(ModelError::Format(_))));
    assert!(matches!(Model::load(std::path::Path::new("/nonexistent/model.ckpt")), Err(ModelError::Io(_))));
}

#[test]
fn loss_curve_csv_has_one_row_per_epoch() {
    let data = pairs((0.3, 1.0), 0..3);
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let (_, curve) = train(&data, fresh(), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    write_loss_curve(&curve, &path).unwrap();
    let mut reader = csv::Reader::from_path(&path).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["epoch", "L_s", "L_k", "L"]);
    let rows: Vec<(usize, f64, f64, f64)> = reader.deserialize().map(Result::unwrap).collect();
    assert_eq!(rows.len(), cfg.epochs);
    for (row, e) in rows.iter().zip(&curve) {
        assert_eq!(*row, (e.epoch, e.l_s, e.l_k, e.l));
        assert!((e.l - e.l_s - cfg.alpha * e.l_k).abs() < 1e-9);
    }
}
