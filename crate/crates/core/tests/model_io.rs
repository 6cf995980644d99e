// SPDX-License-Identifier: MIT OR Apache-2.0

use additive_recall::dataset::load_dataset;
use additive_recall::fixtures::{build_fixture, random_bundle, FixtureKind, FixtureSpec, RandomDims};
use additive_recall::model::{forward, load_model, ModelPaths};
use additive_recall::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn random_models_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..5 {
        let dims = RandomDims::sample(&mut ChaCha8Rng::seed_from_u64(seed), 3, 3, 32, 8);
        let model = random_bundle(seed, &dims);
        let sub = dir.path().join(seed.to_string());
        let paths = model.save(&sub).unwrap();
        let back = load_model(&paths.config, &paths.weights, &paths.vocab).unwrap();
        assert_eq!(back, model);
        let tokens: Vec<usize> = (0..dims.max_seq.min(5)).map(|i| i % dims.vocab_size).collect();
        let a = forward(&model, &tokens).unwrap();
        let b = forward(&back, &tokens).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn emitted_fixture_reloads_with_its_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let f = build_fixture(&FixtureSpec::new(FixtureKind::Composite, 2)).unwrap();
    let paths = f.emit(dir.path()).unwrap();
    let model = load_model(&paths.model.config, &paths.model.weights, &paths.model.vocab).unwrap();
    assert_eq!(model, f.model);
    let entries = load_dataset(&paths.dataset, &model.vocab).unwrap();
    assert_eq!(entries, f.entries);
    let truth: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&paths.truth).unwrap()).unwrap();
    assert_eq!(truth["kind"], "composite");
    let rows = csv::Reader::from_path(&paths.expected).unwrap().records().count();
    assert_eq!(rows, f.expected.len());
}

#[test]
fn truncated_weights_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let dims = RandomDims::sample(&mut ChaCha8Rng::seed_from_u64(9), 2, 2, 16, 4);
    let paths = random_bundle(9, &dims).save(dir.path()).unwrap();
    let bin = dir.path().join("weights.bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_model(&paths.config, &paths.weights, &paths.vocab).is_err());
    let missing = ModelPaths::in_dir(&dir.path().join("absent"));
    assert!(matches!(
        load_model(&missing.config, &missing.weights, &missing.vocab),
        Err(Error::Io { .. })
    ));
}
