//! Checkpoint round-trips through the filesystem and corruption detection.

use advlab_core::checkpoint::{load_model, matches_existing, save_model, BLOB_FILE};
use advlab_core::nn::builders;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fs;

#[test]
fn save_load_roundtrip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = builders::build_autoencoder(&[1, 28, 28], &mut rng).unwrap();
    let mut training = BTreeMap::new();
    training.insert("epochs".into(), serde_json::json!(5));
    let manifest = save_model(dir.path(), &model, "ae", 5, training).unwrap();

    let (restored, manifest2) = load_model(dir.path()).unwrap();
    assert_eq!(manifest, manifest2);
    for ((n1, p1), (_, p2)) in model.params().iter().zip(restored.params().iter()) {
        assert_eq!(p1, p2, "{n1} differs after disk roundtrip");
    }
    assert!(matches_existing(dir.path(), &manifest.manifest_hash().unwrap()));
    assert!(!matches_existing(dir.path(), "deadbeef"));
}

#[test]
fn corrupted_blob_names_parameter_and_offset() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = builders::build_lenet5(10, &[1, 28, 28], &mut rng).unwrap();
    let manifest = save_model(dir.path(), &model, "c", 6, BTreeMap::new()).unwrap();

    let blob_path = dir.path().join(BLOB_FILE);
    let mut blob = fs::read(&blob_path).unwrap();
    let victim = &manifest.params[2];
    let pos = (victim.offset + 3) as usize;
    blob[pos] ^= 0x40;
    fs::write(&blob_path, &blob).unwrap();

    let err = load_model(dir.path()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains(&victim.name), "error should name the parameter: {msg}");
    assert!(msg.contains(&victim.offset.to_string()), "error should give the offset: {msg}");
}
