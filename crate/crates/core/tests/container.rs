mod common;

use common::*;
use nodegam::container::{sha256_hex, ModelFile};
use nodegam::error::Error;
use nodegam::layer::Mode;
use nodegam::network::{Arch, NodeGamModel, Task};
use nodegam::numeric::Matrix;
use nodegam::preprocess::{Frame, Pipeline, PreprocessConfig};
use nodegam::training::train;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn trained_file() -> (ModelFile, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = gaussian_matrix(&mut rng, 200, 3);
    let y: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|r| if r[0] + r[1] * r[2] > 0.0 { 1.0 } else { 0.0 })
        .collect();
    let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let pipeline = Pipeline::fit(
        &Frame::from_matrix(&x, &names, Some(y.clone())),
        None,
        PreprocessConfig::default(),
    )
    .unwrap();
    let z = pipeline.gaussianize(&x).unwrap();
    let mut cfg = small_config(Mode::Ga2m, Arch::Attention, 3, Task::Binary);
    cfg.colsample = 0.5;
    let mut model = NodeGamModel::new(cfg, &mut NodeGamModel::rng(2)).unwrap();
    train(&mut model, &z, &y, &z, &y, &quick_train_config(120, 3)).unwrap();
    let mut file = ModelFile::new(model, Some(pipeline));
    file.provenance.insert("seed".into(), "3".into());
    (file, z)
}

#[test]
fn round_trip_is_bit_exact() {
    let (file, z) = trained_file();
    let bytes = file.to_bytes().unwrap();
    let back = ModelFile::from_bytes(&bytes).unwrap();
    assert_eq!(back, file);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let (a, b) = (
        file.model.predict(&z).unwrap(),
        back.model.predict(&z).unwrap(),
    );
    assert!(a
        .iter()
        .zip(b.iter())
        .all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn save_and_load_via_disk() {
    let (file, _) = trained_file();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ngam");
    file.save(&path).unwrap();
    assert_eq!(ModelFile::load(&path).unwrap(), file);
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(leftovers.len(), 1);
}

#[test]
fn corruption_is_detected() {
    let (file, _) = trained_file();
    let bytes = file.to_bytes().unwrap();
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    assert!(matches!(
        ModelFile::from_bytes(&flipped),
        Err(Error::Format(_))
    ));
    assert!(matches!(
        ModelFile::from_bytes(&bytes[..bytes.len() - 100]),
        Err(Error::Format(_))
    ));
    assert!(matches!(
        ModelFile::from_bytes(b"garbage"),
        Err(Error::Format(_))
    ));
}

#[test]
fn hash_is_stable_hex() {
    assert_eq!(
        sha256_hex(b"abc"),
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    );
}
