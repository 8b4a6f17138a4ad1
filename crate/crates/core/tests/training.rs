//! Training protocols on small synthetic problems, plus the checkpoint format.

use cbc::data::{synthetic, LabeledDataset, NoiseSpec, Split};
use cbc::nn::{marker, truncate_for_cbc, ArchitectureSpec, LayerSpec, Model};
use cbc::train::checkpoint::{load_model, read_tensors, save_model, write_tensors};
use cbc::train::{
    accuracy, compose_dae_cnn, reconstruction_error, retrain_on_reconstructions, train_cbc, train_classifier,
    train_dae, TrainConfig,
};
use cbc::{Error, Tensor};

fn mlp() -> ArchitectureSpec {
    ArchitectureSpec::new(
        "mlp",
        [1, 4, 4],
        vec![
            LayerSpec::dense("fc1", 16, 8),
            LayerSpec::relu("r1"),
            LayerSpec::dense("fc2", 8, 2),
            LayerSpec::softmax("sm"),
        ],
    )
}

/// Two blobs on either side of the hyperplane `mean(x) = 0.5`.
fn separable(n: usize, seed: u64) -> LabeledDataset {
    let d = synthetic(n, 2, [1, 4, 4], 0.05, seed);
    let mut images = d.images.clone();
    for (i, &y) in d.labels.iter().enumerate() {
        let base = if y == 0 { 0.25 } else { 0.75 };
        for v in images.sample_mut(i) {
            *v = (base + (*v - 0.5) * 0.3).clamp(0.0, 1.0);
        }
    }
    LabeledDataset { images, ..d }
}

fn tiny_dae() -> ArchitectureSpec {
    ArchitectureSpec::new(
        "tiny-dae",
        [1, 8, 8],
        vec![
            LayerSpec::conv("enc1", 8, 4, 2, 1),
            LayerSpec::relu("enc1_relu"),
            LayerSpec::conv("enc2", 16, 4, 2, 1),
            LayerSpec::relu("enc2_relu"),
            LayerSpec::conv_transpose("dec1", 8, 4, 2, 1),
            LayerSpec::relu("dec1_relu"),
            LayerSpec::conv_transpose("dec2", 1, 4, 2, 1),
        ],
    )
    .with_boundary(marker::ENCODER_OUT, 4)
    .with_boundary(marker::DECODER_OUT, 7)
}

fn tiny_base() -> ArchitectureSpec {
    ArchitectureSpec::new(
        "tiny-base",
        [1, 8, 8],
        vec![
            LayerSpec::conv("conv1", 4, 3, 1, 0),
            LayerSpec::relu("relu1"),
            LayerSpec::conv("conv2", 8, 3, 1, 0),
            LayerSpec::relu("relu2"),
            LayerSpec::dense("fc1", 128, 3),
            LayerSpec::softmax("sm"),
        ],
    )
}

#[test]
fn separable_blobs_are_learned() {
    let data = separable(256, 1);
    let mut model = Model::build(&mlp(), 3).unwrap();
    let cfg = TrainConfig {
        batch_size: 32,
        ..TrainConfig::new(20, 0.01, 5)
    };
    let history = train_classifier(&mut model, &data, &cfg).unwrap();
    assert_eq!(history.len(), 20);
    assert!(accuracy(&model, &data).unwrap() >= 0.99);
    assert!(history[5].loss < history[0].loss);
}

#[test]
fn zero_epochs_keep_initialization() {
    let data = separable(32, 1);
    let init = Model::build(&mlp(), 3).unwrap();
    let mut model = init.clone();
    train_classifier(&mut model, &data, &TrainConfig::new(0, 0.01, 0)).unwrap();
    assert_eq!(model.params(), init.params());
}

#[test]
fn training_is_deterministic_and_seed_sensitive() {
    let data = separable(96, 2);
    let run = |seed| {
        let mut m = Model::build(&mlp(), 1).unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            ..TrainConfig::new(2, 0.01, seed)
        };
        train_classifier(&mut m, &data, &cfg).unwrap();
        m
    };
    assert_eq!(run(4).params(), run(4).params());
    assert_ne!(run(4).params(), run(5).params());
}

#[test]
fn mismatched_dataset_is_rejected() {
    let data = synthetic(8, 2, [1, 5, 5], 0.1, 0);
    let mut m = Model::build(&mlp(), 0).unwrap();
    assert!(train_classifier(&mut m, &data, &TrainConfig::new(1, 0.01, 0)).is_err());
}

#[test]
fn dae_memorizes_a_single_image() {
    let data = synthetic(1, 1, [1, 8, 8], 0.0, 9);
    let mut dae = Model::build(&tiny_dae(), 2).unwrap();
    let before = reconstruction_error(&dae, &data.images, NoiseSpec::new(0.0), 0).unwrap();
    let cfg = TrainConfig::new(400, 0.01, 0);
    let history = train_dae(&mut dae, &data, NoiseSpec::new(0.0), &cfg).unwrap();
    let after = reconstruction_error(&dae, &data.images, NoiseSpec::new(0.0), 0).unwrap();
    assert!(after < 0.05 * before, "{before} -> {after}");
    assert!(history.iter().all(|h| h.e_r.unwrap() >= 0.0));
}

#[test]
fn trained_dae_beats_untrained_on_held_out_noise() {
    let train = synthetic(256, 4, [1, 8, 8], 0.05, 1);
    let test = synthetic(64, 4, [1, 8, 8], 0.05, 1).head(64);
    let noise = NoiseSpec::new(0.3);
    let mut dae = Model::build(&tiny_dae(), 2).unwrap();
    let untrained = reconstruction_error(&dae, &test.images, noise, 77).unwrap();
    train_dae(&mut dae, &train, noise, &TrainConfig::new(15, 0.01, 3)).unwrap();
    let trained = reconstruction_error(&dae, &test.images, noise, 77).unwrap();
    assert!(trained < untrained, "{untrained} -> {trained}");
}

#[test]
fn dae_output_shape_must_match_input() {
    let bad = ArchitectureSpec::new("bad", [1, 8, 8], vec![LayerSpec::conv("c", 1, 3, 1, 0)]);
    let mut m = Model::build(&bad, 0).unwrap();
    let data = synthetic(4, 1, [1, 8, 8], 0.0, 0);
    assert!(matches!(
        train_dae(&mut m, &data, NoiseSpec::new(0.1), &TrainConfig::new(1, 0.01, 0)),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn cbc_training_keeps_encoder_bits() {
    let data = synthetic(128, 3, [1, 8, 8], 0.1, 4);
    let mut dae = Model::build(&tiny_dae(), 1).unwrap();
    train_dae(&mut dae, &data, NoiseSpec::new(0.2), &TrainConfig::new(2, 0.01, 0)).unwrap();
    let spec = truncate_for_cbc(&tiny_base(), &tiny_dae(), 1).unwrap();
    let (cbc, history) = train_cbc(&dae, &spec, &data, &TrainConfig::new(3, 0.01, 2)).unwrap();
    assert_eq!(history.len(), 3);
    for name in ["enc1.weight", "enc1.bias", "enc2.weight", "enc2.bias"] {
        let a = &cbc.param(name).unwrap().value;
        let b = &dae.param(name).unwrap().value;
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{name}");
        assert!(cbc.param(name).unwrap().frozen);
    }
    assert_eq!(cbc.frozen_count(), 4);
}

#[test]
fn dae_cnn_composition_and_retraining() {
    let data = synthetic(64, 3, [1, 8, 8], 0.1, 4);
    let dae = Model::build(&tiny_dae(), 1).unwrap();
    let mut base = Model::build(&tiny_base(), 2).unwrap();
    retrain_on_reconstructions(&dae, &mut base, &data, &TrainConfig::new(1, 0.01, 0)).unwrap();
    let joint = compose_dae_cnn(&dae, &base).unwrap();
    assert_eq!(joint.params().len(), dae.params().len() + base.params().len());
    let two_stage = base.predict(&dae.predict(&data.images, None, 64).unwrap(), None, 64).unwrap();
    let one_stage = joint.predict(&data.images, None, 64).unwrap();
    assert_eq!(one_stage, two_stage);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut m = Model::build(&tiny_dae(), 5).unwrap();
    m.set_frozen_before(2, true);
    save_model(&path, &m, 5, "unit").unwrap();
    let (back, manifest) = load_model(&path).unwrap();
    assert_eq!(back.params(), m.params());
    assert_eq!(back.spec(), m.spec());
    assert_eq!((manifest.seed, manifest.note.as_str()), (5, "unit"));
}

#[test]
fn checkpoint_rejects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    let t = Tensor::from_fn(vec![2, 3], |i| i as f32);
    write_tensors(&path, None, 0, "", &[("t", &t, false)]).unwrap();
    let (_, tensors) = read_tensors(&path).unwrap();
    assert_eq!(tensors, vec![t]);
    let bytes = std::fs::read(&path).unwrap();

    let bad = dir.path().join("bad");
    std::fs::write(&bad, b"NOTACKPT....").unwrap();
    assert!(matches!(read_tensors(&bad), Err(Error::Parse { offset: 0, .. })));

    std::fs::write(&bad, &bytes[..bytes.len() - 1]).unwrap();
    assert!(read_tensors(&bad).is_err());

    std::fs::write(&bad, [bytes.as_slice(), &[0]].concat()).unwrap();
    assert!(read_tensors(&bad).is_err());

    // Unknown manifest fields are rejected.
    let text = String::from_utf8_lossy(&bytes[12..]).to_string();
    let end = text.find("]}").unwrap() + 2;
    let json = text[..end].replacen("\"seed\"", "\"extra\":1,\"seed\"", 1);
    let mut forged = b"CBCCKPT\0".to_vec();
    forged.extend((json.len() as u32).to_le_bytes());
    forged.extend(json.as_bytes());
    forged.extend(&bytes[12 + end..]);
    std::fs::write(&bad, forged).unwrap();
    assert!(read_tensors(&bad).is_err());
}

#[test]
fn empty_dataset_split_is_kept() {
    let d = synthetic(0, 2, [1, 4, 4], 0.1, 0);
    assert_eq!(d.split, Split::Train);
    assert!(d.is_empty());
}

#[test]
fn cbc_matches_base_on_two_class_fashion_mnist() {
    let dir = std::env::var("CBC_FASHION_MNIST_DIR")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|_| std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/fashion-mnist"));
    if !dir.join("train-images-idx3-ubyte").exists() {
        eprintln!("skipping: no FashionMNIST under {}", dir.display());
        return;
    }
    let pick = |split| {
        cbc::data::load_fashion_mnist(&dir, split)
            .unwrap()
            .filter_classes(&[0, 6])
    };
    let train = pick(Split::Train).head(2000);
    let test = pick(Split::Test).head(1000);
    let cfg = TrainConfig::new(2, 0.001, 5);
    let base_spec = cbc::nn::canonical::by_name("fmnist-base").unwrap();
    let mut base = Model::build(&base_spec, 5).unwrap();
    train_classifier(&mut base, &train, &cfg).unwrap();
    let mut dae = Model::build(&cbc::nn::canonical::by_name("fmnist-dae").unwrap(), 6).unwrap();
    train_dae(&mut dae, &train, NoiseSpec::new(0.3), &cfg).unwrap();
    let cbc_spec = cbc::nn::canonical::by_name("fmnist-cbc").unwrap();
    let (cbc, _) = train_cbc(&dae, &cbc_spec, &train, &cfg).unwrap();
    let (a_base, a_cbc) = (accuracy(&base, &test).unwrap(), accuracy(&cbc, &test).unwrap());
    assert!((a_base - a_cbc).abs() <= 0.05, "base {a_base} vs cbc {a_cbc}");
}
