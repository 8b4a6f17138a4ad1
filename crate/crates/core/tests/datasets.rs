//! Byte-level fixtures for the IDX and CIFAR-10 loaders and the noise oracle.

use cbc::data::{add_noise, load_cifar10, load_fashion_mnist, load_idx, NoiseSpec, Split, CIFAR_RECORD};
use cbc::{Error, Tensor};
use std::path::{Path, PathBuf};

/// Independent IDX writer: big-endian header, raw bytes.
fn write_idx(dir: &Path, stem: &str, images: &[[u8; 6]], labels: &[u8]) -> (PathBuf, PathBuf) {
    let mut img = vec![0, 0, 8, 3];
    img.extend((images.len() as u32).to_be_bytes());
    img.extend(2u32.to_be_bytes());
    img.extend(3u32.to_be_bytes());
    for im in images {
        img.extend_from_slice(im);
    }
    let mut lab = vec![0, 0, 8, 1];
    lab.extend((labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    let (ip, lp) = (dir.join(format!("{stem}-img")), dir.join(format!("{stem}-lab")));
    std::fs::write(&ip, img).unwrap();
    std::fs::write(&lp, lab).unwrap();
    (ip, lp)
}

fn offset_of(err: Error) -> u64 {
    match err {
        Error::Parse { offset, .. } => offset,
        other => panic!("expected a parse error, got {other}"),
    }
}

#[test]
fn two_image_idx_fixture_parses_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let images = [[0, 51, 102, 153, 204, 255], [255, 0, 255, 0, 1, 2]];
    let (ip, lp) = write_idx(dir.path(), "ok", &images, &[4, 9]);
    let d = load_idx(&ip, &lp, Split::Train).unwrap();
    assert_eq!(d.images.shape(), &[2, 1, 2, 3]);
    assert_eq!(d.labels, vec![4, 9]);
    assert_eq!(&d.images.data()[..6], &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
    assert_eq!(d.images.data()[10], 1.0 / 255.0);
}

#[test]
fn idx_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let images: Vec<[u8; 6]> = (0..5u8).map(|i| [i, i * 3, i * 7, i * 11, i * 13, 255 - i]).collect();
    let labels: Vec<u8> = (0..5).collect();
    let (ip, lp) = write_idx(dir.path(), "a", &images, &labels);
    let d = load_idx(&ip, &lp, Split::Test).unwrap();
    // Re-encode the parsed dataset and parse again.
    let bytes: Vec<[u8; 6]> = d
        .images
        .data()
        .chunks(6)
        .map(|c| {
            let mut out = [0u8; 6];
            for (o, v) in out.iter_mut().zip(c) {
                *o = (v * 255.0).round() as u8;
            }
            out
        })
        .collect();
    assert_eq!(bytes, images);
    let lab: Vec<u8> = d.labels.iter().map(|&y| y as u8).collect();
    let (ip2, lp2) = write_idx(dir.path(), "b", &bytes, &lab);
    assert_eq!(load_idx(&ip2, &lp2, Split::Test).unwrap(), d);
}

#[test]
fn idx_errors_carry_byte_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_idx(dir.path(), "ok", &[[1; 6]], &[1]);

    let empty = dir.path().join("empty");
    std::fs::write(&empty, []).unwrap();
    assert_eq!(offset_of(load_idx(&empty, &lp, Split::Train).unwrap_err()), 0);

    // Labels file where the images file should be: wrong magic at offset 0.
    assert_eq!(offset_of(load_idx(&lp, &lp, Split::Train).unwrap_err()), 0);

    // Truncated pixel block: 3 of 6 bytes present.
    let mut bytes = std::fs::read(&ip).unwrap();
    bytes.truncate(16 + 3);
    let short = dir.path().join("short");
    std::fs::write(&short, &bytes).unwrap();
    assert_eq!(offset_of(load_idx(&short, &lp, Split::Train).unwrap_err()), 19);

    // Label count disagrees with image count.
    let (_, lp2) = write_idx(dir.path(), "two", &[[1; 6], [2; 6]], &[1, 2]);
    assert_eq!(offset_of(load_idx(&ip, &lp2, Split::Train).unwrap_err()), 4);
}

#[test]
fn cifar_single_record_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let mut rec = vec![7u8];
    rec.extend(std::iter::repeat_n(255u8, 3072));
    let p = dir.path().join("data_batch_1.bin");
    std::fs::write(&p, &rec).unwrap();
    let d = load_cifar10(&[&p], Split::Train).unwrap();
    assert_eq!(d.labels, vec![7]);
    assert_eq!(d.images.shape(), &[1, 3, 32, 32]);
    assert!(d.images.data().iter().all(|&v| v == 1.0));
}

#[test]
fn cifar_channel_planes_and_multiple_batches() {
    let dir = tempfile::tempdir().unwrap();
    let mut rec = vec![2u8];
    rec.extend(std::iter::repeat_n(0u8, 1024));
    rec.extend(std::iter::repeat_n(51u8, 1024));
    rec.extend(std::iter::repeat_n(255u8, 1024));
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    std::fs::write(&a, &rec).unwrap();
    std::fs::write(&b, [rec.clone(), rec].concat()).unwrap();
    let d = load_cifar10(&[&a, &b], Split::Test).unwrap();
    assert_eq!(d.len(), 3);
    let s = d.images.sample(2);
    assert_eq!((s[0], s[1024], s[2048]), (0.0, 0.2, 1.0));
}

#[test]
fn cifar_empty_and_ragged_files() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.bin");
    std::fs::write(&empty, []).unwrap();
    let d = load_cifar10(&[&empty], Split::Train).unwrap();
    assert_eq!(d.len(), 0);
    assert_eq!(d.images.shape(), &[0, 3, 32, 32]);

    let ragged = dir.path().join("ragged.bin");
    std::fs::write(&ragged, vec![0u8; CIFAR_RECORD + 5]).unwrap();
    assert_eq!(offset_of(load_cifar10(&[&ragged], Split::Train).unwrap_err()), CIFAR_RECORD as u64);
}

#[test]
fn gaussian_noise_has_requested_std() {
    let x = Tensor::full(vec![1_000_000], 0.5);
    let y = add_noise(&x, NoiseSpec { sigma: 0.3, clamp: false }, 11);
    let n = x.len() as f64;
    let diffs: Vec<f64> = y.data().iter().zip(x.data()).map(|(a, b)| f64::from(a - b)).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((std - 0.3).abs() < 0.01, "std {std}");
    assert!(mean.abs() < 0.01, "mean {mean}");
}

/// Runs only when the FashionMNIST IDX files are present (see scripts/).
#[test]
fn real_fashion_mnist_if_present() {
    let dir = std::env::var("CBC_FASHION_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|_| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/fashion-mnist"));
    if !dir.join("train-images-idx3-ubyte").exists() {
        eprintln!("skipping: no FashionMNIST under {}", dir.display());
        return;
    }
    let train = load_fashion_mnist(&dir, Split::Train).unwrap();
    assert_eq!(train.images.shape(), &[60_000, 1, 28, 28]);
    assert!(train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let test = load_fashion_mnist(&dir, Split::Test).unwrap();
    assert_eq!(test.len(), 10_000);
    assert_eq!(test.num_classes(), 10);
}
