//! Dataset ingestion (IDX, CIFAR-10 binary), noise injection and a small
//! synthetic dataset for fast tests.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
/// One label byte plus a 3x32x32 channel-planar image.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images `(N, C, H, W)` in `[0, 1]` with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
}

/// Additive Gaussian pixel noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma: f32,
    #[serde(default = "yes")]
    pub clamp: bool,
}

fn yes() -> bool {
    true
}

impl NoiseSpec {
    pub fn new(sigma: f32) -> Self {
        NoiseSpec { sigma, clamp: true }
    }
}

fn parse_err(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(path, offset.min(bytes.len()), format!("file ends before {what}")))
}

fn check_label(label: u8, offset: usize, path: &Path) -> Result<usize> {
    if label > 9 {
        return Err(parse_err(path, offset, format!("label {label} outside 0..=9")));
    }
    Ok(label as usize)
}

/// Parses an IDX image file (`0x00000803`, dims `n, rows, cols`) and its IDX
/// label file (`0x00000801`, dim `n`). Pixels are scaled by 1/255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, split: Split) -> Result<LabeledDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img = read(ip)?;
    let magic = be_u32(&img, 0, ip, "the magic number")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(parse_err(ip, 0, format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(&img, 4, ip, "the image count")? as usize;
    let rows = be_u32(&img, 8, ip, "the row count")? as usize;
    let cols = be_u32(&img, 12, ip, "the column count")? as usize;
    let need = n * rows * cols;
    let pixels = &img[16..];
    if pixels.len() != need {
        let reason = format!("expected {need} pixel bytes for {n}x{rows}x{cols}, found {}", pixels.len());
        return Err(parse_err(ip, 16 + pixels.len().min(need), reason));
    }

    let lab = read(lp)?;
    let magic = be_u32(&lab, 0, lp, "the magic number")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(parse_err(lp, 0, format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let count = be_u32(&lab, 4, lp, "the label count")? as usize;
    if count != n {
        return Err(parse_err(lp, 4, format!("{count} labels for {n} images")));
    }
    if lab.len() - 8 != count {
        return Err(parse_err(lp, 8 + (lab.len() - 8).min(count), format!("expected {count} label bytes, found {}", lab.len() - 8)));
    }
    let labels = lab[8..]
        .iter()
        .enumerate()
        .map(|(i, &b)| check_label(b, 8 + i, lp))
        .collect::<Result<Vec<_>>>()?;
    let data = pixels.iter().map(|&b| f32::from(b) / 255.0).collect();
    Ok(LabeledDataset {
        images: Tensor::new(vec![n, 1, rows, cols], data)?,
        labels,
        split,
    })
}

/// Standard FashionMNIST file names inside `dir`.
pub fn fashion_mnist_paths(dir: impl AsRef<Path>, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let dir = dir.as_ref();
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_fashion_mnist(dir: impl AsRef<Path>, split: Split) -> Result<LabeledDataset> {
    let (images, labels) = fashion_mnist_paths(dir, split);
    load_idx(images, labels, split)
}

/// Concatenates CIFAR-10 binary batches (records of 1 label byte + 3072
/// channel-planar pixel bytes).
pub fn load_cifar10<P: AsRef<Path>>(batch_paths: &[P], split: Split) -> Result<LabeledDataset> {
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for path in batch_paths {
        let path = path.as_ref();
        let bytes = read(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
            return Err(parse_err(
                path,
                whole,
                format!("{} bytes is not a multiple of the {CIFAR_RECORD}-byte record", bytes.len()),
            ));
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            labels.push(check_label(rec[0], r * CIFAR_RECORD, path)?);
            data.extend(rec[1..].iter().map(|&b| f32::from(b) / 255.0));
        }
    }
    Ok(LabeledDataset {
        images: Tensor::new(vec![labels.len(), 3, 32, 32], data)?,
        labels,
        split,
    })
}

/// `images + N(0, sigma^2)` per element, optionally clamped to `[0, 1]`.
pub fn add_noise(images: &Tensor, spec: NoiseSpec, seed: u64) -> Tensor {
    if spec.sigma == 0.0 {
        return images.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, spec.sigma.abs()).expect("finite sigma");
    let mut out = images.clone();
    for v in out.data_mut() {
        *v += normal.sample(&mut rng);
        if spec.clamp {
            *v = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// A seeded permutation of `0..n` cut into batches of `batch_size`.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        match self.images.shape() {
            [_, c, h, w] => [*c, *h, *w],
            s => unreachable!("dataset images are 4-D, got {s:?}"),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (self.images.select(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let (images, labels) = self.batch(indices);
        LabeledDataset {
            images,
            labels,
            split: self.split,
        }
    }

    /// The first `n` samples (datasets are stored shuffled).
    pub fn head(&self, n: usize) -> LabeledDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// A seeded random subset of `n` samples (all of them if `n >= len`).
    pub fn sample(&self, n: usize, seed: u64) -> LabeledDataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        idx.sort_unstable();
        self.subset(&idx)
    }

    /// Keeps only `classes`, relabelled `0..classes.len()` in the given order.
    pub fn filter_classes(&self, classes: &[usize]) -> LabeledDataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        let mut out = self.subset(&idx);
        for y in &mut out.labels {
            *y = classes.iter().position(|c| c == y).expect("filtered");
        }
        out
    }
}

/// Class-conditional Gaussian blobs around random prototype images, clamped
/// to `[0, 1]`. Deterministic in `seed`.
pub fn synthetic(n: usize, classes: usize, shape: [usize; 3], spread: f32, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d: usize = shape.iter().product();
    let prototypes: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..d).map(|_| rng.random_range(0.0f32..1.0)).collect())
        .collect();
    let noise = Normal::new(0.0f32, spread.max(0.0)).expect("finite spread");
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes.max(1);
        labels.push(y);
        data.extend(prototypes[y].iter().map(|&p| (p + noise.sample(&mut rng)).clamp(0.0, 1.0)));
    }
    let mut shape4 = vec![n];
    shape4.extend(shape);
    LabeledDataset {
        images: Tensor::new(shape4, data).expect("sized"),
        labels,
        split: Split::Train,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_identity() {
        let x = Tensor::from_fn(vec![2, 1, 2, 2], |i| i as f32 / 8.0);
        assert_eq!(add_noise(&x, NoiseSpec::new(0.0), 3), x);
    }

    #[test]
    fn clamped_noise_stays_in_unit_interval() {
        let x = Tensor::full(vec![1000], 0.5);
        let y = add_noise(&x, NoiseSpec::new(0.3), 1);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn noise_is_seeded() {
        let x = Tensor::full(vec![64], 0.5);
        let spec = NoiseSpec::new(0.2);
        assert_eq!(add_noise(&x, spec, 5), add_noise(&x, spec, 5));
        assert_ne!(add_noise(&x, spec, 5), add_noise(&x, spec, 6));
    }

    #[test]
    fn filter_classes_relabels() {
        let d = synthetic(12, 4, [1, 2, 2], 0.1, 0);
        let f = d.filter_classes(&[3, 1]);
        assert_eq!(f.len(), 6);
        assert!(f.labels.iter().all(|&y| y < 2));
        assert_eq!(f.labels[0], 1); // class 1 appears first and maps to 1
    }

    #[test]
    fn batches_cover_every_index_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut all: Vec<usize> = shuffled_batches(10, 3, &mut rng).concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
