//! IDX and CIFAR-10 readers, per-channel standardisation and seeded batching.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{RngStream, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: truncated, expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: label {label} outside 0..{classes}")]
    LabelRange { path: PathBuf, label: usize, classes: usize },
    #[error("unknown dataset `{0}` (expected mnist or cifar10)")]
    UnknownDataset(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;

/// Images in `[0, 1]` (standardised once [`Normalization::apply`] runs) with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n x C x H x W`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if n != labels.len() {
            return Err(DataError::CountMismatch { images: n, labels: labels.len() });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::LabelRange { path: PathBuf::new(), label, classes });
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.image_len();
        &self.images.data()[i * len..(i + 1) * len]
    }

    /// The given samples as a `b x C x H x W` batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape();
        let t = Tensor::new(vec![indices.len(), c, h, w], data).expect("gathered batch shape");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.gather(&idx);
        Self { images, labels, classes: self.classes }
    }
}

/// Per-channel mean and standard deviation of a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn fit(data: &Dataset) -> Self {
        let [c, h, w] = data.image_shape();
        let plane = h * w;
        let count = (data.len() * plane) as f64;
        let mut mean = Vec::with_capacity(c);
        let mut std = Vec::with_capacity(c);
        for ch in 0..c {
            let values = (0..data.len()).flat_map(|i| data.image(i)[ch * plane..(ch + 1) * plane].iter());
            let (s, s2) = values.fold((0.0f64, 0.0f64), |(s, s2), &v| (s + v as f64, s2 + (v as f64).powi(2)));
            let m = s / count;
            let var = (s2 / count - m * m).max(0.0);
            mean.push(m as f32);
            std.push(var.sqrt().max(1e-6) as f32);
        }
        Self { mean, std }
    }

    pub fn apply(&self, data: &mut Dataset) {
        let [c, h, w] = data.image_shape();
        let plane = h * w;
        for (i, v) in data.images.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
    }

    pub fn apply_image(&self, image: &mut [f32]) {
        let plane = image.len() / self.mean.len();
        for (i, v) in image.iter_mut().enumerate() {
            let ch = i / plane;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
    }
}

/// File contents, transparently gunzipped when they start with the gzip magic.
fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Truncated { path: path.to_path_buf(), expected: at + 4, found: bytes.len() })
}

/// Reads an IDX image file (`0x00000803`, `n x rows x cols` bytes) and its
/// label file (`0x00000801`, `n` bytes). Either may be gzip-compressed.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_bytes(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Format {
            path: images_path.to_path_buf(),
            message: format!("bad IDX image magic {magic:#010x}"),
        });
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let expected = 16 + n * rows * cols;
    if img.len() < expected {
        return Err(DataError::Truncated { path: images_path.to_path_buf(), expected, found: img.len() });
    }

    let lab = read_bytes(labels_path)?;
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::Format {
            path: labels_path.to_path_buf(),
            message: format!("bad IDX label magic {magic:#010x}"),
        });
    }
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    if lab.len() < 8 + n_labels {
        return Err(DataError::Truncated { path: labels_path.to_path_buf(), expected: 8 + n_labels, found: lab.len() });
    }
    if n_labels != n {
        return Err(DataError::CountMismatch { images: n, labels: n_labels });
    }
    let labels: Vec<usize> = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    if let Some(&label) = labels.iter().find(|&&l| l >= 10) {
        return Err(DataError::LabelRange { path: labels_path.to_path_buf(), label, classes: 10 });
    }
    let pixels = img[16..expected].iter().map(|&b| b as f32 / 255.0).collect();
    let images = Tensor::new(vec![n, 1, rows, cols], pixels).expect("idx shape");
    Ok(Dataset { images, labels, classes: 10 })
}

/// Reads CIFAR-10 binary batches: 3073-byte records of one label byte and
/// 32x32 red, green, blue planes.
pub fn load_cifar10(paths: &[PathBuf]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_bytes(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(DataError::Format {
                path: path.clone(),
                message: format!("size {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            });
        }
        for rec in bytes.chunks(CIFAR_RECORD) {
            let label = rec[0] as usize;
            if label >= 10 {
                return Err(DataError::LabelRange { path: path.clone(), label, classes: 10 });
            }
            labels.push(label);
            pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, 3, 32, 32], pixels).expect("cifar shape");
    Ok(Dataset { images, labels, classes: 10 })
}

fn first_existing(dir: &Path, names: &[&str]) -> Result<PathBuf> {
    for name in names {
        for candidate in [dir.join(name), dir.join(format!("{name}.gz"))] {
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
    }
    Err(DataError::Io {
        path: dir.join(names[0]),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
    })
}

/// Train and test splits of a named dataset stored in `dir`.
///
/// `mnist` expects the four standard IDX files (optionally `.gz`);
/// `cifar10` expects `data_batch_{1..5}.bin` and `test_batch.bin`, either
/// directly in `dir` or in `dir/cifar-10-batches-bin`.
pub fn load_named(name: &str, dir: &Path) -> Result<(Dataset, Dataset)> {
    match name {
        "mnist" => {
            let train = load_idx(
                &first_existing(dir, &["train-images-idx3-ubyte", "train-images.idx3-ubyte"])?,
                &first_existing(dir, &["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"])?,
            )?;
            let test = load_idx(
                &first_existing(dir, &["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"])?,
                &first_existing(dir, &["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"])?,
            )?;
            Ok((train, test))
        }
        "cifar10" => {
            let base = if dir.join("cifar-10-batches-bin").is_dir() { dir.join("cifar-10-batches-bin") } else { dir.to_path_buf() };
            let train: Vec<PathBuf> = (1..=5)
                .map(|i| first_existing(&base, &[&format!("data_batch_{i}.bin")]))
                .collect::<Result<_>>()?;
            let test = first_existing(&base, &["test_batch.bin"])?;
            Ok((load_cifar10(&train)?, load_cifar10(&[test])?))
        }
        other => Err(DataError::UnknownDataset(other.to_string())),
    }
}

/// Index batches of one epoch: Fisher-Yates shuffle driven by `rng`, then
/// consecutive chunks; the last batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Endless supply of training batches.
pub trait BatchSource {
    fn next_batch(&mut self) -> (Tensor, Vec<usize>);
}

/// Epoch after epoch of shuffled batches over a dataset.
pub struct BatchStream<'a> {
    data: &'a Dataset,
    batch_size: usize,
    rng: RngStream,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> BatchStream<'a> {
    pub fn new(data: &'a Dataset, batch_size: usize, rng: RngStream) -> Self {
        assert!(!data.is_empty(), "cannot batch an empty dataset");
        Self { data, batch_size, rng, pending: Vec::new().into_iter() }
    }

    /// Batches of exactly one epoch.
    pub fn epoch(&mut self) -> Vec<(Tensor, Vec<usize>)> {
        epoch_batches(self.data.len(), self.batch_size, &mut self.rng)
            .iter()
            .map(|idx| self.data.gather(idx))
            .collect()
    }
}

impl BatchSource for BatchStream<'_> {
    fn next_batch(&mut self) -> (Tensor, Vec<usize>) {
        loop {
            if let Some(idx) = self.pending.next() {
                return self.data.gather(&idx);
            }
            self.pending = epoch_batches(self.data.len(), self.batch_size, &mut self.rng).into_iter();
        }
    }
}
