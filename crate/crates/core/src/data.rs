//! MNIST in the IDX format, deterministic batching and synthetic data.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EbmError, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::{one_hot, Sample};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;
/// Training images used for reproduction runs.
pub const DEFAULT_TRAIN_SIZE: usize = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub name: String,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The first `n` samples (all of them if fewer).
    pub fn truncated(&self, n: usize) -> Dataset {
        Dataset {
            samples: self.samples.iter().take(n).cloned().collect(),
            name: self.name.clone(),
            split: self.split,
        }
    }
}

/// Reads a whole file, inflating it if it is gzip-compressed.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| EbmError::Truncated {
            path: path.display().to_string(),
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Parses an IDX file and returns its dimensions and payload.
fn parse_idx(path: &Path, expected_magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != expected_magic {
        return Err(EbmError::BadMagic {
            path: path.display().to_string(),
            found: magic,
            expected: expected_magic,
        });
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|i| be_u32(&bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndims;
    let expected = dims.iter().product::<usize>();
    let found = bytes.len() - header;
    if found < expected {
        return Err(EbmError::Truncated {
            path: path.display().to_string(),
            expected,
            found,
        });
    }
    Ok((dims, bytes[header..header + expected].to_vec()))
}

/// Loads an image/label IDX pair (plain or gzipped). Pixels are scaled into
/// `[0, 1]` and labels one-hot encoded over 10 classes.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let (idims, pixels) = parse_idx(images_path, IMAGE_MAGIC)?;
    let (ldims, labels) = parse_idx(labels_path, LABEL_MAGIC)?;
    let (n, dim) = (idims[0], idims[1] * idims[2]);
    if n != ldims[0] {
        return Err(EbmError::CountMismatch {
            images: n,
            labels: ldims[0],
        });
    }
    let mut samples = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        if label as usize >= MNIST_CLASSES {
            return Err(EbmError::Domain(format!(
                "label {label} at index {i} of {} is not a digit",
                labels_path.display()
            )));
        }
        let input: Vec<f64> = pixels[i * dim..(i + 1) * dim]
            .iter()
            .map(|&p| p as f64 / 255.0)
            .collect();
        samples.push(Sample::new(Vector::new(input), one_hot(label as usize, MNIST_CLASSES)));
    }
    let name = images_path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let split = if name.starts_with("t10k") || name.contains("test") {
        Split::Test
    } else {
        Split::Train
    };
    let ds = Dataset { samples, name, split };
    check_normalized(&ds)?;
    Ok(ds)
}

/// Every pixel in `[0, 1]` and every target one-hot.
pub fn check_normalized(ds: &Dataset) -> Result<()> {
    for (i, s) in ds.samples.iter().enumerate() {
        if s.input.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(EbmError::Domain(format!("sample {i} has a pixel outside [0, 1]")));
        }
        let ones = s.target.iter().filter(|&&t| t == 1.0).count();
        if ones != 1 || s.target.iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(EbmError::Domain(format!("sample {i} has a target that is not one-hot")));
        }
    }
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    let mut file = File::create(path)?;
    if gz {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        file.write_all(bytes)?;
    }
    Ok(())
}

/// Writes square images and their labels as an IDX pair (gzipped when the
/// file name ends in `.gz`). Pixels are rounded to the nearest `k/255`.
pub fn write_mnist_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let dim = ds.samples.first().ok_or(EbmError::EmptyDataset)?.input.len();
    let side = (dim as f64).sqrt().round() as usize;
    if side * side != dim {
        return Err(EbmError::Shape(format!("images of {dim} pixels are not square")));
    }
    let n = ds.len() as u32;
    let mut images = Vec::with_capacity(16 + ds.len() * dim);
    for v in [IMAGE_MAGIC, n, side as u32, side as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    let mut labels = Vec::with_capacity(8 + ds.len());
    for v in [LABEL_MAGIC, n] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    for s in &ds.samples {
        images.extend(s.input.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
        labels.push(s.label() as u8);
    }
    write_bytes(images_path.as_ref(), &images)?;
    write_bytes(labels_path.as_ref(), &labels)
}

/// Splits the dataset into batches of `batch_size` (the last one may be
/// shorter), in an order shuffled by `seed` when `shuffle` is set.
pub fn batch_iterator(dataset: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<Sample>>> {
    if dataset.is_empty() {
        return Err(EbmError::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(EbmError::InvalidConfig("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order
        .chunks(batch_size)
        .map(|idx| idx.iter().map(|&i| dataset.samples[i].clone()).collect())
        .collect())
}

/// `n` uniform inputs in `[0,1]^input_dim`, labelled by the argmax of a fixed
/// random linear map.
pub fn synthetic_dataset(n: usize, input_dim: usize, n_classes: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || input_dim == 0 || n_classes == 0 {
        return Err(EbmError::InvalidConfig("synthetic dataset sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rule = Matrix::new(
        n_classes,
        input_dim,
        (0..n_classes * input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let offset: Vec<f64> = (0..n_classes).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let samples = (0..n)
        .map(|_| {
            let x = Vector::new((0..input_dim).map(|_| rng.gen::<f64>()).collect());
            let scores = rule.matvec(&x)?.add(&Vector::new(offset.clone()))?;
            Ok(Sample::new(x, one_hot(scores.argmax(), n_classes)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        name: format!("synthetic-{input_dim}x{n_classes}-seed{seed}"),
        split: Split::Train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(pixels: &[u8], labels: &[u8], dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let n = labels.len() as u32;
        let mut img = Vec::new();
        for v in [IMAGE_MAGIC, n, 28, 28] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend_from_slice(pixels);
        let mut lab = Vec::new();
        for v in [LABEL_MAGIC, n] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend_from_slice(labels);
        let (ip, lp) = (dir.join("imgs-idx3-ubyte"), dir.join("labs-idx1-ubyte"));
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn zero_image_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = tiny(&[0u8; 784], &[7], dir.path());
        let ds = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.samples[0].input, Vector::zeros(784));
        assert_eq!(ds.samples[0].label(), 7);
        assert_eq!(ds.samples[0].target.sum(), 1.0);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (_, lp) = tiny(&[0u8; 784], &[1], dir.path());
        assert!(matches!(load_mnist_idx(&lp, &lp), Err(EbmError::BadMagic { found: 0x801, .. })));
        let short = tempfile::tempdir().unwrap();
        let (ip, _) = tiny(&[0u8; 700], &[1], short.path());
        assert!(matches!(
            load_mnist_idx(&ip, &lp),
            Err(EbmError::Truncated { expected: 784, found: 700, .. })
        ));
    }

    #[test]
    fn count_mismatch_is_reported() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (ip, _) = tiny(&[0u8; 784 * 2], &[1, 2], a.path());
        let (_, lp) = tiny(&[0u8; 784], &[3], b.path());
        assert!(matches!(
            load_mnist_idx(&ip, &lp),
            Err(EbmError::CountMismatch { images: 2, labels: 1 })
        ));
    }

    #[test]
    fn round_trip_through_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..784 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let (ip, lp) = tiny(&pixels, &[0, 5, 9], dir.path());
        let ds = load_mnist_idx(&ip, &lp).unwrap();
        let (ip2, lp2) = (dir.path().join("a.gz"), dir.path().join("b.gz"));
        write_mnist_idx(&ds, &ip2, &lp2).unwrap();
        assert_eq!(load_mnist_idx(&ip2, &lp2).unwrap().samples, ds.samples);
    }

    #[test]
    fn batching() {
        let ds = synthetic_dataset(100, 3, 2, 1).unwrap();
        let sizes: Vec<usize> = batch_iterator(&ds, 64, 0, true).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![64, 36]);
        assert_eq!(batch_iterator(&ds, 64, 5, true).unwrap(), batch_iterator(&ds, 64, 5, true).unwrap());
        let plain: Vec<Sample> = batch_iterator(&ds, 64, 5, false).unwrap().concat();
        assert_eq!(plain, ds.samples);
        let empty = ds.truncated(0);
        assert!(matches!(batch_iterator(&empty, 4, 0, false), Err(EbmError::EmptyDataset)));
    }

    #[test]
    fn synthetic_shapes_and_determinism() {
        let ds = synthetic_dataset(10, 4, 2, 3).unwrap();
        assert_eq!(ds.len(), 10);
        assert!(ds.samples.iter().all(|s| s.target.len() == 2 && s.input.len() == 4));
        assert_eq!(ds, synthetic_dataset(10, 4, 2, 3).unwrap());
        check_normalized(&ds).unwrap();
    }
}
