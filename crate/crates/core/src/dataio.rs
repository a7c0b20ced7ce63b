//! MNIST (IDX) and CIFAR-10 (binary batch) loaders and seeded batching.
//!
//! Expected layouts:
//!
//! ```text
//! <mnist dir>/train-images-idx3-ubyte   <mnist dir>/train-labels-idx1-ubyte
//! <mnist dir>/t10k-images-idx3-ubyte    <mnist dir>/t10k-labels-idx1-ubyte
//! <cifar dir>/data_batch_{1..5}.bin     <cifar dir>/test_batch.bin
//! ```
//!
//! Pixels are kept as the source bytes; images are served as `byte / 255`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nnquant::Tensor;
use crate::numstat::RngStream;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3072;
const CIFAR_PER_FILE: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct FileChecksum {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    /// `[channels, height, width]`
    pub image_shape: [usize; 3],
    pub classes: usize,
    pub split: Split,
    pub checksums: Vec<FileChecksum>,
}

impl Dataset {
    pub fn from_parts(pixels: Vec<u8>, labels: Vec<u8>, image_shape: [usize; 3], classes: usize, split: Split) -> Result<Self> {
        let per = image_shape.iter().product::<usize>();
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(Error::Shape(format!(
                "{} pixel bytes for {} images of {:?}",
                pixels.len(),
                labels.len(),
                image_shape
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l as usize >= classes) {
            return Err(Error::Shape(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Dataset {
            pixels,
            labels,
            image_shape,
            classes,
            split,
            checksums: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Images `indices` as an `[n, c, h, w]` tensor plus their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.image_bytes(i).iter().map(|b| *b as f64 / 255.0));
        }
        let [c, h, w] = self.image_shape;
        (
            Tensor::new(vec![indices.len(), c, h, w], data),
            indices.iter().map(|&i| self.label(i)).collect(),
        )
    }

    /// The first `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let mut d = self.clone();
        d.pixels.truncate(n * self.image_len());
        d.labels.truncate(n);
        d
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image_bytes(i));
        }
        Dataset {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            image_shape: self.image_shape,
            classes: self.classes,
            split: self.split,
            checksums: self.checksums.clone(),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn checksum(path: &Path, bytes: &[u8]) -> FileChecksum {
    let digest = Sha256::digest(bytes);
    FileChecksum {
        file: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            msg: "truncated header".into(),
        })
}

/// Parses an IDX image file: magic `0x00000803`, count, rows, cols, bytes.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            msg: format!("truncated: {n} images of {rows}x{cols} need {need} bytes"),
        });
    }
    Ok((bytes[16..need].to_vec(), n, rows, cols))
}

/// Parses an IDX label file: magic `0x00000801`, count, bytes.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            msg: format!("truncated: {n} labels need {} bytes", 8 + n),
        });
    }
    Ok(bytes[8..8 + n].to_vec())
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let img_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lbl_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let img_bytes = read_file(&img_path)?;
    let lbl_bytes = read_file(&lbl_path)?;
    let (pixels, n, rows, cols) = parse_idx_images(&img_bytes, &img_path)?;
    let labels = parse_idx_labels(&lbl_bytes, &lbl_path)?;
    if labels.len() != n {
        return Err(Error::Format {
            path: lbl_path,
            offset: 4,
            msg: format!("{} labels for {n} images", labels.len()),
        });
    }
    let mut ds = Dataset::from_parts(pixels, labels, [1, rows, cols], 10, split).map_err(|e| match e {
        Error::Shape(msg) => Error::Format {
            path: dir.to_path_buf(),
            offset: 0,
            msg,
        },
        other => other,
    })?;
    ds.checksums = vec![checksum(&img_path, &img_bytes), checksum(&lbl_path, &lbl_bytes)];
    Ok(ds)
}

pub fn cifar10_files(dir: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    }
}

/// Parses 3073-byte records: one label byte then 3072 channel-major pixels.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
            msg: format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (i * CIFAR_RECORD) as u64,
                msg: format!("label {} outside 0..10", rec[0]),
            });
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut checksums = Vec::new();
    for path in cifar10_files(dir, split) {
        let bytes = read_file(&path)?;
        if bytes.len() != CIFAR_PER_FILE * CIFAR_RECORD && bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format {
                path: path.clone(),
                offset: 0,
                msg: format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            });
        }
        let (p, l) = parse_cifar10(&bytes, &path)?;
        pixels.extend(p);
        labels.extend(l);
        checksums.push(checksum(&path, &bytes));
    }
    let mut ds = Dataset::from_parts(pixels, labels, [3, 32, 32], 10, split)?;
    ds.checksums = checksums;
    Ok(ds)
}

/// Index batches covering `0..len` exactly once; the last batch may be
/// short. With `shuffle` the order is a seeded Fisher-Yates permutation.
pub fn batches(len: usize, size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if size > len {
        return Err(Error::Config(format!("batch size {size} exceeds dataset size {len}")));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        RngStream::from_seed(seed).shuffle(&mut order);
    }
    Ok(order.chunks(size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
            b.extend(v.to_be_bytes());
        }
        b.extend((0..n * rows * cols).map(|i| (i % 256) as u8));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(IDX_LABELS_MAGIC.to_be_bytes());
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend(labels);
        b
    }

    #[test]
    fn mnist_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("t10k-images-idx3-ubyte"), idx_images(3, 4, 4)).unwrap();
        fs::write(dir.path().join("t10k-labels-idx1-ubyte"), idx_labels(&[1, 7, 9])).unwrap();
        let ds = load_mnist(dir.path(), Split::Test).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.image_shape, [1, 4, 4]);
        let (x, y) = ds.batch(&[2]);
        assert_eq!(y, vec![9]);
        assert_eq!(x.data[0], 32.0 / 255.0);
        assert_eq!(ds.checksums.len(), 2);

        fs::write(dir.path().join("t10k-labels-idx1-ubyte"), idx_labels(&[1, 7])).unwrap();
        assert!(matches!(load_mnist(dir.path(), Split::Test), Err(Error::Format { .. })));

        let mut bad = idx_images(3, 4, 4);
        bad[3] = 0x02;
        fs::write(dir.path().join("t10k-images-idx3-ubyte"), &bad).unwrap();
        match load_mnist(dir.path(), Split::Test) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }

        let mut short = idx_images(3, 4, 4);
        short.truncate(30);
        fs::write(dir.path().join("t10k-images-idx3-ubyte"), &short).unwrap();
        match load_mnist(dir.path(), Split::Test) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 30),
            other => panic!("{other:?}"),
        }
        assert!(matches!(load_mnist(dir.path(), Split::Train), Err(Error::Io { .. })));
    }

    #[test]
    fn cifar_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for i in 0..4u8 {
            bytes.push(i % 10);
            bytes.extend(std::iter::repeat(i).take(3072));
        }
        fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();
        let ds = load_cifar10(dir.path(), Split::Test).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.image_shape, [3, 32, 32]);
        assert!(ds.labels().iter().all(|l| *l < 10));
        assert_eq!(ds.image_bytes(3)[0], 3);

        bytes.push(0);
        fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();
        assert!(matches!(load_cifar10(dir.path(), Split::Test), Err(Error::Format { .. })));
        let (_, labels) = parse_cifar10(&[12u8; CIFAR_RECORD], Path::new("x")).map_or((vec![], vec![]), |v| v);
        assert!(labels.is_empty());
    }

    #[test]
    fn retrain_iterations_per_epoch() {
        assert_eq!(batches(50_000, 200, 0, true).unwrap().len(), 250);
        assert_eq!(batches(60_000, 200, 0, true).unwrap().len(), 300);
    }

    #[test]
    fn batch_order() {
        let plain = batches(10, 3, 5, false).unwrap();
        assert_eq!(plain, vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8], vec![9]]);
        assert_eq!(batches(100, 7, 42, true).unwrap(), batches(100, 7, 42, true).unwrap());
        assert_ne!(batches(100, 7, 42, true).unwrap(), batches(100, 7, 43, true).unwrap());
        let mut all: Vec<usize> = batches(100, 7, 42, true).unwrap().concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(batches(10, 0, 0, true).is_err());
        assert!(batches(10, 11, 0, true).is_err());
    }
}
