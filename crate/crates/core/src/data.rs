//! Dataset parsing and the pixel/epsilon conventions.
//!
//! Pixels live in raw `[0, 1]` space (byte value / 255) with no mean/std
//! standardization; perturbation budgets are quoted on the 0-255 scale and
//! converted through [`epsilon_to_unit`]. Parsing is bit-exact and
//! order-preserving, and every dataset carries a SHA-256 provenance
//! checksum that reports embed.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;

/// Images plus labels, immutable after load.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    /// `N x C x H x W`, every pixel in `[0, 1]`.
    pub images: Tensor,
    /// Class index per sample, each in `[0, num_classes)`.
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Split tag ("train", "test", ...). Free-form, recorded in reports.
    pub split: String,
    /// SHA-256 over the source bytes (images file then labels file).
    pub checksum: String,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape (CHW).
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Copy out a contiguous batch.
    pub fn batch(&self, start: usize, end: usize) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.slice_rows(start, end)?;
        Ok((images, self.labels[start..end].to_vec()))
    }

    /// Copy out an arbitrary index set (seeded shuffles, fixed subsets).
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.take_rows(idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    /// In-memory dataset for tests and synthetic controls.
    pub fn from_parts(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return Err(CoreError::contract(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(CoreError::contract(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabeledDataset {
            images,
            labels,
            num_classes,
            split: "memory".into(),
            checksum: String::new(),
        })
    }
}

/// Convert a 0-255 perturbation budget to `[0, 1]` pixel space.
pub fn epsilon_to_unit(eps_255: i64) -> Result<f64> {
    if eps_255 < 0 {
        return Err(CoreError::contract(format!("epsilon must be >= 0, got {eps_255}")));
    }
    Ok(eps_255 as f64 / 255.0)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, offset: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(CoreError::Parse {
                offset: self.bytes.len() as u64,
                detail: format!(
                    "truncated file: need {n} bytes for {what} at offset {}, only {} left",
                    self.offset,
                    self.bytes.len() - self.offset
                ),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn read_u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse the big-endian IDX pair used by MNIST. Image magic must be
/// 0x00000803 (then N, rows, cols), label magic 0x00000801 (then N); pixel
/// bytes are divided by 255.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;
    let mut dataset = parse_mnist_idx(&image_bytes, &label_bytes)?;
    dataset.checksum = checksum_of(&[&image_bytes, &label_bytes]);
    dataset.split = images_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(dataset)
}

/// Byte-level IDX parser (exposed for fixture tests).
pub fn parse_mnist_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<LabeledDataset> {
    let mut img = Cursor::new(image_bytes);
    let magic = img.read_u32_be("image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(CoreError::Parse {
            offset: 0,
            detail: format!("bad IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = img.read_u32_be("image count")? as usize;
    let rows = img.read_u32_be("row count")? as usize;
    let cols = img.read_u32_be("col count")? as usize;
    let pixel_bytes = img.take(n * rows * cols, "pixel data")?;
    if img.offset != image_bytes.len() {
        return Err(CoreError::Parse {
            offset: img.offset as u64,
            detail: format!("{} trailing bytes after pixel data", image_bytes.len() - img.offset),
        });
    }

    let mut lab = Cursor::new(label_bytes);
    let lmagic = lab.read_u32_be("label magic")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(CoreError::Parse {
            offset: 0,
            detail: format!("bad IDX label magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let ln = lab.read_u32_be("label count")? as usize;
    if ln != n {
        return Err(CoreError::Parse {
            offset: 4,
            detail: format!("image file has {n} samples but label file has {ln}"),
        });
    }
    let raw_labels = lab.take(ln, "label data")?;

    let data: Vec<f64> = pixel_bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    let images = Tensor::from_vec(vec![n, 1, rows, cols], data)?;
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(CoreError::Parse {
            offset: (8 + pos) as u64,
            detail: format!("label byte {} out of range 0-9", labels[pos]),
        });
    }
    LabeledDataset::from_parts(images, labels, 10)
}

/// Parse one CIFAR10 binary batch: 3073-byte records of 1 label byte plus
/// 3072 CHW pixel bytes.
pub fn load_cifar10_bin(path: &Path) -> Result<LabeledDataset> {
    let bytes = fs::read(path)?;
    let mut dataset = parse_cifar10_bin(&bytes)?;
    dataset.checksum = checksum_of(&[&bytes]);
    dataset.split = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(dataset)
}

/// Byte-level CIFAR10 parser (exposed for fixture tests).
pub fn parse_cifar10_bin(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(CoreError::Parse {
            offset: bytes.len() as u64,
            detail: format!(
                "file length {} is not a positive multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0] as usize;
        if label > 9 {
            return Err(CoreError::Parse {
                offset: (i * CIFAR_RECORD) as u64,
                detail: format!("label byte {label} out of range 0-9"),
            });
        }
        labels.push(label);
        data.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    let images = Tensor::from_vec(vec![n, 3, 32, 32], data)?;
    LabeledDataset::from_parts(images, labels, 10)
}

fn checksum_of(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p);
    }
    hex_string(&hasher.finalize())
}

/// Lowercase hex of a digest.
pub fn hex_string(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_fixture(images: &[[u8; 4]], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        // 2x2 "images"
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(images.len() as u32).to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        for im in images {
            img.extend_from_slice(im);
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lab.extend_from_slice(labels);
        (img, lab)
    }

    #[test]
    fn idx_fixture_roundtrips_exactly() {
        let (img, lab) = idx_fixture(&[[0, 51, 102, 255], [255, 204, 153, 0]], &[3, 7]);
        let ds = parse_mnist_idx(&img, &lab).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 7]);
        assert_eq!(
            ds.images.data(),
            &[
                0.0,
                51.0 / 255.0,
                102.0 / 255.0,
                1.0,
                1.0,
                204.0 / 255.0,
                153.0 / 255.0,
                0.0
            ]
        );
    }

    #[test]
    fn idx_wrong_magic() {
        let (mut img, lab) = idx_fixture(&[[0; 4]], &[0]);
        img[3] = 0x99;
        let err = parse_mnist_idx(&img, &lab).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn idx_truncated_reports_offset() {
        let (img, lab) = idx_fixture(&[[0; 4]], &[0]);
        let err = parse_mnist_idx(&img[..img.len() - 1], &lab).unwrap_err();
        assert!(matches!(err, CoreError::Parse { .. }), "{err}");
    }

    #[test]
    fn idx_count_mismatch() {
        let (img, lab) = idx_fixture(&[[0; 4]], &[0]);
        let (_, lab2) = idx_fixture(&[[0; 4], [0; 4]], &[0, 1]);
        let err = parse_mnist_idx(&img, &lab2).unwrap_err();
        assert!(err.to_string().contains("1 samples"), "{err}");
        drop(lab);
    }

    #[test]
    fn cifar_record_parses_exactly() {
        let mut record = vec![7u8];
        record.extend((0..3072u32).map(|i| (i % 256) as u8));
        let ds = parse_cifar10_bin(&record).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels, vec![7]);
        assert_eq!(ds.images.shape(), &[1, 3, 32, 32]);
        assert_eq!(ds.images.data()[0], 0.0);
        assert_eq!(ds.images.data()[255], 1.0);
    }

    #[test]
    fn cifar_bad_length() {
        let err = parse_cifar10_bin(&vec![0u8; 3072]).unwrap_err();
        assert!(matches!(err, CoreError::Parse { .. }));
    }

    #[test]
    fn epsilon_conversion() {
        assert_eq!(epsilon_to_unit(0).unwrap(), 0.0);
        assert_eq!(epsilon_to_unit(255).unwrap(), 1.0);
        assert!((epsilon_to_unit(20).unwrap() - 0.078_431_372_549_019_6).abs() < 1e-15);
        assert!(epsilon_to_unit(-1).is_err());
    }
}
