//! MNIST IDX ingestion.
//!
//! IDX files start with a big-endian magic (`0x00000803` for images,
//! `0x00000801` for labels), a big-endian item count and, for images, the row
//! and column counts. The payload is one unsigned byte per pixel or label.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const CLASSES: usize = 10;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Row-major images with pixels scaled into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx(format!("truncated IDX header: missing {what}")))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<ImageSet> {
    match read_u32(bytes, 0, "magic")? {
        IMAGE_MAGIC => {}
        LABEL_MAGIC => {
            return Err(Error::Idx(
                "label file given where images expected".into(),
            ))
        }
        other => return Err(Error::Idx(format!("bad image magic 0x{other:08x}"))),
    }
    let count = read_u32(bytes, 4, "item count")? as usize;
    let rows = read_u32(bytes, 8, "row count")? as usize;
    let cols = read_u32(bytes, 12, "column count")? as usize;
    if (rows, cols) != (IMAGE_SIDE, IMAGE_SIDE) {
        return Err(Error::Idx(format!(
            "images are {rows}x{cols}, expected {IMAGE_SIDE}x{IMAGE_SIDE}"
        )));
    }
    let payload = &bytes[16..];
    let expected = count * rows * cols;
    if payload.len() != expected {
        return Err(Error::Idx(format!(
            "truncated image payload: header promises {expected} bytes, file has {}",
            payload.len()
        )));
    }
    Ok(ImageSet {
        count,
        rows,
        cols,
        pixels: payload.iter().map(|&p| f64::from(p) / 255.0).collect(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    match read_u32(bytes, 0, "magic")? {
        LABEL_MAGIC => {}
        IMAGE_MAGIC => {
            return Err(Error::Idx(
                "image file given where labels expected".into(),
            ))
        }
        other => return Err(Error::Idx(format!("bad label magic 0x{other:08x}"))),
    }
    let count = read_u32(bytes, 4, "item count")? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::Idx(format!(
            "truncated label payload: header promises {count} labels, file has {}",
            payload.len()
        )));
    }
    if let Some(&bad) = payload.iter().find(|&&l| l as usize >= CLASSES) {
        return Err(Error::InvalidLabel {
            label: bad as usize,
            classes: CLASSES,
        });
    }
    Ok(payload.to_vec())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<ImageSet> {
    let path = path.as_ref();
    parse_idx_images(&read_file(path)?).map_err(|e| with_path(path, e))
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    parse_idx_labels(&read_file(path)?).map_err(|e| with_path(path, e))
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Idx(msg) => Error::Idx(format!("{}: {msg}", path.display())),
        other => other,
    }
}

/// Images paired with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: usize,
    images: Vec<f64>,
    labels: Vec<u8>,
}

impl LabeledDataset {
    pub fn new(features: usize, images: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if features == 0 || images.len() != features * labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} pixel values for {} labels of {features} features",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = images.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Idx(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            features,
            images,
            labels,
        })
    }

    pub fn from_parts(images: ImageSet, labels: Vec<u8>) -> Result<Self> {
        if images.count != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} images but {} labels",
                images.count,
                labels.len()
            )));
        }
        Self::new(images.rows * images.cols, images.pixels, labels)
    }

    pub fn load(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        Self::from_parts(load_idx_images(images)?, load_idx_labels(labels)?)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * self.features..(i + 1) * self.features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.images
            .chunks_exact(self.features)
            .zip(&self.labels)
            .map(|(x, &y)| (x, y as usize))
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self {
            features: self.features,
            images,
            labels,
        }
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let indices: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&indices)
    }

    /// Seeded shuffle, then the first `round(fraction * len)` samples go to
    /// the first part.
    pub fn split(&self, seed: u64, fraction: f64) -> Result<(Self, Self)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::InvalidTrainConfig(format!(
                "split fraction {fraction} must lie strictly between 0 and 1"
            )));
        }
        let mut indices: Vec<usize> = (0..self.len()).collect();
        indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = (fraction * self.len() as f64).round() as usize;
        Ok((self.subset(&indices[..cut]), self.subset(&indices[cut..])))
    }
}

/// Paths of the four standard MNIST files inside `dir`.
#[derive(Debug, Clone)]
pub struct MnistPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            train_images: dir.join(TRAIN_IMAGES),
            train_labels: dir.join(TRAIN_LABELS),
            test_images: dir.join(TEST_IMAGES),
            test_labels: dir.join(TEST_LABELS),
        }
    }

    pub fn exists(&self) -> bool {
        [
            &self.train_images,
            &self.train_labels,
            &self.test_images,
            &self.test_labels,
        ]
        .iter()
        .all(|p| p.is_file())
    }

    pub fn load_train(&self) -> Result<LabeledDataset> {
        LabeledDataset::load(&self.train_images, &self.train_labels)
    }

    pub fn load_test(&self) -> Result<LabeledDataset> {
        LabeledDataset::load(&self.test_images, &self.test_labels)
    }
}

/// Encodes images in IDX3 form; handy for fixtures.
pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
