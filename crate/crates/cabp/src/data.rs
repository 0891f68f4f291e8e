//! Datasets: CIFAR-10 binary batches, MNIST IDX files, and a seeded synthetic
//! generator. Samples are kept as raw bytes; normalization and augmentation
//! happen at batch assembly so both stay configurable and reproducible.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{AllocCategory, Tensor};

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const MNIST_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    Mnist,
    Synthetic,
}

impl DatasetKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "cifar10" => Ok(DatasetKind::Cifar10),
            "mnist" => Ok(DatasetKind::Mnist),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(Error::Config(format!(
                "unknown dataset kind '{other}' (expected cifar10, mnist, or synthetic)"
            ))),
        }
    }
}

/// In-memory dataset of byte-valued images in CHW order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_bytes(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, index: usize) -> &[u8] {
        let n = self.sample_bytes();
        &self.images[index * n..(index + 1) * n]
    }

    pub fn truncated(mut self, limit: usize) -> Dataset {
        if limit > 0 && limit < self.len() {
            self.images.truncate(limit * self.sample_bytes());
            self.labels.truncate(limit);
        }
        self
    }

    pub fn class_count(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }
}

/// Per-channel normalization applied when assembling a batch.
#[derive(Debug, Clone)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn none(channels: usize) -> Self {
        Normalization { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn cifar10() -> Self {
        Normalization {
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2470, 0.2435, 0.2616],
        }
    }
}

/// Loads `kind` from `path`: a directory with the conventional file names or,
/// for CIFAR-10, optionally a single batch file.
pub fn load_dataset(path: &Path, kind: DatasetKind) -> Result<Dataset> {
    match kind {
        DatasetKind::Cifar10 => load_cifar10(path),
        DatasetKind::Mnist => load_mnist(path),
        DatasetKind::Synthetic => Err(Error::Config(
            "synthetic data is generated, not loaded; use synthetic_dataset".into(),
        )),
    }
}

fn load_cifar10(path: &Path) -> Result<Dataset> {
    let files: Vec<PathBuf> = if path.is_file() {
        vec![path.to_path_buf()]
    } else {
        let mut found: Vec<PathBuf> = (1..=5)
            .map(|i| path.join(format!("data_batch_{i}.bin")))
            .filter(|p| p.exists())
            .collect();
        if found.is_empty() {
            let single = path.join("train.bin");
            if single.exists() {
                found.push(single);
            }
        }
        if found.is_empty() {
            return Err(Error::DataFormat(format!(
                "no CIFAR-10 batch files under {}",
                path.display()
            )));
        }
        found
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for file in files {
        let bytes = fs::read(&file)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(Error::DataFormat(format!(
                "{} has {} bytes, not a multiple of the {CIFAR_RECORD_BYTES}-byte record",
                file.display(),
                bytes.len()
            )));
        }
        for record in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
            let label = record[0];
            if label > 9 {
                return Err(Error::DataFormat(format!(
                    "{}: label byte {label} out of range",
                    file.display()
                )));
            }
            labels.push(label);
            images.extend_from_slice(&record[1..]);
        }
    }
    Ok(Dataset { images, labels, channels: 3, height: 32, width: 32 })
}

/// Writes records in CIFAR-10 binary layout: one label byte then 3072 pixel
/// bytes (1024 red, 1024 green, 1024 blue, row-major).
pub fn write_cifar10_file(path: &Path, dataset: &Dataset) -> Result<()> {
    if (dataset.channels, dataset.height, dataset.width) != (3, 32, 32) {
        return Err(Error::DataFormat("CIFAR-10 records are 3x32x32".into()));
    }
    let mut f = fs::File::create(path)?;
    for i in 0..dataset.len() {
        f.write_all(&[dataset.labels[i]])?;
        f.write_all(dataset.image(i))?;
    }
    Ok(())
}

fn read_be_u32(bytes: &[u8], pos: usize, what: &str) -> Result<u32> {
    bytes
        .get(pos..pos + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::DataFormat(format!("truncated IDX file while reading {what}")))
}

/// Parses an IDX image file (magic 0x00000803, big-endian dims).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize, usize)> {
    let magic = read_be_u32(bytes, 0, "magic")?;
    if magic != MNIST_IMAGES_MAGIC {
        return Err(Error::DataFormat(format!("IDX image magic {magic:#010x}, expected {MNIST_IMAGES_MAGIC:#010x}")));
    }
    let count = read_be_u32(bytes, 4, "count")? as usize;
    let rows = read_be_u32(bytes, 8, "rows")? as usize;
    let cols = read_be_u32(bytes, 12, "cols")? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::DataFormat(format!(
            "IDX image file has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    Ok((bytes[16..].to_vec(), count, rows, cols))
}

/// Parses an IDX label file (magic 0x00000801).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(bytes, 0, "magic")?;
    if magic != MNIST_LABELS_MAGIC {
        return Err(Error::DataFormat(format!("IDX label magic {magic:#010x}, expected {MNIST_LABELS_MAGIC:#010x}")));
    }
    let count = read_be_u32(bytes, 4, "count")? as usize;
    if bytes.len() != 8 + count {
        return Err(Error::DataFormat("IDX label file length mismatch".into()));
    }
    Ok(bytes[8..].to_vec())
}

fn load_mnist(path: &Path) -> Result<Dataset> {
    let images_path = path.join("train-images-idx3-ubyte");
    let labels_path = path.join("train-labels-idx1-ubyte");
    let (images, count, rows, cols) = parse_idx_images(&fs::read(&images_path)?)?;
    let labels = parse_idx_labels(&fs::read(&labels_path)?)?;
    if labels.len() != count {
        return Err(Error::DataFormat(format!(
            "{count} images but {} labels",
            labels.len()
        )));
    }
    Ok(Dataset { images, labels, channels: 1, height: rows, width: cols })
}

/// Controls for the synthetic generator.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Scale of the per-class mean pattern, in pixel units.
    pub signal: f64,
    /// Scale of smooth per-sample variation, in pixel units.
    pub noise: f64,
    /// Scale of white per-pixel texture noise, in pixel units.
    pub texture: f64,
    /// Grid size the smooth fields are drawn on before upsampling. Small
    /// values give image-like, low-frequency content.
    pub detail: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            samples: 1024,
            classes: 10,
            channels: 3,
            height: 32,
            width: 32,
            seed: 7,
            signal: 56.0,
            noise: 24.0,
            texture: 8.0,
            detail: 8,
        }
    }
}

/// Gaussian field drawn on a coarse grid and bilinearly upsampled, per
/// channel. This gives the low-frequency spatial structure natural images
/// have, which matters for how pooling behaves.
fn smooth_field(rng: &mut ChaCha8Rng, channels: usize, h: usize, w: usize, grid: usize) -> Vec<f64> {
    let gh = grid.clamp(1, h);
    let gw = grid.clamp(1, w);
    let coarse: Vec<f64> = (0..channels * gh * gw)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    let mut out = Vec::with_capacity(channels * h * w);
    for c in 0..channels {
        let plane = &coarse[c * gh * gw..][..gh * gw];
        for y in 0..h {
            let fy = if h > 1 { y as f64 * (gh - 1) as f64 / (h - 1) as f64 } else { 0.0 };
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(gh - 1);
            let ty = fy - y0 as f64;
            for x in 0..w {
                let fx = if w > 1 { x as f64 * (gw - 1) as f64 / (w - 1) as f64 } else { 0.0 };
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(gw - 1);
                let tx = fx - x0 as f64;
                let top = plane[y0 * gw + x0] * (1.0 - tx) + plane[y0 * gw + x1] * tx;
                let bottom = plane[y1 * gw + x0] * (1.0 - tx) + plane[y1 * gw + x1] * tx;
                out.push(top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    out
}

/// Class-conditional images, quantized to bytes: each class has a fixed
/// smooth mean pattern; samples add smooth variation plus light texture, so
/// small networks can actually learn from it. Fully determined by the spec,
/// bytes included.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pixels = spec.channels * spec.height * spec.width;
    let mut class_means = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        class_means.push(smooth_field(&mut rng, spec.channels, spec.height, spec.width, spec.detail));
    }
    let texture = Normal::new(0.0, 1.0).unwrap();
    let mut images = Vec::with_capacity(spec.samples * pixels);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let class = i % spec.classes;
        labels.push(class as u8);
        let mean = &class_means[class];
        let wobble = smooth_field(&mut rng, spec.channels, spec.height, spec.width, spec.detail);
        for p in 0..pixels {
            let v = 128.0
                + spec.signal * mean[p]
                + spec.noise * wobble[p]
                + spec.texture * texture.sample(&mut rng);
            images.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Dataset { images, labels, channels: spec.channels, height: spec.height, width: spec.width }
}

/// Deterministic augmentation state for CIFAR-style random crop and flip.
pub struct Augmentation {
    rng: ChaCha8Rng,
    pad: usize,
}

impl Augmentation {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        Augmentation { rng, pad: 4 }
    }
}

/// Assembles `indices` into an input tensor and label vector, normalizing
/// per channel and optionally applying random crop plus horizontal flip.
pub fn make_batch<S: Scalar>(
    dataset: &Dataset,
    indices: &[usize],
    norm: &Normalization,
    augment: Option<&mut Augmentation>,
) -> Result<(Tensor<S>, Vec<u32>)> {
    let (c, h, w) = (dataset.channels, dataset.height, dataset.width);
    if norm.mean.len() != c || norm.std.len() != c {
        return Err(Error::Config(format!(
            "normalization has {} channels, dataset has {c}",
            norm.mean.len()
        )));
    }
    let n = indices.len();
    let mut data = vec![S::zero(); n * c * h * w];
    let mut labels = Vec::with_capacity(n);
    let mut aug = augment;
    for (bi, &si) in indices.iter().enumerate() {
        labels.push(dataset.labels[si] as u32);
        let img = dataset.image(si);
        let (dy, dx, flip) = match aug.as_deref_mut() {
            Some(a) => {
                let dy = a.rng.gen_range(0..=2 * a.pad) as isize - a.pad as isize;
                let dx = a.rng.gen_range(0..=2 * a.pad) as isize - a.pad as isize;
                (dy, dx, a.rng.gen_bool(0.5))
            }
            None => (0, 0, false),
        };
        for ci in 0..c {
            let inv_std = 1.0 / norm.std[ci];
            let mean = norm.mean[ci];
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x } as isize + dx;
                    let sy = y as isize + dy;
                    let raw = if sy >= 0 && (sy as usize) < h && sx >= 0 && (sx as usize) < w {
                        img[(ci * h + sy as usize) * w + sx as usize]
                    } else {
                        0
                    };
                    let v = (raw as f64 / 255.0 - mean) * inv_std;
                    data[((bi * c + ci) * h + y) * w + x] = S::from_f64_lossy(v);
                }
            }
        }
    }
    Ok((Tensor::from_vec(vec![n, c, h, w], data, AllocCategory::Input), labels))
}
