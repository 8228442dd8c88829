//! Labeled image datasets: IDX ingestion/export, stratified splits and a
//! synthetic fixture.
//!
//! Images are stored flat as `N x H x W x C` floats in `[0, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IDX_UBYTE: u8 = 0x08;
pub const IDX_F32: u8 = 0x0D;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic {found:#010x} at offset {offset} (expected {expected})")]
    BadMagic {
        path: String,
        offset: u64,
        found: u32,
        expected: &'static str,
    },
    #[error("{path}: truncated payload, expected {expected} bytes after header, found {found}")]
    Truncated {
        path: String,
        expected: u64,
        found: u64,
    },
    #[error("image file has {images} items but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("pixel value {value} outside [0, 1] at index {index}")]
    PixelRange { index: usize, value: f32 },
    #[error("invalid split: {0}")]
    Split(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub shape: ImageShape,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(shape: ImageShape, images: Vec<f32>, labels: Vec<usize>, split: Split) -> Result<Self, DataError> {
        if shape.pixels() == 0 {
            return Err(DataError::Invalid("zero-sized images".into()));
        }
        if images.len() != labels.len() * shape.pixels() {
            return Err(DataError::CountMismatch {
                images: images.len() / shape.pixels(),
                labels: labels.len(),
            });
        }
        if let Some((index, &value)) = images
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(DataError::PixelRange { index, value });
        }
        Ok(Self {
            shape,
            images,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.shape.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Copies the given samples, in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.shape.pixels());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            shape: self.shape,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

struct IdxArray {
    dtype: u8,
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn read_idx(path: &Path, expected_rank: u8, expected: &'static str) -> Result<IdxArray, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let total = file.metadata().map_err(io_err(path))?.len();
    let mut r = BufReader::new(file);
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| DataError::Truncated {
        path: path.display().to_string(),
        expected: 4,
        found: total,
    })?;
    let magic = u32::from_be_bytes(word);
    let dtype = word[2];
    if word[0] != 0 || word[1] != 0 || word[3] != expected_rank || !matches!(dtype, IDX_UBYTE | IDX_F32) {
        return Err(DataError::BadMagic {
            path: path.display().to_string(),
            offset: 0,
            found: magic,
            expected,
        });
    }
    let mut dims = Vec::with_capacity(expected_rank as usize);
    for _ in 0..expected_rank {
        r.read_exact(&mut word).map_err(|_| DataError::Truncated {
            path: path.display().to_string(),
            expected: 4 + 4 * expected_rank as u64,
            found: total,
        })?;
        dims.push(u32::from_be_bytes(word) as usize);
    }
    let elem = if dtype == IDX_F32 { 4 } else { 1 };
    let need = dims.iter().product::<usize>() as u64 * elem;
    let header = 4 + 4 * expected_rank as u64;
    let have = total.saturating_sub(header);
    if have != need {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            expected: need,
            found: have,
        });
    }
    let mut payload = Vec::with_capacity(need as usize);
    r.read_to_end(&mut payload).map_err(io_err(path))?;
    Ok(IdxArray { dtype, dims, payload })
}

/// Reads an IDX image file (rank 3 or 4) and its IDX label file.
///
/// Unsigned-byte pixels are divided by 255; float32 payloads are taken as is
/// and must already lie in `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<LabeledDataset, DataError> {
    let (shape, pixels) = load_idx_images(images)?;
    let lab = read_idx(labels, 1, "0x00000801")?;
    if lab.dtype != IDX_UBYTE {
        return Err(DataError::BadMagic {
            path: labels.display().to_string(),
            offset: 0,
            found: ((lab.dtype as u32) << 8) | 1,
            expected: "0x00000801",
        });
    }
    let n = pixels.len() / shape.pixels().max(1);
    if n != lab.dims[0] {
        return Err(DataError::CountMismatch {
            images: n,
            labels: lab.dims[0],
        });
    }
    let labels = lab.payload.iter().map(|&b| b as usize).collect();
    LabeledDataset::new(shape, pixels, labels, split)
}

/// Reads an IDX image file alone: the per-image shape and all pixels.
pub fn load_idx_images(path: &Path) -> Result<(ImageShape, Vec<f32>), DataError> {
    let img = match read_idx(path, 3, "0x00000803") {
        Err(DataError::BadMagic { found, .. }) if found & 0xff == 4 => read_idx(path, 4, "0x00000804")?,
        other => other?,
    };
    let shape = ImageShape::new(img.dims[1], img.dims[2], img.dims.get(3).copied().unwrap_or(1));
    let pixels: Vec<f32> = if img.dtype == IDX_UBYTE {
        img.payload.iter().map(|&b| b as f32 / 255.0).collect()
    } else {
        img.payload
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    };
    Ok((shape, pixels))
}

fn write_header(w: &mut impl Write, dtype: u8, dims: &[usize]) -> std::io::Result<()> {
    w.write_all(&[0, 0, dtype, dims.len() as u8])?;
    for &d in dims {
        w.write_all(&(d as u32).to_be_bytes())?;
    }
    Ok(())
}

/// Writes a rank-1 unsigned-byte IDX file.
pub fn write_idx_bytes(path: &Path, values: &[u8]) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    write_header(&mut w, IDX_UBYTE, &[values.len()]).map_err(io_err(path))?;
    w.write_all(values).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelEncoding {
    /// Round to `u8` after scaling by 255; exact for datasets loaded from
    /// unsigned-byte IDX.
    UByte,
    /// Big-endian float32 payload; exact for arbitrary `[0, 1]` values.
    Float32,
}

/// Writes images and labels as an IDX pair. Single-channel images use a
/// rank-3 image file, multi-channel a rank-4 one.
pub fn write_idx(data: &LabeledDataset, images: &Path, labels: &Path, enc: PixelEncoding) -> Result<(), DataError> {
    let s = data.shape;
    let mut dims = vec![data.len(), s.height, s.width];
    if s.channels != 1 {
        dims.push(s.channels);
    }
    let mut w = BufWriter::new(File::create(images).map_err(io_err(images))?);
    match enc {
        PixelEncoding::UByte => {
            write_header(&mut w, IDX_UBYTE, &dims).map_err(io_err(images))?;
            let bytes: Vec<u8> = data.images.iter().map(|&v| (v * 255.0).round() as u8).collect();
            w.write_all(&bytes).map_err(io_err(images))?;
        }
        PixelEncoding::Float32 => {
            write_header(&mut w, IDX_F32, &dims).map_err(io_err(images))?;
            for v in &data.images {
                w.write_all(&v.to_be_bytes()).map_err(io_err(images))?;
            }
        }
    }
    w.flush().map_err(io_err(images))?;
    let labs: Vec<u8> = data.labels.iter().map(|&l| l as u8).collect();
    write_idx_bytes(labels, &labs)
}

/// Reads a rank-1 unsigned-byte IDX file, e.g. an attacked-sample flag file.
pub fn read_idx_bytes(path: &Path) -> Result<Vec<u8>, DataError> {
    let arr = read_idx(path, 1, "0x00000801")?;
    Ok(arr.payload)
}

/// Stratified, seeded split into `(train, validation)`.
///
/// `round(N * fraction)` samples go to validation, allocated across classes
/// in proportion to class size.
pub fn split(data: &LabeledDataset, validation_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(DataError::Split(format!(
            "validation fraction {validation_fraction} not in (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.n_classes()];
    for (i, &l) in data.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    // Largest-remainder allocation: the total is exactly round(N * f) and
    // every class is within one sample of its proportional share.
    let total = (data.len() as f64 * validation_fraction).round() as usize;
    let quotas: Vec<f64> = by_class.iter().map(|m| m.len() as f64 * validation_fraction).collect();
    let mut n_val: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let mut missing = total.saturating_sub(n_val.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if n_val[c] < by_class[c].len() {
            n_val[c] += 1;
            missing -= 1;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (members, &nv) in by_class.iter_mut().zip(&n_val) {
        members.shuffle(&mut rng);
        val.extend_from_slice(&members[..nv]);
        train.extend_from_slice(&members[nv..]);
    }
    if train.is_empty() || val.is_empty() {
        return Err(DataError::Split(format!(
            "fraction {validation_fraction} leaves an empty split ({} train, {} validation)",
            train.len(),
            val.len()
        )));
    }
    train.sort_unstable();
    val.sort_unstable();
    let mut t = data.subset(&train);
    t.split = Split::Train;
    let mut v = data.subset(&val);
    v.split = Split::Validation;
    Ok((t, v))
}

/// Class-dependent stripe patterns on a dark background: class `c` gets a
/// distinct orientation and intensity, with per-sample phase, contrast
/// and noise.
pub fn synthetic_blobs(n_classes: usize, n_per_class: usize, size: usize, seed: u64) -> Result<LabeledDataset, DataError> {
    if n_classes == 0 || n_per_class == 0 || size == 0 {
        return Err(DataError::Invalid("synthetic_blobs needs positive sizes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = ImageShape::new(size, size, 1);
    let mut images = Vec::with_capacity(n_classes * n_per_class * shape.pixels());
    let mut labels = Vec::with_capacity(n_classes * n_per_class);
    for i in 0..n_classes * n_per_class {
        let class = i % n_classes;
        let angle = std::f32::consts::PI * class as f32 / n_classes as f32;
        let (dx, dy) = (angle.cos(), angle.sin());
        let intensity = 0.55 + 0.4 * (class % 2) as f32;
        let period = 3.0 + (class % 3) as f32;
        let phase: f32 = rng.random_range(0.0..period);
        let contrast: f32 = rng.random_range(0.85..1.0);
        for y in 0..size {
            for x in 0..size {
                let t = (x as f32 * dx + y as f32 * dy + phase) / period;
                let stripe = if t.fract().abs() < 0.5 { intensity * contrast } else { 0.0 };
                let noise: f32 = rng.random_range(0.0..0.05);
                images.push((stripe + noise).clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    LabeledDataset::new(shape, images, labels, Split::Train)
}
