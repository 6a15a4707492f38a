//! Dataset ingestion: IDX (MNIST) files and a synthetic stand-in.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_SIDE: usize = 32;

/// Feature rows with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix<f32>,
    pub labels: Vec<u8>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows `range` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let dim = self.dim();
        let features = Matrix::new(end - start, dim, self.features.data()[start * dim..end * dim].to_vec())?;
        Ok(Self {
            features,
            labels: self.labels[start..end].to_vec(),
            n_classes: self.n_classes,
        })
    }

    /// Gathers the given rows into a batch matrix.
    pub fn gather(&self, rows: &[usize]) -> (Matrix<f32>, Vec<u8>) {
        let dim = self.dim();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for &r in rows {
            data.extend_from_slice(self.features.row(r));
        }
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        (Matrix::new(rows.len(), dim, data).expect("non-empty batch"), labels)
    }
}

fn dataset_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| dataset_err(path, "truncated header"))
}

/// Parses an IDX3 image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(dataset_err(path, format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(dataset_err(path, format!("truncated payload: {} of {need} bytes", payload.len())));
    }
    Ok((n, rows, cols, payload[..need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(dataset_err(path, format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(dataset_err(path, format!("truncated payload: {} of {n} bytes", payload.len())));
    }
    Ok(payload[..n].to_vec())
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &[f32], src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Vec<f32> {
    let sy = src_h as f32 / dst_h as f32;
    let sx = src_w as f32 / dst_w as f32;
    let mut out = Vec::with_capacity(dst_h * dst_w);
    for y in 0..dst_h {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (src_h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let wy = fy - y0 as f32;
        for x in 0..dst_w {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (src_w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let wx = fx - x0 as f32;
            let top = src[y0 * src_w + x0] * (1.0 - wx) + src[y0 * src_w + x1] * wx;
            let bottom = src[y1 * src_w + x0] * (1.0 - wx) + src[y1 * src_w + x1] * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    out
}

/// Decodes image and label IDX buffers, scaling pixels to `[0, 1]` and
/// resizing each image to 32x32. At most `limit` examples, in file order.
pub fn decode_idx(
    image_bytes: &[u8],
    images_path: &Path,
    label_bytes: &[u8],
    labels_path: &Path,
    limit: usize,
) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(image_bytes, images_path)?;
    let labels = parse_idx_labels(label_bytes, labels_path)?;
    if labels.len() != n {
        return Err(dataset_err(labels_path, format!("{} labels for {n} images", labels.len())));
    }
    if rows == 0 || cols == 0 {
        return Err(dataset_err(images_path, "zero image size"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(dataset_err(labels_path, format!("label {bad} outside 0..=9")));
    }
    let take = n.min(limit);
    if take == 0 {
        return Err(dataset_err(images_path, "no examples"));
    }
    let dim = IMAGE_SIDE * IMAGE_SIDE;
    let mut data = Vec::with_capacity(take * dim);
    for img in pixels.chunks_exact(rows * cols).take(take) {
        let scaled: Vec<f32> = img.iter().map(|&v| f32::from(v) / 255.0).collect();
        data.extend(resize_bilinear(&scaled, rows, cols, IMAGE_SIDE, IMAGE_SIDE));
    }
    Ok(Dataset {
        features: Matrix::new(take, dim, data)?,
        labels: labels[..take].to_vec(),
        n_classes: 10,
    })
}

pub fn load_idx_dataset(images_path: &Path, labels_path: &Path, limit: usize) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    decode_idx(&images, images_path, &labels, labels_path, limit)
}

/// Parameters of the synthetic class-cluster task.
///
/// Each class has `modes` prototype vectors. A prototype is a smooth
/// random curve over the feature index (a sum of `harmonics` sinusoids), so
/// neighbouring features are correlated the way neighbouring pixels are.
/// An example is one prototype of its class plus i.i.d. Gaussian noise of
/// standard deviation `noise`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticParams {
    pub seed: u64,
    pub n: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub noise: f32,
    pub modes: usize,
    pub harmonics: usize,
}

impl SyntheticParams {
    pub fn new(seed: u64, n: usize, n_classes: usize, dim: usize) -> Self {
        Self {
            seed,
            n,
            n_classes,
            dim,
            noise: 1.0,
            modes: 4,
            harmonics: 6,
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        if self.n_classes < 2 || self.n_classes > 256 {
            return Err(Error::Config(format!("n_classes must be in 2..=256, got {}", self.n_classes)));
        }
        if self.n == 0 || self.dim == 0 || self.modes == 0 {
            return Err(Error::Config("synthetic dataset needs n, dim and modes > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let std = Normal::new(0.0f32, 1.0).expect("unit normal");
        let dim = self.dim;
        let mut prototypes = Vec::with_capacity(self.n_classes * self.modes);
        for _ in 0..self.n_classes * self.modes {
            let mut proto = vec![0.0f32; dim];
            for h in 1..=self.harmonics {
                let amp = std.sample(&mut rng) / h as f32;
                let phase = std.sample(&mut rng) * std::f32::consts::PI;
                let freq = h as f32 * std::f32::consts::TAU / dim as f32;
                for (i, v) in proto.iter_mut().enumerate() {
                    *v += amp * (freq * i as f32 + phase).sin();
                }
            }
            prototypes.push(proto);
        }
        let mut data = Vec::with_capacity(self.n * dim);
        let mut labels = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let class = i % self.n_classes;
            let mode = rng.random_range(0..self.modes);
            let proto = &prototypes[class * self.modes + mode];
            for &v in proto {
                data.push(v + self.noise * std.sample(&mut rng));
            }
            labels.push(class as u8);
        }
        Ok(Dataset {
            features: Matrix::new(self.n, dim, data)?,
            labels,
            n_classes: self.n_classes,
        })
    }
}

/// Deterministic Gaussian class-cluster data; see [`SyntheticParams`].
pub fn make_synthetic_dataset(seed: u64, n: usize, n_classes: usize, dim: usize) -> Result<Dataset> {
    SyntheticParams::new(seed, n, n_classes, dim).generate()
}
