//! Datasets: seeded Gaussian blobs and IDX image files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-feature standardization statistics, always computed on training data.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub stats: Option<NormStats>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() != y.len() {
            return Err(Error::Contract(format!(
                "dataset has {} labels for inputs of shape {:?}",
                y.len(),
                x.shape()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Contract(format!("label {bad} outside 0..{num_classes}")));
        }
        if !x.all_finite() {
            return Err(Error::Contract("dataset contains non-finite features".into()));
        }
        Ok(Self {
            x,
            y,
            num_classes,
            split,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Smallest and largest feature value over all samples.
    pub fn feature_range(&self) -> (f64, f64) {
        let lo = self.x.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &c in &self.y {
            counts[c] += 1;
        }
        counts
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::UndefinedSubset("empty index list".into()));
        }
        Ok(Self {
            x: self.x.select_rows(idx)?,
            y: idx.iter().map(|&i| self.y[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            stats: self.stats.clone(),
        })
    }

    /// Samples whose label is in `classes`, labels unchanged.
    pub fn restrict(&self, classes: &[usize]) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::UndefinedSubset("no classes requested".into()));
        }
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.y[i])).collect();
        if idx.is_empty() {
            return Err(Error::UndefinedSubset(format!(
                "no samples with labels in {classes:?}"
            )));
        }
        self.subset(&idx)
    }

    /// Standardizes features with the attached statistics (fit on train).
    pub fn normalized(&self) -> Result<Self> {
        let stats = self
            .stats
            .as_ref()
            .ok_or_else(|| Error::Contract("dataset carries no normalization statistics".into()))?;
        let d = self.dim();
        let data = self
            .x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - stats.mean[i % d]) / stats.std[i % d])
            .collect();
        Ok(Self {
            x: Tensor::new(self.x.shape().to_vec(), data)?,
            ..self.clone()
        })
    }

    pub fn concat(a: &Self, b: &Self) -> Result<Self> {
        if a.num_classes != b.num_classes {
            return Err(Error::Contract("datasets disagree on class count".into()));
        }
        let mut y = a.y.clone();
        y.extend(&b.y);
        Ok(Self {
            x: Tensor::vstack(&[&a.x, &b.x])?,
            y,
            num_classes: a.num_classes,
            split: a.split,
            stats: a.stats.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub means: Vec<Vec<f64>>,
    pub sigma: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl BlobSpec {
    /// Class means evenly spaced on a circle in the first two coordinates.
    pub fn circle(
        num_classes: usize,
        dim: usize,
        radius: f64,
        sigma: f64,
        train_per_class: usize,
        test_per_class: usize,
        seed: u64,
    ) -> Self {
        let means = (0..num_classes)
            .map(|c| {
                let a = std::f64::consts::TAU * c as f64 / num_classes as f64;
                let mut m = vec![0.0; dim];
                m[0] = radius * a.cos();
                if dim > 1 {
                    m[1] = radius * a.sin();
                }
                m
            })
            .collect();
        Self {
            num_classes,
            dim,
            means,
            sigma,
            train_per_class,
            test_per_class,
            seed,
        }
    }

    /// Five classes in the plane, radius 3, σ = 0.5, 400/200 samples per class.
    pub fn toy(seed: u64) -> Self {
        Self::circle(5, 2, 3.0, 0.5, 400, 200, seed)
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.dim == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("blob spec needs >= 2 classes and non-empty splits".into()));
        }
        if self.means.len() != self.num_classes || self.means.iter().any(|m| m.len() != self.dim) {
            return Err(Error::Config("blob means must be K vectors of length d".into()));
        }
        for i in 0..self.means.len() {
            for j in 0..i {
                if self.means[i] == self.means[j] {
                    return Err(Error::Config(format!("blob means {j} and {i} coincide")));
                }
            }
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("blob sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Draws train and test sets; labels are balanced and interleaved by class.
pub fn make_blobs(spec: &BlobSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let mut draw = |per_class: usize, split: Split| -> Result<Dataset> {
        let mut x = Vec::with_capacity(per_class * spec.num_classes * spec.dim);
        let mut y = Vec::with_capacity(per_class * spec.num_classes);
        for _ in 0..per_class {
            for (c, mean) in spec.means.iter().enumerate() {
                x.extend(mean.iter().map(|m| m + spec.sigma * rng.normal()));
                y.push(c);
            }
        }
        Dataset::new(Tensor::matrix(y.len(), spec.dim, x)?, y, spec.num_classes, split)
    };
    let mut train = draw(spec.train_per_class, Split::Train)?;
    let mut test = draw(spec.test_per_class, Split::Test)?;
    let stats = NormStats::fit(&train.x);
    train.stats = Some(stats.clone());
    test.stats = Some(stats);
    Ok((train, test))
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset,
            msg: format!("truncated header: file has {} bytes", bytes.len()),
        })
}

/// Parses an IDX image file (u8, `[N, rows, cols]`) into `N × rows·cols` in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Format {
            offset: 0,
            msg: format!("expected image magic 0x{IDX_IMAGES:08x}, found 0x{magic:08x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let d = rows * cols;
    if n == 0 || d == 0 {
        return Err(Error::Format {
            offset: 4,
            msg: format!("empty image set: dims [{n}, {rows}, {cols}]"),
        });
    }
    let payload = &bytes[16..];
    if payload.len() != n * d {
        return Err(Error::Format {
            offset: 16 + payload.len().min(n * d),
            msg: format!("expected {} pixel bytes, found {}", n * d, payload.len()),
        });
    }
    Tensor::matrix(n, d, payload.iter().map(|&b| f64::from(b) / 255.0).collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::Format {
            offset: 0,
            msg: format!("expected label magic 0x{IDX_LABELS:08x}, found 0x{magic:08x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Format {
            offset: 8 + payload.len().min(n),
            msg: format!("expected {n} label bytes, found {}", payload.len()),
        });
    }
    Ok(payload.iter().map(|&b| usize::from(b)).collect())
}

/// Loads an IDX image/label pair; the class count is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let x = parse_idx_images(&std::fs::read(images_path)?)?;
    let y = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if x.rows() != y.len() {
        return Err(Error::Format {
            offset: 4,
            msg: format!("{} images but {} labels", x.rows(), y.len()),
        });
    }
    let num_classes = y.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(x, y, num_classes.max(2), split)
}
