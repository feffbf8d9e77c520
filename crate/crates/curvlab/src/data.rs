//! Dataset loading (IDX), preprocessing, subset selection, batching, and the
//! two-point synthetic regression fixture.
//!
//! Inputs are stored as an `m₀ × N` matrix (one column per example);
//! image pixels are flattened row-major and scaled to `[0, 1]` at load time,
//! with mean/std normalization applied as a separate, explicit step whose
//! constants are computed from whatever split the caller designates as
//! training data.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::net::Targets;
use crate::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// An immutable example collection with its image geometry and the
/// normalization constants that produced it (if any).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    /// `m₀ × N`, one column per example.
    pub inputs: Array2<f64>,
    pub labels: Targets,
    /// Image geometry; non-image data uses `rows = m₀, cols = 1`.
    pub rows: usize,
    pub cols: usize,
    /// Mean/std applied by `normalize`, if it ran.
    pub normalization: Option<(f64, f64)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.ncols() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.nrows()
    }

    /// Smallest class count covering every label, for classification data.
    pub fn num_classes(&self) -> Option<usize> {
        match &self.labels {
            Targets::Classes(c) => c.iter().max().map(|&m| m + 1),
            Targets::Values(_) => None,
        }
    }

    fn validate(self) -> Result<Self> {
        if self.labels.len() != self.len() {
            return Err(Error::Data {
                message: format!(
                    "{}: {} labels for {} examples",
                    self.name,
                    self.labels.len(),
                    self.len()
                ),
            });
        }
        if self.inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data {
                message: format!("{}: non-finite input values", self.name),
            });
        }
        if self.rows * self.cols != self.input_dim() {
            return Err(Error::Data {
                message: format!(
                    "{}: geometry {}×{} does not match input dimension {}",
                    self.name,
                    self.rows,
                    self.cols,
                    self.input_dim()
                ),
            });
        }
        Ok(self)
    }
}

fn read_maybe_gzipped(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    let file = std::fs::File::open(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file).read_to_end(&mut raw)?;
    } else {
        std::io::BufReader::new(file).read_to_end(&mut raw)?;
    }
    Ok(raw)
}

struct IdxCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> IdxCursor<'a> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        if end > self.bytes.len() {
            return Err(Error::Data {
                message: format!("{}: truncated header", self.path.display()),
            });
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..end].try_into().expect("4 bytes"));
        self.pos = end;
        Ok(v)
    }

    fn payload(&self, expected: usize) -> Result<&'a [u8]> {
        let body = &self.bytes[self.pos..];
        if body.len() < expected {
            return Err(Error::Data {
                message: format!(
                    "{}: expected {expected} data bytes, found {}",
                    self.path.display(),
                    body.len()
                ),
            });
        }
        Ok(&body[..expected])
    }
}

/// Load an IDX image/label file pair (gzip-compressed when the extension is
/// `.gz`). Pixels come out in `[0, 1]`; no normalization is applied yet.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = read_maybe_gzipped(images_path)?;
    let mut cur = IdxCursor {
        bytes: &image_bytes,
        pos: 0,
        path: images_path,
    };
    let magic = cur.u32()?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Data {
            message: format!(
                "{}: bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}",
                images_path.display()
            ),
        });
    }
    let count = cur.u32()? as usize;
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    let pixels = cur.payload(count * rows * cols)?;

    let label_bytes = read_maybe_gzipped(labels_path)?;
    let mut cur = IdxCursor {
        bytes: &label_bytes,
        pos: 0,
        path: labels_path,
    };
    let magic = cur.u32()?;
    if magic != LABEL_MAGIC {
        return Err(Error::Data {
            message: format!(
                "{}: bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}",
                labels_path.display()
            ),
        });
    }
    let label_count = cur.u32()? as usize;
    if label_count != count {
        return Err(Error::Data {
            message: format!(
                "{} images but {} labels ({}, {})",
                count,
                label_count,
                images_path.display(),
                labels_path.display()
            ),
        });
    }
    let labels = cur.payload(count)?;

    let dim = rows * cols;
    let inputs = Array2::from_shape_fn((dim, count), |(p, j)| {
        f64::from(pixels[j * dim + p]) / 255.0
    });
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset {
        name,
        inputs,
        labels: Targets::Classes(labels.iter().map(|&b| b as usize).collect()),
        rows,
        cols,
        normalization: None,
    }
    .validate()
}

/// Scalar mean and standard deviation over every input entry.
pub fn normalization_stats(ds: &Dataset) -> (f64, f64) {
    let n = ds.inputs.len() as f64;
    let mean = ds.inputs.sum() / n;
    let var = ds.inputs.mapv(|v| (v - mean) * (v - mean)).sum() / n;
    (mean, var.sqrt())
}

/// Apply `(x − mean)/std` elementwise, recording the constants used.
pub fn normalize(ds: &Dataset, mean: f64, std: f64) -> Result<Dataset> {
    if !crate::positive(std) {
        return Err(Error::Invalid {
            message: format!("normalization std must be positive, got {std}"),
        });
    }
    Dataset {
        name: ds.name.clone(),
        inputs: ds.inputs.mapv(|v| (v - mean) / std),
        labels: ds.labels.clone(),
        rows: ds.rows,
        cols: ds.cols,
        normalization: Some((mean, std)),
    }
    .validate()
}

/// Draw `k` examples without replacement under `seed`.
pub fn subset(ds: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    if k > ds.len() {
        return Err(Error::Invalid {
            message: format!("subset of {k} from {} examples", ds.len()),
        });
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha12Rng::seed_from_u64(seed));
    order.truncate(k);
    Dataset {
        name: ds.name.clone(),
        inputs: ds.inputs.select(Axis(1), &order),
        labels: ds.labels.select(&order),
        rows: ds.rows,
        cols: ds.cols,
        normalization: ds.normalization,
    }
    .validate()
}

/// One minibatch: a column block and the matching labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Targets,
}

/// Single-epoch minibatch iterator. The visiting order is a seeded
/// permutation when `shuffle` is set; the final short batch is kept.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(Batch {
            inputs: self.ds.inputs.select(Axis(1), idx),
            targets: self.ds.labels.select(idx),
        })
    }
}

/// Iterate one epoch of minibatches. Callers derive a fresh `seed` per epoch
/// to get the paper's reshuffle-each-epoch behavior.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<Batches<'_>> {
    if batch_size == 0 || batch_size > ds.len() {
        return Err(Error::Invalid {
            message: format!(
                "batch size {batch_size} for a dataset of {} examples",
                ds.len()
            ),
        });
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha12Rng::seed_from_u64(seed));
    }
    Ok(Batches {
        ds,
        order,
        pos: 0,
        batch_size,
    })
}

/// Average-pool each image by a `p × p` window, shrinking both axes by `p`.
pub fn avg_pool(ds: &Dataset, p: usize) -> Result<Dataset> {
    if p == 0 || !ds.rows.is_multiple_of(p) || !ds.cols.is_multiple_of(p) {
        return Err(Error::Invalid {
            message: format!(
                "pool window {p} does not divide the {}×{} geometry",
                ds.rows, ds.cols
            ),
        });
    }
    if p == 1 {
        return Ok(ds.clone());
    }
    let (rows, cols) = (ds.rows / p, ds.cols / p);
    let dim = rows * cols;
    let mut inputs = Array2::zeros((dim, ds.len()));
    let norm = (p * p) as f64;
    for j in 0..ds.len() {
        let col = ds.inputs.column(j);
        for r in 0..rows {
            for c in 0..cols {
                let mut acc = 0.0;
                for dr in 0..p {
                    for dc in 0..p {
                        acc += col[(r * p + dr) * ds.cols + (c * p + dc)];
                    }
                }
                inputs[[r * cols + c, j]] = acc / norm;
            }
        }
    }
    Dataset {
        name: ds.name.clone(),
        inputs,
        labels: ds.labels.clone(),
        rows,
        cols,
        normalization: ds.normalization,
    }
    .validate()
}

/// The two-point linear-regression fixture: inputs `(3,1)` and `(1,0)`,
/// targets `1` and `−1`, squared loss, meant for a zero-initialized 1×2
/// layer.
pub fn synth_toy() -> Dataset {
    Dataset {
        name: "synth-toy".into(),
        inputs: array![[3.0, 1.0], [1.0, 0.0]],
        labels: Targets::Values(array![[1.0, -1.0]]),
        rows: 2,
        cols: 1,
        normalization: None,
    }
}
