//! The `CCAF` binary pack format, few-shot task manifests, and label helpers.
//!
//! A pack is a little-endian header followed by a row-major `f32` payload:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `b"CCAF"`                |
//! | 4      | 4    | format version (`u32`, = 1)    |
//! | 8      | 8    | rows (`u64`)                   |
//! | 16     | 8    | cols (`u64`)                   |
//! | 24     | 4    | dtype code (`u32`, 1 = `f32`)  |
//! | 28     | 4·rows·cols | payload                 |
//!
//! Nothing follows the payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

pub const MAGIC: [u8; 4] = *b"CCAF";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;
pub const HEADER_LEN: usize = 28;

/// Dense row-major matrix of `f32` embedding coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Narrows an `f64` matrix to pack precision.
    pub fn from_mat(m: &Mat) -> Result<Self> {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter().map(|&v| v as f32));
        }
        Self::new(m.nrows(), m.ncols(), data)
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_fn(self.rows, self.cols, |i, j| f64::from(self.get(i, j)))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// New matrix made of the selected rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Per-sample class indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelVector(pub Vec<usize>);

impl LabelVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check_range(&self, n_classes: usize) -> Result<()> {
        match self.0.iter().position(|&l| l >= n_classes) {
            Some(index) => Err(Error::LabelOutOfRange {
                index,
                label: self.0[index],
                n_classes,
            }),
            None => Ok(()),
        }
    }

    pub fn counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for &l in &self.0 {
            counts[l] += 1;
        }
        counts
    }

    /// Labels as a one-column pack.
    pub fn to_pack(&self) -> FeatureMatrix {
        FeatureMatrix {
            rows: self.0.len(),
            cols: 1,
            data: self.0.iter().map(|&l| l as f32).collect(),
        }
    }

    pub fn from_pack(pack: &FeatureMatrix) -> Result<Self> {
        if pack.cols() != 1 {
            return Err(Error::BadLabels(format!(
                "pack has {} columns",
                pack.cols()
            )));
        }
        pack.data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::BadLabels(format!("value {v} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()
            .map(LabelVector)
    }
}

/// Serializes a matrix into pack bytes.
pub fn encode_pack(matrix: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * matrix.data.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(matrix.rows as u64).to_le_bytes());
    out.extend_from_slice(&(matrix.cols as u64).to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for v in &matrix.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses pack bytes, validating header, length and finiteness.
pub fn decode_pack(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());

    let version = u32_at(4);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let rows = u64_at(8);
    let cols = u64_at(16);
    let dtype = u32_at(24);
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }

    let payload = &bytes[HEADER_LEN..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::DimensionMismatch(format!("{rows}x{cols} overflows")))?;
    let found = payload.len() as u64;
    if found < expected {
        return Err(Error::Truncated { expected, found });
    }
    if found > expected {
        return Err(Error::TrailingBytes(found - expected));
    }

    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::new(rows as usize, cols as usize, data)
}

pub fn write_pack(matrix: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pack(matrix)).map_err(|e| Error::io(path, e))
}

pub fn read_pack(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pack(&bytes)
}

pub fn write_labels(labels: &LabelVector, path: impl AsRef<Path>) -> Result<()> {
    write_pack(&labels.to_pack(), path)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVector> {
    LabelVector::from_pack(&read_pack(path)?)
}

/// `N x len(labels)` one-hot matrix; column `j` has its 1 at row `labels[j]`.
pub fn one_hot(labels: &LabelVector, n_classes: usize) -> Result<FeatureMatrix> {
    labels.check_range(n_classes)?;
    let cols = labels.len();
    let mut out = FeatureMatrix::zeros(n_classes, cols);
    for (j, &l) in labels.0.iter().enumerate() {
        out.data[l * cols + j] = 1.0;
    }
    Ok(out)
}

/// Scales every row to unit norm. Zero rows are an error.
pub fn l2_normalize_rows(matrix: &FeatureMatrix) -> Result<FeatureMatrix> {
    let mut out = matrix.clone();
    for i in 0..out.rows {
        let row = &mut out.data[i * out.cols..(i + 1) * out.cols];
        let norm = row
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroRow(i));
        }
        for v in row.iter_mut() {
            *v = (f64::from(*v) / norm) as f32;
        }
    }
    Ok(out)
}

/// On-disk task description. Pack paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_classes: usize,
    pub shots: usize,
    pub cache_features: PathBuf,
    pub cache_labels: PathBuf,
    pub text_init: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_features: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_features: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    pub class_names: Vec<String>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Labelled feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub features: FeatureMatrix,
    pub labels: LabelVector,
}

impl Split {
    pub fn empty(cols: usize) -> Self {
        Self {
            features: FeatureMatrix::zeros(0, cols),
            labels: LabelVector::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A K-shot N-class problem with its cache, text initialization and
/// evaluation splits. Feature rows are unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotTask {
    pub n_classes: usize,
    pub shots: usize,
    pub cache: Split,
    pub text_init: FeatureMatrix,
    pub val: Split,
    pub test: Split,
    pub class_names: Vec<String>,
}

impl FewShotTask {
    pub fn dim(&self) -> usize {
        self.text_init.cols()
    }

    /// Checks shapes, label ranges and the per-class shot count.
    pub fn validate(&self) -> Result<()> {
        let (n, k, c) = (self.n_classes, self.shots, self.dim());
        if n == 0 || k == 0 {
            return Err(Error::InvalidConfig(
                "n_classes and shots must be positive".into(),
            ));
        }
        if self.class_names.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} class names for {n} classes",
                self.class_names.len()
            )));
        }
        if self.text_init.rows() != n {
            return Err(Error::DimensionMismatch(format!(
                "text_init has {} rows for {n} classes",
                self.text_init.rows()
            )));
        }
        if self.cache.features.rows() != n * k {
            return Err(Error::ShotCount(format!(
                "cache has {} rows, expected N*K = {}",
                self.cache.features.rows(),
                n * k
            )));
        }
        for (name, split) in [
            ("cache", &self.cache),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            if split.features.cols() != c {
                return Err(Error::DimensionMismatch(format!(
                    "{name} features have {} columns, text_init has {c}",
                    split.features.cols()
                )));
            }
            if split.features.rows() != split.labels.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{name} has {} feature rows but {} labels",
                    split.features.rows(),
                    split.labels.len()
                )));
            }
            split.labels.check_range(n)?;
        }
        let counts = self.cache.labels.counts(n);
        if let Some(class) = counts.iter().position(|&cnt| cnt != k) {
            return Err(Error::ShotCount(format!(
                "class {class} has {} cache samples, expected {k}",
                counts[class]
            )));
        }
        Ok(())
    }
}

/// Loads a task and re-normalizes every feature row to unit norm.
pub fn load_task(manifest_path: impl AsRef<Path>) -> Result<FewShotTask> {
    load_task_with(manifest_path, true)
}

pub fn load_task_with(manifest_path: impl AsRef<Path>, normalize: bool) -> Result<FewShotTask> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let features = |p: &Path| -> Result<FeatureMatrix> {
        let m = read_pack(base.join(p))?;
        if normalize {
            l2_normalize_rows(&m)
        } else {
            Ok(m)
        }
    };
    let split = |f: &Option<PathBuf>, l: &Option<PathBuf>, cols: usize| -> Result<Split> {
        match (f, l) {
            (Some(f), Some(l)) => Ok(Split {
                features: features(f)?,
                labels: read_labels(base.join(l))?,
            }),
            (None, None) => Ok(Split::empty(cols)),
            _ => Err(Error::InvalidConfig(
                "split needs both features and labels".into(),
            )),
        }
    };

    let text_init = features(&manifest.text_init)?;
    let cols = text_init.cols();
    let task = FewShotTask {
        n_classes: manifest.n_classes,
        shots: manifest.shots,
        cache: Split {
            features: features(&manifest.cache_features)?,
            labels: read_labels(base.join(&manifest.cache_labels))?,
        },
        text_init,
        val: split(&manifest.val_features, &manifest.val_labels, cols)?,
        test: split(&manifest.test_features, &manifest.test_labels, cols)?,
        class_names: manifest.class_names,
    };
    task.validate()?;
    Ok(task)
}

/// Same as [`l2_normalize_rows`] but in `f64`.
pub fn normalized_mat(matrix: &FeatureMatrix) -> Result<Mat> {
    let mut m = matrix.to_mat();
    linalg::normalize_rows_mut(&mut m)?;
    Ok(m)
}
