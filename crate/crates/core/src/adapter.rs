//! Disentangled cache model: keys, one-hot values, the trainable square
//! adapter applied to the keys, and the exponential affinity kernel.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurepack::{one_hot, read_pack, write_pack, FeatureMatrix, FewShotTask};
use crate::ica::Disentangler;
use crate::linalg::Mat;

pub const DEFAULT_BETA: f64 = 5.5;
pub const DEFAULT_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CacheModel {
    /// `NK x M`, disentangled and unit norm.
    pub keys: Mat,
    /// `N x NK`, one-hot columns.
    pub values: Mat,
    /// `M x M`, identity at build.
    pub adapter: Mat,
    pub beta: f64,
    pub alpha: f64,
}

impl CacheModel {
    pub fn n_classes(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_entries(&self) -> usize {
        self.keys.nrows()
    }

    pub fn dim(&self) -> usize {
        self.keys.ncols()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_pack(
            &FeatureMatrix::from_mat(&self.keys)?,
            dir.join("cache_keys.ccaf"),
        )?;
        write_pack(
            &FeatureMatrix::from_mat(&self.values)?,
            dir.join("cache_values.ccaf"),
        )?;
        write_pack(
            &FeatureMatrix::from_mat(&self.adapter)?,
            dir.join("cache_adapter.ccaf"),
        )?;
        let path = dir.join("cache.json");
        let sidecar = CacheSidecar {
            alpha: self.alpha,
            beta: self.beta,
        };
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("cache.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: CacheSidecar =
            serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let keys = read_pack(dir.join("cache_keys.ccaf"))?.to_mat();
        let values = read_pack(dir.join("cache_values.ccaf"))?.to_mat();
        let adapter = read_pack(dir.join("cache_adapter.ccaf"))?.to_mat();
        if values.ncols() != keys.nrows() || adapter.shape() != (keys.ncols(), keys.ncols()) {
            return Err(Error::DimensionMismatch(format!(
                "inconsistent cache packs: keys {:?}, values {:?}, adapter {:?}",
                keys.shape(),
                values.shape(),
                adapter.shape()
            )));
        }
        Ok(Self {
            keys,
            values,
            adapter,
            beta: sidecar.beta,
            alpha: sidecar.alpha,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheSidecar {
    alpha: f64,
    beta: f64,
}

/// Disentangles the cache features and pairs them with one-hot labels.
pub fn build_cache(task: &FewShotTask, disentangler: &Disentangler) -> Result<CacheModel> {
    disentangler.check_input(task.dim())?;
    let keys = disentangler.apply(&task.cache.features.to_mat())?;
    let values = one_hot(&task.cache.labels, task.n_classes)?.to_mat();
    let m = keys.ncols();
    Ok(CacheModel {
        keys,
        values,
        adapter: Mat::identity(m, m),
        beta: DEFAULT_BETA,
        alpha: DEFAULT_ALPHA,
    })
}

/// `keys * W_c`. Not re-normalized.
pub fn adapted_keys(cache: &CacheModel) -> Mat {
    &cache.keys * &cache.adapter
}

/// `exp(-beta * (1 - q k^T))` against explicit keys.
pub fn affinity_with_keys(query_d: &Mat, keys: &Mat, beta: f64) -> Result<Mat> {
    if query_d.ncols() != keys.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "queries have {} columns, keys have {}",
            query_d.ncols(),
            keys.ncols()
        )));
    }
    let mut s = query_d * keys.transpose();
    s.apply(|v| *v = (-beta * (1.0 - *v)).exp());
    Ok(s)
}

/// Affinities `B x NK` of disentangled queries to the adapted keys.
pub fn affinity(query_d: &Mat, cache: &CacheModel) -> Result<Mat> {
    affinity_with_keys(query_d, &adapted_keys(cache), cache.beta)
}

/// `S * values^T`: per-class sums of affinities.
pub fn cache_logits(affinities: &Mat, cache: &CacheModel) -> Result<Mat> {
    if affinities.ncols() != cache.n_entries() {
        return Err(Error::DimensionMismatch(format!(
            "affinities have {} columns, cache has {} entries",
            affinities.ncols(),
            cache.n_entries()
        )));
    }
    Ok(affinities * cache.values.transpose())
}

/// `alpha * l1 + l2`.
pub fn combine_logits(l1: &Mat, l2: &Mat, alpha: f64) -> Result<Mat> {
    if l1.shape() != l2.shape() {
        return Err(Error::DimensionMismatch(format!(
            "l1 is {:?}, l2 is {:?}",
            l1.shape(),
            l2.shape()
        )));
    }
    Ok(l1 * alpha + l2)
}
