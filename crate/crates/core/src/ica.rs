//! Linear ICA: centering, PCA whitening and parallel fixed-point FastICA.
//!
//! The fitted unmixing matrix maps `C`-dimensional features to `M`
//! independent coordinates: `transform(f) = (f - mean) * U` with
//! `U = (rotation * whitening)^T`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurepack::{read_pack, write_pack, FeatureMatrix};
use crate::linalg::{self, Mat, Vector};

/// Smallest eigenvalue accepted among the retained components.
pub const MIN_EIGENVALUE: f64 = 1e-10;

/// Contrast function used by the fixed-point update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Nonlinearity {
    /// `G(u) = log cosh(u)`, `g = tanh`, `g' = 1 - tanh^2`.
    #[default]
    LogCosh,
    /// `G(u) = u^4 / 4`, `g = u^3`, `g' = 3u^2`.
    Cube,
}

impl Nonlinearity {
    fn eval(self, u: f64) -> (f64, f64) {
        match self {
            Nonlinearity::LogCosh => {
                let t = u.tanh();
                (t, 1.0 - t * t)
            }
            Nonlinearity::Cube => (u * u * u, 3.0 * u * u),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcaConfig {
    pub n_components: usize,
    pub nonlinearity: Nonlinearity,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for IcaConfig {
    fn default() -> Self {
        Self {
            n_components: 8,
            nonlinearity: Nonlinearity::LogCosh,
            tolerance: 1e-4,
            max_iterations: 200,
            seed: 0,
        }
    }
}

impl IcaConfig {
    pub fn with_components(n_components: usize) -> Self {
        Self {
            n_components,
            ..Self::default()
        }
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if self.n_components == 0 || self.n_components > input_dim {
            return Err(Error::InvalidConfig(format!(
                "n_components must be in 1..={input_dim}, got {}",
                self.n_components
            )));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::InvalidConfig("tolerance must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Centering vector and whitening map learned from training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitening {
    pub mean: Vector,
    /// `M x C`; rows are top eigenvectors scaled by `1/sqrt(eigenvalue)`.
    pub matrix: Mat,
    pub eigenvalues: Vector,
}

impl Whitening {
    pub fn apply(&self, x: &Mat) -> Mat {
        linalg::center_rows(x, &self.mean) * self.matrix.transpose()
    }
}

/// Fits PCA whitening to `M` components on the rows of `x`.
pub fn fit_whitening(x: &Mat, n_components: usize) -> Result<Whitening> {
    let (n, c) = x.shape();
    if n_components == 0 || n_components > c {
        return Err(Error::InvalidConfig(format!(
            "n_components must be in 1..={c}, got {n_components}"
        )));
    }
    if n <= n_components {
        return Err(Error::InvalidConfig(format!(
            "need more than {n_components} samples to whiten, got {n}"
        )));
    }
    let mean = linalg::column_means(x);
    let centered = linalg::center_rows(x, &mean);
    let cov = centered.tr_mul(&centered) / n as f64;
    let (values, vectors) = linalg::sorted_symmetric_eigen(&cov);

    let mut matrix = Mat::zeros(n_components, c);
    for k in 0..n_components {
        let ev = values[k];
        if ev.is_nan() || ev < MIN_EIGENVALUE {
            return Err(Error::RankDeficient {
                component: k,
                eigenvalue: ev,
            });
        }
        let row = vectors.column(k).transpose() / ev.sqrt();
        matrix.set_row(k, &row);
    }
    Ok(Whitening {
        mean,
        matrix,
        eigenvalues: values.rows(0, n_components).into_owned(),
    })
}

/// Symmetric orthogonalization `(W W^T)^{-1/2} W`.
pub fn symmetric_decorrelate(w: &Mat) -> Result<Mat> {
    let gram = w * w.transpose();
    let (values, vectors) = linalg::sorted_symmetric_eigen(&gram);
    let smallest = values.iter().copied().fold(f64::INFINITY, f64::min);
    let largest = values.iter().copied().fold(0.0_f64, f64::max);
    if smallest.is_nan() || smallest <= largest * 1e-14 || smallest <= 0.0 {
        return Err(Error::Singular(smallest));
    }
    let inv_sqrt = Vector::from_iterator(values.len(), values.iter().map(|v| 1.0 / v.sqrt()));
    let scaled = &vectors * Mat::from_diagonal(&inv_sqrt);
    Ok(scaled * vectors.transpose() * w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FastIcaFit {
    /// `M x M` orthogonal rotation of the whitened space.
    pub rotation: Mat,
    pub converged: bool,
    pub iterations: usize,
}

/// Parallel fixed-point FastICA on whitened rows (`n x M`).
///
/// Non-convergence is reported through [`FastIcaFit::converged`], not as an
/// error.
pub fn fastica_fit(whitened: &Mat, config: &IcaConfig) -> Result<FastIcaFit> {
    let (n, m) = whitened.shape();
    config.validate(m)?;
    if config.n_components != m {
        return Err(Error::DimensionMismatch(format!(
            "whitened data has {m} columns, config asks for {}",
            config.n_components
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Mat::from_fn(m, m, |_, _| StandardNormal.sample(&mut rng));
    let mut w = symmetric_decorrelate(&init)?;

    let inv_n = 1.0 / n as f64;
    for iteration in 1..=config.max_iterations {
        // Projections of every sample on every current direction.
        let mut g = whitened * w.transpose();
        let mut g_prime_mean = Vector::zeros(m);
        for (j, mut col) in g.column_iter_mut().enumerate() {
            let mut acc = 0.0;
            for v in col.iter_mut() {
                let (gv, dv) = config.nonlinearity.eval(*v);
                *v = gv;
                acc += dv;
            }
            g_prime_mean[j] = acc * inv_n;
        }
        let mut update = g.tr_mul(whitened) * inv_n;
        for i in 0..m {
            let shrink = w.row(i) * g_prime_mean[i];
            let mut row = update.row_mut(i);
            row -= shrink;
        }
        let w_new = symmetric_decorrelate(&update)?;

        let change = (0..m)
            .map(|i| (1.0 - w_new.row(i).dot(&w.row(i)).abs()).abs())
            .fold(0.0, f64::max);
        w = w_new;
        if change < config.tolerance {
            return Ok(FastIcaFit {
                rotation: w,
                converged: true,
                iterations: iteration,
            });
        }
    }
    Ok(FastIcaFit {
        rotation: w,
        converged: false,
        iterations: config.max_iterations,
    })
}

/// A fitted unmixing model.
#[derive(Debug, Clone, PartialEq)]
pub struct IcaModel {
    pub mean: Vector,
    /// `M x C`.
    pub whitening: Mat,
    /// `M x M`, orthogonal.
    pub rotation: Mat,
    pub config: IcaConfig,
    pub converged: bool,
    pub iterations: usize,
    /// Whether [`IcaModel::transform`] L2-normalizes its output rows.
    pub normalize_output: bool,
}

impl IcaModel {
    /// Centers, whitens, then runs FastICA on the rows of `x`.
    pub fn fit(x: &Mat, config: &IcaConfig) -> Result<Self> {
        config.validate(x.ncols())?;
        let whitening = fit_whitening(x, config.n_components)?;
        let whitened = whitening.apply(x);
        let fit = fastica_fit(&whitened, config)?;
        Ok(Self {
            mean: whitening.mean,
            whitening: whitening.matrix,
            rotation: fit.rotation,
            config: config.clone(),
            converged: fit.converged,
            iterations: fit.iterations,
            normalize_output: true,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.rotation.nrows()
    }

    /// `U` (`C x M`).
    pub fn unmixing_matrix(&self) -> Mat {
        (&self.rotation * &self.whitening).transpose()
    }

    /// `(f - mean) * U` for every row, without normalization.
    pub fn project(&self, features: &Mat) -> Result<Mat> {
        if features.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "features have {} columns, model expects {}",
                features.ncols(),
                self.input_dim()
            )));
        }
        Ok(linalg::center_rows(features, &self.mean) * self.unmixing_matrix())
    }

    /// Projected rows, L2-normalized when `normalize_output` is set.
    pub fn transform(&self, features: &Mat) -> Result<Mat> {
        let mut out = self.project(features)?;
        if self.normalize_output {
            linalg::normalize_rows_mut(&mut out)?;
        }
        Ok(out)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_pack(
            &FeatureMatrix::from_mat(&Mat::from_row_slice(
                1,
                self.mean.len(),
                self.mean.as_slice(),
            ))?,
            dir.join("mean.ccaf"),
        )?;
        write_pack(
            &FeatureMatrix::from_mat(&self.whitening)?,
            dir.join("whitening.ccaf"),
        )?;
        write_pack(
            &FeatureMatrix::from_mat(&self.rotation)?,
            dir.join("rotation.ccaf"),
        )?;
        let sidecar = IcaSidecar {
            config: self.config.clone(),
            converged: self.converged,
            iterations: self.iterations,
            normalize_output: self.normalize_output,
        };
        let path = dir.join("ica.json");
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("ica.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: IcaSidecar = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let mean = read_pack(dir.join("mean.ccaf"))?.to_mat();
        let whitening = read_pack(dir.join("whitening.ccaf"))?.to_mat();
        let rotation = read_pack(dir.join("rotation.ccaf"))?.to_mat();
        if mean.nrows() != 1
            || whitening.ncols() != mean.ncols()
            || rotation.nrows() != whitening.nrows()
            || !rotation.is_square()
        {
            return Err(Error::DimensionMismatch(format!(
                "inconsistent ICA packs: mean {:?}, whitening {:?}, rotation {:?}",
                mean.shape(),
                whitening.shape(),
                rotation.shape()
            )));
        }
        Ok(Self {
            mean: mean.row(0).transpose(),
            whitening,
            rotation,
            config: sidecar.config,
            converged: sidecar.converged,
            iterations: sidecar.iterations,
            normalize_output: sidecar.normalize_output,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IcaSidecar {
    config: IcaConfig,
    converged: bool,
    iterations: usize,
    normalize_output: bool,
}

/// Feature space used for the cache path: ICA-disentangled or the raw
/// (normalized) encoder features.
#[derive(Debug, Clone, PartialEq)]
pub enum Disentangler {
    Ica(IcaModel),
    Identity,
}

impl Disentangler {
    pub fn apply(&self, features: &Mat) -> Result<Mat> {
        match self {
            Disentangler::Ica(model) => model.transform(features),
            Disentangler::Identity => {
                let mut out = features.clone();
                linalg::normalize_rows_mut(&mut out)?;
                Ok(out)
            }
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            Disentangler::Ica(model) => model.n_components(),
            Disentangler::Identity => input_dim,
        }
    }

    pub fn check_input(&self, input_dim: usize) -> Result<()> {
        match self {
            Disentangler::Ica(model) if model.input_dim() != input_dim => {
                Err(Error::DimensionMismatch(format!(
                    "ICA model expects {} input columns, task has {input_dim}",
                    model.input_dim()
                )))
            }
            _ => Ok(()),
        }
    }
}
