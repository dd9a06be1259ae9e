//! Synthetic linear latent-variable data for identifiability checks.
//!
//! Samples `x = A z + c` with independent (optionally rescaled) latents `z`, a
//! column-orthonormal mixing `A` and offset `c`; labels come from a sparse
//! linear score of a few latents cut at fixed thresholds.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurepack::{write_labels, write_pack, FeatureMatrix, LabelVector, Manifest};
use crate::ica::symmetric_decorrelate;
use crate::linalg::{self, Mat, Vector};

/// Unit-variance latent distributions, rescaled per latent by `latent_scales`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentDist {
    Laplace,
    Uniform,
    Gaussian,
}

impl LatentDist {
    fn sample(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            LatentDist::Laplace => {
                // Inverse CDF with scale 1/sqrt(2).
                let u: f64 = rng.random::<f64>() - 0.5;
                -std::f64::consts::FRAC_1_SQRT_2
                    * u.signum()
                    * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
            }
            LatentDist::Uniform => 3f64.sqrt() * (2.0 * rng.random::<f64>() - 1.0),
            LatentDist::Gaussian => StandardNormal.sample(rng),
        }
    }
}

/// Class `k` is the number of thresholds strictly below
/// `sum_i weights[i] * z[latents[i]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    pub latents: Vec<usize>,
    pub weights: Vec<f64>,
    pub thresholds: Vec<f64>,
}

impl LabelRule {
    pub fn n_classes(&self) -> usize {
        self.thresholds.len() + 1
    }

    pub fn score(&self, z: &[f64]) -> f64 {
        self.latents
            .iter()
            .zip(&self.weights)
            .map(|(&i, w)| w * z[i])
            .sum()
    }

    pub fn label(&self, z: &[f64]) -> usize {
        let s = self.score(z);
        self.thresholds.iter().filter(|&&t| t < s).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeSpec {
    pub n_latents: usize,
    pub ambient_dim: usize,
    /// One entry per latent, or a single entry applied to all.
    pub latent_dists: Vec<LatentDist>,
    /// Per-latent standard deviations; all ones when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_scales: Option<Vec<f64>>,
    /// Explicit `C x M` mixing rows; drawn at random when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixing: Option<Vec<Vec<f64>>>,
    /// Explicit offset; otherwise a random direction of length `offset_norm`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<Vec<f64>>,
    #[serde(default)]
    pub offset_norm: f64,
    pub label_rule: LabelRule,
    /// Project samples onto the unit sphere.
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub seed: u64,
}

impl GenerativeSpec {
    pub fn laplace(n_latents: usize, ambient_dim: usize, label_rule: LabelRule, seed: u64) -> Self {
        Self {
            n_latents,
            ambient_dim,
            latent_dists: vec![LatentDist::Laplace],
            latent_scales: None,
            mixing: None,
            offset: None,
            offset_norm: 0.0,
            label_rule,
            normalize: false,
            seed,
        }
    }
}

/// A validated spec with its mixing and offset materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeModel {
    pub spec: GenerativeSpec,
    /// `C x M`, orthonormal columns.
    pub mixing: Mat,
    pub offset: Vector,
    dists: Vec<LatentDist>,
    scales: Vec<f64>,
}

impl GenerativeModel {
    pub fn new(spec: GenerativeSpec) -> Result<Self> {
        let (m, c) = (spec.n_latents, spec.ambient_dim);
        if m == 0 || m > c {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= n_latents <= ambient_dim, got {m} and {c}"
            )));
        }
        let dists = match spec.latent_dists.len() {
            1 => vec![spec.latent_dists[0]; m],
            len if len == m => spec.latent_dists.clone(),
            len => {
                return Err(Error::InvalidConfig(format!(
                    "{len} latent distributions for {m} latents"
                )))
            }
        };

        let scales = match &spec.latent_scales {
            None => vec![1.0; m],
            Some(s) if s.len() == m && s.iter().all(|&v| v > 0.0 && v.is_finite()) => s.clone(),
            Some(_) => {
                return Err(Error::InvalidConfig(format!(
                    "latent_scales needs {m} positive entries"
                )))
            }
        };

        let rule = &spec.label_rule;
        if rule.latents.len() != rule.weights.len() || rule.latents.is_empty() {
            return Err(Error::InvalidConfig(
                "label rule needs one weight per latent index".into(),
            ));
        }
        if let Some(&bad) = rule.latents.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidConfig(format!(
                "label rule uses latent {bad}, only {m} latents exist"
            )));
        }
        let mut used = rule.latents.clone();
        used.sort_unstable();
        used.dedup();
        if used.len() != rule.latents.len() {
            return Err(Error::InvalidConfig("label rule repeats a latent".into()));
        }
        if used.len() > m.div_ceil(2) {
            return Err(Error::InvalidConfig(format!(
                "label rule touches {} latents, at most {} allowed",
                used.len(),
                m.div_ceil(2)
            )));
        }
        if rule.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "thresholds must be strictly ascending".into(),
            ));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6d69_7869_6e67);
        let mixing = match &spec.mixing {
            Some(rows) => {
                if rows.len() != c || rows.iter().any(|r| r.len() != m) {
                    return Err(Error::DimensionMismatch(format!("mixing must be {c}x{m}")));
                }
                let a = Mat::from_fn(c, m, |i, j| rows[i][j]);
                let err = linalg::max_abs_diff(&a.tr_mul(&a), &Mat::identity(m, m));
                if err > 1e-6 {
                    return Err(Error::InvalidConfig(format!(
                        "mixing columns are not orthonormal (error {err:e})"
                    )));
                }
                a
            }
            None => {
                let g = Mat::from_fn(m, c, |_, _| StandardNormal.sample(&mut rng));
                symmetric_decorrelate(&g)?.transpose()
            }
        };
        let offset = match &spec.offset {
            Some(v) if v.len() == c => Vector::from_column_slice(v),
            Some(v) => {
                return Err(Error::DimensionMismatch(format!(
                    "offset has {} entries, ambient_dim is {c}",
                    v.len()
                )))
            }
            None if spec.offset_norm > 0.0 => {
                let v = Vector::from_fn(c, |_, _| StandardNormal.sample(&mut rng));
                v.normalize() * spec.offset_norm
            }
            None => Vector::zeros(c),
        };
        Ok(Self {
            spec,
            mixing,
            offset,
            dists,
            scales,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.spec.label_rule.n_classes()
    }

    /// Draws `n` samples from `rng`.
    pub fn sample_with(&self, n: usize, rng: &mut ChaCha8Rng) -> Sample {
        let m = self.spec.n_latents;
        let mut z = Mat::zeros(n, m);
        let mut labels = Vec::with_capacity(n);
        let mut row = vec![0.0; m];
        for i in 0..n {
            for (j, d) in self.dists.iter().enumerate() {
                row[j] = self.scales[j] * d.sample(rng);
                z[(i, j)] = row[j];
            }
            labels.push(self.spec.label_rule.label(&row));
        }
        let mut x = &z * self.mixing.transpose();
        for mut r in x.row_iter_mut() {
            r += self.offset.transpose();
        }
        if self.spec.normalize {
            for mut r in x.row_iter_mut() {
                let norm = r.norm();
                if norm > 0.0 {
                    r.unscale_mut(norm);
                }
            }
        }
        Sample {
            latents: z,
            features: x,
            labels,
        }
    }

    /// `n` samples from the spec's own seed.
    pub fn sample(&self, n: usize) -> Sample {
        self.sample_with(n, &mut ChaCha8Rng::seed_from_u64(self.spec.seed))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `n x M_true`.
    pub latents: Mat,
    /// `n x C`.
    pub features: Mat,
    pub labels: Vec<usize>,
}

pub fn sample(spec: &GenerativeSpec, n: usize) -> Result<Sample> {
    Ok(GenerativeModel::new(spec.clone())?.sample(n))
}

fn pearson_abs(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    (cov / (va * vb).sqrt()).abs()
}

/// `|corr|` between every true column (rows) and recovered column (cols).
pub fn abs_correlation_matrix(recovered: &Mat, truth: &Mat) -> Result<Mat> {
    if recovered.nrows() != truth.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} recovered rows vs {} true rows",
            recovered.nrows(),
            truth.nrows()
        )));
    }
    if truth.nrows() < 2 {
        return Err(Error::InvalidConfig("need at least two samples".into()));
    }
    let cols = |m: &Mat, offset: usize| -> Result<Vec<Vec<f64>>> {
        (0..m.ncols())
            .map(|j| {
                let col: Vec<f64> = m.column(j).iter().copied().collect();
                let first = col[0];
                if col.iter().all(|&v| v == first) {
                    Err(Error::ConstantColumn(offset + j))
                } else {
                    Ok(col)
                }
            })
            .collect()
    };
    let t = cols(truth, 0)?;
    let r = cols(recovered, 0)?;
    Ok(Mat::from_fn(t.len(), r.len(), |i, j| {
        pearson_abs(&t[i], &r[j])
    }))
}

/// Minimum-cost assignment of every row to a distinct column
/// (`rows <= cols`). Returns the column chosen for each row.
pub fn min_cost_assignment(cost: &Mat) -> Vec<usize> {
    let (n, m) = cost.shape();
    assert!(n <= m, "assignment needs rows <= cols");
    // Shortest augmenting path with potentials; 1-based with a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Mean matched `|corr|` under the best one-to-one pairing of true and
/// recovered coordinates; invariant to permutation, sign and scale.
pub fn recovery_score(recovered: &Mat, truth: &Mat) -> Result<f64> {
    let corr = abs_correlation_matrix(recovered, truth)?;
    let (t, r) = corr.shape();
    let total: f64 = if t <= r {
        let assignment = min_cost_assignment(&(-&corr));
        assignment
            .iter()
            .enumerate()
            .map(|(i, &j)| corr[(i, j)])
            .sum()
    } else {
        let tr = corr.transpose();
        let assignment = min_cost_assignment(&(-&tr));
        assignment
            .iter()
            .enumerate()
            .map(|(i, &j)| tr[(i, j)])
            .sum()
    };
    Ok(total / t as f64)
}

/// Amari index of a square matrix: zero iff it is a scaled permutation.
pub fn amari_index(p: &Mat) -> Result<f64> {
    if !p.is_square() || p.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "amari index needs a non-empty square matrix, got {:?}",
            p.shape()
        )));
    }
    let m = p.nrows();
    let a = p.abs();
    let mut total = 0.0;
    for i in 0..m {
        let row = a.row(i);
        let max = row.max();
        if max == 0.0 {
            return Err(Error::InvalidConfig(format!("row {i} is all zero")));
        }
        total += row.sum() / max - 1.0;
    }
    for j in 0..m {
        let col = a.column(j);
        let max = col.max();
        if max == 0.0 {
            return Err(Error::InvalidConfig(format!("column {j} is all zero")));
        }
        total += col.sum() / max - 1.0;
    }
    Ok(total / (2.0 * m as f64))
}

/// A complete few-shot task drawn from a generative model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub generative: GenerativeSpec,
    pub shots: usize,
    /// Validation samples per class.
    pub val_per_class: usize,
    /// Test samples per class.
    pub test_per_class: usize,
    /// Held-out samples per class averaged into the text initialization.
    #[serde(default = "default_text_per_class")]
    pub text_per_class: usize,
    /// Unlabelled samples written as the ICA source pack.
    #[serde(default = "default_source_samples")]
    pub source_samples: usize,
}

fn default_text_per_class() -> usize {
    32
}

fn default_source_samples() -> usize {
    10_000
}

/// Paths written by [`write_task`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub source: PathBuf,
}

/// Draws per-class buckets by rejection until each holds `per_class`
/// samples.
fn draw_balanced(
    model: &GenerativeModel,
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let n = model.n_classes();
    let mut buckets: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n];
    let budget = 1000 * per_class * n + 10_000;
    let mut drawn = 0;
    while buckets.iter().any(|b| b.len() < per_class) {
        if drawn >= budget {
            let short = buckets.iter().position(|b| b.len() < per_class).unwrap();
            return Err(Error::InvalidConfig(format!(
                "class {short} is too rare under the label rule"
            )));
        }
        let s = model.sample_with(256, rng);
        drawn += 256;
        for (i, &l) in s.labels.iter().enumerate() {
            if buckets[l].len() < per_class {
                buckets[l].push(s.features.row(i).iter().copied().collect());
            }
        }
    }
    Ok(buckets)
}

fn stack(rows: &[Vec<f64>], cols: usize) -> Result<FeatureMatrix> {
    let m = Mat::from_fn(rows.len(), cols, |i, j| rows[i][j]);
    FeatureMatrix::from_mat(&m)
}

/// Writes packs and a manifest for a synthetic task into `out_dir`.
///
/// Per class, samples are laid out as cache shots, then validation, then
/// test, then text-initialization rows. The text initialization is the
/// normalized class mean of its held-out rows.
pub fn write_task(spec: &SynthTaskSpec, out_dir: impl AsRef<Path>) -> Result<SynthOutput> {
    if spec.shots == 0 || spec.text_per_class == 0 {
        return Err(Error::InvalidConfig(
            "shots and text_per_class must be positive".into(),
        ));
    }
    let model = GenerativeModel::new(spec.generative.clone())?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let (n, c, k) = (model.n_classes(), spec.generative.ambient_dim, spec.shots);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.generative.seed);
    let per_class = k + spec.val_per_class + spec.test_per_class + spec.text_per_class;
    let buckets = draw_balanced(&model, per_class, &mut rng)?;

    let (mut cache, mut cache_l) = (Vec::new(), Vec::new());
    let (mut val, mut val_l) = (Vec::new(), Vec::new());
    let (mut test, mut test_l) = (Vec::new(), Vec::new());
    let mut text = Vec::new();
    for (class, rows) in buckets.iter().enumerate() {
        let (shots, rest) = rows.split_at(k);
        let (v, rest) = rest.split_at(spec.val_per_class);
        let (t, held) = rest.split_at(spec.test_per_class);
        cache.extend_from_slice(shots);
        cache_l.extend(std::iter::repeat_n(class, k));
        val.extend_from_slice(v);
        val_l.extend(std::iter::repeat_n(class, v.len()));
        test.extend_from_slice(t);
        test_l.extend(std::iter::repeat_n(class, t.len()));
        let mut mean = vec![0.0; c];
        for r in held {
            for (acc, x) in mean.iter_mut().zip(r) {
                *acc += x / held.len() as f64;
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroRow(class));
        }
        text.push(mean.iter().map(|v| v / norm).collect());
    }

    let source = model.sample_with(spec.source_samples, &mut rng);

    let write = |name: &str, m: &FeatureMatrix| write_pack(m, out_dir.join(name));
    write("cache_features.ccaf", &stack(&cache, c)?)?;
    write_labels(&LabelVector(cache_l), out_dir.join("cache_labels.ccaf"))?;
    write("text_init.ccaf", &stack(&text, c)?)?;
    write("val_features.ccaf", &stack(&val, c)?)?;
    write_labels(&LabelVector(val_l), out_dir.join("val_labels.ccaf"))?;
    write("test_features.ccaf", &stack(&test, c)?)?;
    write_labels(&LabelVector(test_l), out_dir.join("test_labels.ccaf"))?;
    write("source.ccaf", &FeatureMatrix::from_mat(&source.features)?)?;

    let manifest = Manifest {
        n_classes: n,
        shots: k,
        cache_features: "cache_features.ccaf".into(),
        cache_labels: "cache_labels.ccaf".into(),
        text_init: "text_init.ccaf".into(),
        val_features: Some("val_features.ccaf".into()),
        val_labels: Some("val_labels.ccaf".into()),
        test_features: Some("test_features.ccaf".into()),
        test_labels: Some("test_labels.ccaf".into()),
        class_names: (0..n).map(|i| format!("class_{i}")).collect(),
    };
    let manifest_path = out_dir.join("manifest.json");
    manifest.write(&manifest_path)?;
    Ok(SynthOutput {
        manifest: manifest_path,
        source: out_dir.join("source.ccaf"),
    })
}
