//! Validation-set grid search over the balance factors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmax_row, Mat};
use crate::model::{Balance, CcaModel, Precomputed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub alpha_values: Vec<f64>,
    pub beta_values: Vec<f64>,
    pub gamma_values: Vec<f64>,
    pub eta_values: Vec<f64>,
}

fn steps(start: f64, step: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| start + step * i as f64).collect()
}

impl Default for SearchGrid {
    fn default() -> Self {
        Self {
            alpha_values: steps(0.5, 0.5, 20),
            beta_values: steps(1.0, 0.5, 19),
            gamma_values: steps(0.0, 0.05, 21),
            eta_values: steps(0.0, 0.05, 21),
        }
    }
}

impl SearchGrid {
    pub fn single(balance: &Balance) -> Self {
        Self {
            alpha_values: vec![balance.alpha],
            beta_values: vec![balance.beta],
            gamma_values: vec![balance.gamma],
            eta_values: vec![balance.eta],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, values) in [
            ("alpha", &self.alpha_values),
            ("beta", &self.beta_values),
            ("gamma", &self.gamma_values),
            ("eta", &self.eta_values),
        ] {
            if values.is_empty() {
                return Err(Error::InvalidConfig(format!("{name} grid is empty")));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} grid has non-finite values"
                )));
            }
            if values.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidConfig(format!(
                    "{name} grid is not strictly ascending"
                )));
            }
        }
        if self.beta_values.iter().any(|&b| b <= 0.0) {
            return Err(Error::InvalidConfig("beta values must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.alpha_values.len()
            * self.beta_values.len()
            * self.gamma_values.len()
            * self.eta_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    /// Alpha x beta at the model's gamma/eta, then gamma x eta at the best
    /// alpha/beta.
    #[default]
    TwoPass,
    /// Every point of the Cartesian product.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchPoint {
    pub balance: Balance,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Balance,
    pub best_accuracy: f64,
    /// Every evaluated point in evaluation order.
    pub table: Vec<SearchPoint>,
}

/// Top-1 accuracy; ties in a row go to the lowest class index.
pub fn accuracy(logits: &Mat, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptySplit("no samples to score".into()));
    }
    if logits.nrows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax_row(logits, i) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Accuracy of `model` at `balance` on raw query rows.
pub fn evaluate(model: &CcaModel, raw: &Mat, labels: &[usize], balance: &Balance) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptySplit("evaluation split is empty".into()));
    }
    let pre = model.precompute(raw)?;
    accuracy(&pre.logits(&model.cache, balance)?, labels)
}

/// Logits at `balance`, scored `batch_size` rows at a time.
pub fn evaluate_logits(
    model: &CcaModel,
    raw: &Mat,
    balance: &Balance,
    batch_size: usize,
) -> Result<Mat> {
    let batch_size = batch_size.max(1);
    let mut out = Mat::zeros(raw.nrows(), model.cache.n_classes());
    let mut start = 0;
    while start < raw.nrows() {
        let len = batch_size.min(raw.nrows() - start);
        let pre = model.precompute(&raw.rows(start, len).into_owned())?;
        out.rows_mut(start, len)
            .copy_from(&pre.logits(&model.cache, balance)?);
        start += len;
    }
    Ok(out)
}

fn sweep(
    pre: &Precomputed,
    model: &CcaModel,
    labels: &[usize],
    alphas: &[f64],
    betas: &[f64],
    gammas: &[f64],
    etas: &[f64],
) -> Result<Vec<SearchPoint>> {
    // Grid order is alpha-major; l1 is computed once per beta.
    let per_beta: Vec<Vec<SearchPoint>> = betas
        .par_iter()
        .map(|&beta| -> Result<Vec<SearchPoint>> {
            let l1 = pre.cache_logits(&model.cache, beta)?;
            let mut points = Vec::with_capacity(alphas.len() * gammas.len() * etas.len());
            for &alpha in alphas {
                let scaled = &l1 * alpha;
                for &gamma in gammas {
                    for &eta in etas {
                        let logits = &scaled + pre.terms.combine(gamma, eta);
                        points.push(SearchPoint {
                            balance: Balance {
                                alpha,
                                beta,
                                gamma,
                                eta,
                            },
                            accuracy: accuracy(&logits, labels)?,
                        });
                    }
                }
            }
            Ok(points)
        })
        .collect::<Result<_>>()?;

    let per_alpha = gammas.len() * etas.len();
    let mut table = Vec::with_capacity(alphas.len() * betas.len() * per_alpha);
    for a in 0..alphas.len() {
        for points in &per_beta {
            table.extend_from_slice(&points[a * per_alpha..(a + 1) * per_alpha]);
        }
    }
    Ok(table)
}

/// First maximizer in table order.
fn best_point(table: &[SearchPoint]) -> SearchPoint {
    let mut best = table[0];
    for p in &table[1..] {
        if p.accuracy > best.accuracy {
            best = *p;
        }
    }
    best
}

/// Exhaustive (or two-pass) search of the validation accuracy.
pub fn grid_search(
    model: &CcaModel,
    raw: &Mat,
    labels: &[usize],
    grid: &SearchGrid,
    mode: SearchMode,
) -> Result<SearchResult> {
    grid.validate()?;
    if labels.is_empty() {
        return Err(Error::EmptySplit("validation split is empty".into()));
    }
    let pre = model.precompute(raw)?;
    let table =
        match mode {
            SearchMode::Full => sweep(
                &pre,
                model,
                labels,
                &grid.alpha_values,
                &grid.beta_values,
                &grid.gamma_values,
                &grid.eta_values,
            )?,
            SearchMode::TwoPass => {
                let current = model.balance();
                let mut table = sweep(
                    &pre,
                    model,
                    labels,
                    &grid.alpha_values,
                    &grid.beta_values,
                    &[current.gamma],
                    &[current.eta],
                )?;
                let first = best_point(&table).balance;
                let second = sweep(
                    &pre,
                    model,
                    labels,
                    &[first.alpha],
                    &[first.beta],
                    &grid.gamma_values,
                    &grid.eta_values,
                )?;
                // The first-pass winner is already in the table.
                table.extend(second.into_iter().filter(|p| {
                    !(p.balance.gamma == current.gamma && p.balance.eta == current.eta)
                }));
                table
            }
        };
    let best = best_point(&table);
    Ok(SearchResult {
        best: best.balance,
        best_accuracy: best.accuracy,
        table,
    })
}

/// Accuracy breakdown for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub n_samples: usize,
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn classification_report(logits: &Mat, labels: &[usize]) -> Result<ClassificationReport> {
    let acc = accuracy(logits, labels)?;
    let n = logits.ncols();
    let mut confusion = vec![vec![0usize; n]; n];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: l,
                n_classes: n,
            });
        }
        confusion[l][argmax_row(logits, i)] += 1;
    }
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect();
    Ok(ClassificationReport {
        accuracy: acc,
        n_samples: labels.len(),
        per_class_accuracy,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_sizes() {
        let g = SearchGrid::default();
        assert_eq!(g.alpha_values.len(), 20);
        assert_eq!(g.beta_values.len(), 19);
        assert_eq!(g.gamma_values.len(), 21);
        assert!((g.alpha_values[19] - 10.0).abs() < 1e-12);
        assert!((g.beta_values[18] - 10.0).abs() < 1e-12);
        assert!((g.eta_values[20] - 1.0).abs() < 1e-12);
        g.validate().unwrap();
    }

    #[test]
    fn grid_validation() {
        let mut g = SearchGrid {
            beta_values: vec![0.0, 1.0],
            ..SearchGrid::default()
        };
        assert!(g.validate().is_err());
        g.beta_values = vec![2.0, 1.0];
        assert!(g.validate().is_err());
        g.beta_values = vec![];
        assert!(g.validate().is_err());
    }

    #[test]
    fn tied_logits_pick_class_zero() {
        let logits = Mat::from_element(4, 3, 0.7);
        let acc = accuracy(&logits, &[0, 1, 0, 2]).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn single_sample_and_empty() {
        let logits = Mat::from_row_slice(1, 2, &[0.1, 0.9]);
        assert_eq!(accuracy(&logits, &[1]).unwrap(), 1.0);
        assert!(matches!(
            accuracy(&Mat::zeros(0, 2), &[]),
            Err(Error::EmptySplit(_))
        ));
    }

    #[test]
    fn report_confusion() {
        let logits = Mat::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let r = classification_report(&logits, &[0, 1, 1]).unwrap();
        assert_eq!(r.confusion, vec![vec![1, 0], vec![1, 1]]);
        assert_eq!(r.per_class_accuracy, vec![Some(1.0), Some(0.5)]);
    }
}
