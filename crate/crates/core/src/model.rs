//! Full predictor: disentangled cache path plus cross-modal path.

use serde::{Deserialize, Serialize};

use crate::adapter::{self, CacheModel};
use crate::crossmodal::{self, CrossModalHead, CrossModalTerms, FusionContext, HeadParams};
use crate::error::{Error, Result};
use crate::featurepack::FewShotTask;
use crate::ica::Disentangler;
use crate::linalg::Mat;

/// The four balance/smoothness factors tuned after training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Balance {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
}

impl Default for Balance {
    fn default() -> Self {
        let head = HeadParams::default();
        Self {
            alpha: adapter::DEFAULT_ALPHA,
            beta: adapter::DEFAULT_BETA,
            gamma: head.gamma,
            eta: head.eta,
        }
    }
}

/// Everything needed to score query features. Evaluation uses the cache
/// features as fusion context, so every query row is scored independently.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaModel {
    pub cache: CacheModel,
    pub head: CrossModalHead,
    pub disentangler: Disentangler,
    pub context: FusionContext,
}

/// Per-query quantities that do not depend on the balance factors.
#[derive(Debug, Clone)]
pub struct Precomputed {
    /// `B x NK` inner products with the adapted keys.
    pub similarity: Mat,
    pub terms: CrossModalTerms,
}

impl Precomputed {
    pub fn cache_logits(&self, cache: &CacheModel, beta: f64) -> Result<Mat> {
        let mut s = self.similarity.clone();
        s.apply(|v| *v = (-beta * (1.0 - *v)).exp());
        adapter::cache_logits(&s, cache)
    }

    pub fn logits(&self, cache: &CacheModel, balance: &Balance) -> Result<Mat> {
        let l1 = self.cache_logits(cache, balance.beta)?;
        adapter::combine_logits(
            &l1,
            &self.terms.combine(balance.gamma, balance.eta),
            balance.alpha,
        )
    }
}

impl CcaModel {
    /// Training-free model: identity adapter and text weights at their
    /// initialization.
    pub fn training_free(
        task: &FewShotTask,
        disentangler: Disentangler,
        balance: Balance,
        clip_scale: f64,
        attn_scale: f64,
    ) -> Result<Self> {
        let mut cache = adapter::build_cache(task, &disentangler)?;
        cache.alpha = balance.alpha;
        cache.beta = balance.beta;
        let head = CrossModalHead::new(
            task.text_init.to_mat(),
            HeadParams {
                gamma: balance.gamma,
                eta: balance.eta,
                clip_scale,
                attn_scale,
            },
        )?;
        let context = FusionContext::new(task.cache.features.to_mat())?;
        Self::assemble(cache, head, disentangler, context)
    }

    pub fn assemble(
        cache: CacheModel,
        head: CrossModalHead,
        disentangler: Disentangler,
        context: FusionContext,
    ) -> Result<Self> {
        let c = head.dim();
        disentangler.check_input(c)?;
        if disentangler.output_dim(c) != cache.dim() {
            return Err(Error::DimensionMismatch(format!(
                "cache keys have {} columns, feature space gives {}",
                cache.dim(),
                disentangler.output_dim(c)
            )));
        }
        if cache.n_classes() != head.n_classes() {
            return Err(Error::DimensionMismatch(format!(
                "cache has {} classes, text weights have {}",
                cache.n_classes(),
                head.n_classes()
            )));
        }
        if context.kv_features.ncols() != c {
            return Err(Error::DimensionMismatch(format!(
                "fusion context has {} columns, expected {c}",
                context.kv_features.ncols()
            )));
        }
        Ok(Self {
            cache,
            head,
            disentangler,
            context,
        })
    }

    pub fn balance(&self) -> Balance {
        Balance {
            alpha: self.cache.alpha,
            beta: self.cache.beta,
            gamma: self.head.gamma,
            eta: self.head.eta,
        }
    }

    pub fn set_balance(&mut self, balance: &Balance) {
        self.cache.alpha = balance.alpha;
        self.cache.beta = balance.beta;
        self.head.gamma = balance.gamma;
        self.head.eta = balance.eta;
    }

    pub fn precompute(&self, raw: &Mat) -> Result<Precomputed> {
        let disentangled = self.disentangler.apply(raw)?;
        let keys = adapter::adapted_keys(&self.cache);
        if disentangled.ncols() != keys.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "disentangled queries have {} columns, keys have {}",
                disentangled.ncols(),
                keys.ncols()
            )));
        }
        Ok(Precomputed {
            similarity: disentangled * keys.transpose(),
            terms: crossmodal::crossmodal_terms(raw, &self.head, &self.context)?,
        })
    }

    /// Final logits `alpha * l1 + l2` for unit-norm raw query rows.
    pub fn logits(&self, raw: &Mat) -> Result<Mat> {
        let disentangled = self.disentangler.apply(raw)?;
        let s = adapter::affinity(&disentangled, &self.cache)?;
        let l1 = adapter::cache_logits(&s, &self.cache)?;
        let l2 = crossmodal::crossmodal_logits(raw, &self.head, &self.context)?;
        adapter::combine_logits(&l1, &l2, self.cache.alpha)
    }

    /// Same as [`CcaModel::logits`], scoring `batch_size` rows at a time.
    pub fn logits_batched(&self, raw: &Mat, batch_size: usize) -> Result<Mat> {
        let batch_size = batch_size.max(1);
        let mut out = Mat::zeros(raw.nrows(), self.cache.n_classes());
        let mut start = 0;
        while start < raw.nrows() {
            let len = batch_size.min(raw.nrows() - start);
            let l = self.logits(&raw.rows(start, len).into_owned())?;
            out.rows_mut(start, len).copy_from(&l);
            start += len;
        }
        Ok(out)
    }
}

/// Logits of the training-free method computed straight from the
/// disentangled keys, without going through an adapter matrix.
pub fn training_free_logits(
    task: &FewShotTask,
    disentangler: &Disentangler,
    balance: &Balance,
    clip_scale: f64,
    attn_scale: f64,
    raw: &Mat,
) -> Result<Mat> {
    let keys = disentangler.apply(&task.cache.features.to_mat())?;
    let values = crate::featurepack::one_hot(&task.cache.labels, task.n_classes)?.to_mat();
    let s = adapter::affinity_with_keys(&disentangler.apply(raw)?, &keys, balance.beta)?;
    let l1 = s * values.transpose();
    let head = CrossModalHead::new(
        task.text_init.to_mat(),
        HeadParams {
            gamma: balance.gamma,
            eta: balance.eta,
            clip_scale,
            attn_scale,
        },
    )?;
    let ctx = FusionContext::new(task.cache.features.to_mat())?;
    let l2 = crossmodal::crossmodal_logits(raw, &head, &ctx)?;
    adapter::combine_logits(&l1, &l2, balance.alpha)
}
