//! Fine-tuning of the cache adapter and text classifier.
//!
//! Loss is mean softmax cross-entropy over the batch plus an l1 penalty on
//! the cache adapter. Gradients are analytic; [`finite_diff_check`] compares
//! them against central differences.
//!
//! Forward pass for a batch with raw rows `Q` (`B x C`), disentangled rows
//! `Qd` (`B x M`) and fusion context `X`:
//!
//! ```text
//! G  = Qd (K W_c)^T            S  = exp(-beta (1 - G))       l1 = S L^T
//! P  = softmax(s W_t X^T)      R  = softmax(s Q W_t^T)
//! l2 = tau Q W_t^T + gamma Q X^T P^T + eta R W_t W_t^T
//! logits = alpha l1 + l2
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{self, CacheModel};
use crate::crossmodal::{self, CrossModalHead, FusionContext, HeadParams};
use crate::error::{Error, Result};
use crate::featurepack::FewShotTask;
use crate::ica::{Disentangler, IcaModel};
use crate::linalg::{softmax_rows, softmax_rows_backward, Mat};
use crate::model::{Balance, CcaModel};

/// Component ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Use raw normalized features as cache keys.
    pub no_ica: bool,
    /// Keep `W_c` at the identity.
    pub fix_cache_adapter: bool,
    /// Keep `W_t` at its initialization.
    pub fix_text_classifier: bool,
    /// Drop both fused-feature terms (`gamma = eta = 0`).
    pub no_fusion: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_cache: f64,
    pub lr_text: f64,
    pub l1_lambda: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub balance: Balance,
    pub clip_scale: f64,
    pub attn_scale: f64,
    pub ablations: Ablations,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let head = HeadParams::default();
        Self {
            epochs: 20,
            batch_size: 128,
            lr_cache: 1e-3,
            lr_text: 1e-4,
            l1_lambda: 1e-4,
            seed: 0,
            shuffle: true,
            balance: Balance::default(),
            clip_scale: head.clip_scale,
            attn_scale: head.attn_scale,
            ablations: Ablations::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.lr_cache > 0.0 && self.lr_text > 0.0) {
            return Err(Error::InvalidConfig(
                "learning rates must be positive".into(),
            ));
        }
        if self.l1_lambda.is_nan() || self.l1_lambda < 0.0 {
            return Err(Error::InvalidConfig(
                "l1_lambda must be non-negative".into(),
            ));
        }
        if !(self.balance.beta > 0.0 && self.balance.alpha >= 0.0) {
            return Err(Error::InvalidConfig(
                "beta must be positive, alpha non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Balance used during training, with `no_fusion` applied.
    pub fn effective_balance(&self) -> Balance {
        let mut b = self.balance;
        if self.ablations.no_fusion {
            b.gamma = 0.0;
            b.eta = 0.0;
        }
        b
    }
}

/// Query rows of one step with their labels.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `B x C`, unit norm.
    pub raw: Mat,
    /// `B x M`, in the cache key space.
    pub disentangled: Mat,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            raw: self.raw.select_rows(indices),
            disentangled: self.disentangled.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub cache: CacheModel,
    pub head: CrossModalHead,
    pub epoch: usize,
    pub loss_trace: Vec<f64>,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// `M x M`.
    pub cache: Mat,
    /// `N x C`.
    pub text: Mat,
}

impl TrainState {
    /// Identity adapter, text weights from the task, balance from `config`.
    pub fn new(
        task: &FewShotTask,
        disentangler: &Disentangler,
        config: &TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let balance = config.effective_balance();
        let mut cache = adapter::build_cache(task, disentangler)?;
        cache.alpha = balance.alpha;
        cache.beta = balance.beta;
        let head = CrossModalHead::new(
            task.text_init.to_mat(),
            HeadParams {
                gamma: balance.gamma,
                eta: balance.eta,
                clip_scale: config.clip_scale,
                attn_scale: config.attn_scale,
            },
        )?;
        Ok(Self::from_parts(cache, head, config.seed))
    }

    pub fn from_parts(cache: CacheModel, head: CrossModalHead, seed: u64) -> Self {
        Self {
            cache,
            head,
            epoch: 0,
            loss_trace: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Evaluation model with the cache features as fusion context.
    pub fn model(&self, task: &FewShotTask, disentangler: Disentangler) -> Result<CcaModel> {
        CcaModel::assemble(
            self.cache.clone(),
            self.head.clone(),
            disentangler,
            FusionContext::new(task.cache.features.to_mat())?,
        )
    }
}

struct ForwardPass {
    affinities: Mat,
    text_attention: Mat,
    image_attention: Mat,
    context_similarity: Mat,
    logits: Mat,
}

fn check_batch(state: &TrainState, batch: &Batch, ctx: &FusionContext) -> Result<()> {
    let (b, c, m) = (batch.len(), state.head.dim(), state.cache.dim());
    if batch.raw.shape() != (b, c) || batch.disentangled.shape() != (b, m) {
        return Err(Error::DimensionMismatch(format!(
            "batch raw {:?} / disentangled {:?}, expected ({b}, {c}) / ({b}, {m})",
            batch.raw.shape(),
            batch.disentangled.shape()
        )));
    }
    if ctx.kv_features.ncols() != c {
        return Err(Error::DimensionMismatch(format!(
            "fusion context has {} columns, expected {c}",
            ctx.kv_features.ncols()
        )));
    }
    let n = state.head.n_classes();
    if let Some(index) = batch.labels.iter().position(|&l| l >= n) {
        return Err(Error::LabelOutOfRange {
            index,
            label: batch.labels[index],
            n_classes: n,
        });
    }
    Ok(())
}

fn forward_pass(state: &TrainState, batch: &Batch, ctx: &FusionContext) -> Result<ForwardPass> {
    check_batch(state, batch, ctx)?;
    let (cache, head) = (&state.cache, &state.head);
    let affinities = adapter::affinity(&batch.disentangled, cache)?;
    let l1 = adapter::cache_logits(&affinities, cache)?;

    let w = &head.text_weights;
    let text_attention = crossmodal::text_attention(head, ctx)?;
    let image_attention = crossmodal::image_attention(&batch.raw, head)?;
    let context_similarity = &batch.raw * ctx.kv_features.transpose();
    let l2 = crossmodal::clip_logits(&batch.raw, head)?
        + &context_similarity * text_attention.transpose() * head.gamma
        + &image_attention * (w * w.transpose()) * head.eta;

    Ok(ForwardPass {
        logits: adapter::combine_logits(&l1, &l2, cache.alpha)?,
        affinities,
        text_attention,
        image_attention,
        context_similarity,
    })
}

/// Logits `B x N` with the given fusion context (the batch itself during
/// training).
pub fn forward(state: &TrainState, batch: &Batch, ctx: &FusionContext) -> Result<Mat> {
    Ok(forward_pass(state, batch, ctx)?.logits)
}

/// Mean cross-entropy of `logits` against `labels` (natural log).
pub fn cross_entropy(logits: &Mat, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.max();
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    total / labels.len().max(1) as f64
}

/// Cross-entropy plus `lambda * sum |W_c|`.
pub fn loss(logits: &Mat, labels: &[usize], adapter: &Mat, lambda: f64) -> f64 {
    cross_entropy(logits, labels) + lambda * adapter.iter().map(|v| v.abs()).sum::<f64>()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Analytic gradients of [`loss`] with respect to `W_c` and `W_t`.
pub fn backward(
    state: &TrainState,
    batch: &Batch,
    ctx: &FusionContext,
    lambda: f64,
    ablations: &Ablations,
) -> Result<Gradients> {
    let fp = forward_pass(state, batch, ctx)?;
    let (cache, head) = (&state.cache, &state.head);
    let b = batch.len() as f64;

    // dL/dlogits = (softmax - onehot) / B
    let mut d_logits = softmax_rows(&fp.logits, 1.0);
    for (i, &label) in batch.labels.iter().enumerate() {
        d_logits[(i, label)] -= 1.0;
    }
    d_logits /= b;

    let grad_cache = if ablations.fix_cache_adapter {
        Mat::zeros(cache.dim(), cache.dim())
    } else {
        // l1 path: dS = alpha dL L, dG = beta S * dS, dA = dG^T Qd, dW_c = K^T dA.
        let mut d_sim = (&d_logits * &cache.values) * cache.alpha;
        d_sim.component_mul_assign(&fp.affinities);
        d_sim *= cache.beta;
        let d_keys = d_sim.tr_mul(&batch.disentangled);
        let mut g = cache.keys.tr_mul(&d_keys);
        g.zip_apply(&cache.adapter, |gv, w| *gv += lambda * sign(w));
        g
    };

    let grad_text = if ablations.fix_text_classifier {
        Mat::zeros(head.n_classes(), head.dim())
    } else {
        let w = &head.text_weights;
        let q = &batch.raw;
        let s = head.attn_scale;

        let mut g = d_logits.tr_mul(q) * head.clip_scale;

        if head.gamma != 0.0 {
            let d_p = d_logits.tr_mul(&fp.context_similarity) * head.gamma;
            let d_z = softmax_rows_backward(&fp.text_attention, &d_p);
            g += d_z * &ctx.kv_features * s;
        }

        if head.eta != 0.0 {
            let gram = w * w.transpose();
            let d_r = &d_logits * &gram * head.eta;
            let d_gram = fp.image_attention.tr_mul(&d_logits) * head.eta;
            g += (&d_gram + d_gram.transpose()) * w;
            let d_y = softmax_rows_backward(&fp.image_attention, &d_r);
            g += d_y.tr_mul(q) * s;
        }
        g
    };

    Ok(Gradients {
        cache: grad_cache,
        text: grad_text,
    })
}

/// One plain SGD update with separate learning rates.
pub fn sgd_step(state: &mut TrainState, grads: &Gradients, config: &TrainConfig) -> Result<()> {
    if grads.cache.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient("cache adapter"));
    }
    if grads.text.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient("text classifier"));
    }
    if !config.ablations.fix_cache_adapter {
        state.cache.adapter -= &grads.cache * config.lr_cache;
    }
    if !config.ablations.fix_text_classifier {
        state.head.text_weights -= &grads.text * config.lr_text;
    }
    Ok(())
}

/// Runs one epoch of shuffled minibatches; returns the sample-weighted mean
/// loss.
pub fn train_epoch(state: &mut TrainState, data: &Batch, config: &TrainConfig) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    if config.shuffle {
        order.shuffle(&mut state.rng);
    }
    let mut total = 0.0;
    for chunk in order.chunks(config.batch_size) {
        let batch = data.select(chunk);
        let ctx = FusionContext::new(batch.raw.clone())?;
        let logits = forward(state, &batch, &ctx)?;
        total += loss(
            &logits,
            &batch.labels,
            &state.cache.adapter,
            config.l1_lambda,
        ) * chunk.len() as f64;
        let grads = backward(state, &batch, &ctx, config.l1_lambda, &config.ablations)?;
        sgd_step(state, &grads, config)?;
    }
    state.epoch += 1;
    let mean = total / data.len() as f64;
    if !mean.is_finite() {
        return Err(Error::NonFiniteGradient("epoch loss"));
    }
    state.loss_trace.push(mean);
    Ok(mean)
}

/// Feature space implied by the ablation flags.
pub fn select_disentangler(ica: Option<&IcaModel>, ablations: &Ablations) -> Result<Disentangler> {
    match (ablations.no_ica, ica) {
        (true, _) => Ok(Disentangler::Identity),
        (false, Some(model)) => Ok(Disentangler::Ica(model.clone())),
        (false, None) => Err(Error::InvalidConfig(
            "an ICA model is required unless the no_ica ablation is set".into(),
        )),
    }
}

/// The few-shot training set as a single batch.
pub fn training_batch(task: &FewShotTask, cache: &CacheModel) -> Batch {
    Batch {
        raw: task.cache.features.to_mat(),
        disentangled: cache.keys.clone(),
        labels: task.cache.labels.0.clone(),
    }
}

/// Fine-tunes on the cache samples for `config.epochs` epochs.
pub fn train(
    task: &FewShotTask,
    ica: Option<&IcaModel>,
    config: &TrainConfig,
) -> Result<TrainState> {
    config.validate()?;
    let disentangler = select_disentangler(ica, &config.ablations)?;
    let mut state = TrainState::new(task, &disentangler, config)?;
    let data = training_batch(task, &state.cache);
    for _ in 0..config.epochs {
        train_epoch(&mut state, &data, config)?;
    }
    Ok(state)
}

/// Worst relative errors of the analytic gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub cache: f64,
    pub text: f64,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.cache.max(self.text)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `grads` with central differences of [`loss`], parameter by
/// parameter. Adapter entries closer to zero than `step` use a step of half
/// their magnitude.
pub fn compare_with_finite_differences(
    state: &TrainState,
    batch: &Batch,
    ctx: &FusionContext,
    lambda: f64,
    step: f64,
    grads: &Gradients,
) -> Result<GradCheckReport> {
    let objective = |s: &TrainState| -> Result<f64> {
        let logits = forward(s, batch, ctx)?;
        Ok(loss(&logits, &batch.labels, &s.cache.adapter, lambda))
    };
    let mut probe = state.clone();

    let mut cache_err = 0.0_f64;
    for idx in 0..probe.cache.adapter.len() {
        let orig = probe.cache.adapter[idx];
        // The L1 term has a kink at zero; never let the stencil straddle it.
        let h = if lambda > 0.0 && orig != 0.0 {
            step.min(0.5 * orig.abs())
        } else {
            step
        };
        probe.cache.adapter[idx] = orig + h;
        let plus = objective(&probe)?;
        probe.cache.adapter[idx] = orig - h;
        let minus = objective(&probe)?;
        probe.cache.adapter[idx] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        cache_err = cache_err.max(relative_error(grads.cache[idx], numeric));
    }

    let mut text_err = 0.0_f64;
    for idx in 0..probe.head.text_weights.len() {
        let orig = probe.head.text_weights[idx];
        probe.head.text_weights[idx] = orig + step;
        let plus = objective(&probe)?;
        probe.head.text_weights[idx] = orig - step;
        let minus = objective(&probe)?;
        probe.head.text_weights[idx] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        text_err = text_err.max(relative_error(grads.text[idx], numeric));
    }

    Ok(GradCheckReport {
        cache: cache_err,
        text: text_err,
    })
}

/// Checks [`backward`] against central differences.
pub fn finite_diff_check(
    state: &TrainState,
    batch: &Batch,
    ctx: &FusionContext,
    lambda: f64,
    step: f64,
) -> Result<GradCheckReport> {
    let grads = backward(state, batch, ctx, lambda, &Ablations::default())?;
    compare_with_finite_differences(state, batch, ctx, lambda, step, &grads)
}

/// Run metadata stored next to the trained parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub loss_trace: Vec<f64>,
    pub epochs_run: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ica_model: Option<String>,
    pub tool_version: String,
    pub wall_time_secs: f64,
}

/// Trained cache + head + log, stored in one directory.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub cache: CacheModel,
    pub head: CrossModalHead,
    pub log: TrainLog,
}

impl Checkpoint {
    pub const LOG_FILE: &'static str = "train_log.json";

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.cache.save(dir)?;
        self.head.save(dir)?;
        let path = dir.join(Self::LOG_FILE);
        let text = serde_json::to_string_pretty(&self.log).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(Self::LOG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            cache: CacheModel::load(dir)?,
            head: CrossModalHead::load(dir)?,
            log: serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?,
        })
    }
}
