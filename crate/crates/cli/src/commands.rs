use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cca_core::featurepack::{load_task, normalized_mat, read_pack};
use cca_core::model::Balance;
use cca_core::search::{self, classification_report, evaluate, evaluate_logits, grid_search};
use cca_core::synth::{write_task, SynthTaskSpec};
use cca_core::trainer::{self, finite_diff_check, Batch, TrainLog};
use cca_core::{
    Ablations, CcaModel, Checkpoint, Disentangler, Error, FewShotTask, FusionContext, HeadParams,
    IcaConfig, IcaModel, SearchGrid, SearchMode, Split, TrainConfig, TrainState,
};
use serde_json::{json, Value};

use crate::args::{CheckGradsArgs, EvalArgs, FitIcaArgs, Io, SearchArgs, SynthArgs, TrainArgs};
use crate::config::{emit, require, resolve, CliError, CliResult};

const DEFAULT_EVAL_BATCH: usize = 256;
const DEFAULT_GRAD_ROWS: usize = 8;
const DEFAULT_GRAD_STEP: f64 = 1e-5;
const DEFAULT_GRAD_TOLERANCE: f64 = 1e-4;

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Usage(format!("cannot create directory {}: {e}", path.display())))
}

fn recorded_path(path: &Path) -> String {
    fs::canonicalize(path)
        .unwrap_or_else(|_| path.to_path_buf())
        .display()
        .to_string()
}

/// Picks the feature space from the flags, falling back to what the
/// checkpoint was trained with.
fn feature_space(
    ica: &Option<PathBuf>,
    no_ica: bool,
    checkpoint: Option<&Checkpoint>,
) -> CliResult<(Disentangler, String)> {
    if no_ica {
        return Ok((Disentangler::Identity, "identity".into()));
    }
    if let Some(path) = ica {
        return Ok((
            Disentangler::Ica(IcaModel::load(path)?),
            recorded_path(path),
        ));
    }
    if let Some(ckpt) = checkpoint {
        if ckpt.log.config.ablations.no_ica {
            return Ok((Disentangler::Identity, "identity".into()));
        }
        if let Some(path) = &ckpt.log.ica_model {
            return Ok((Disentangler::Ica(IcaModel::load(path)?), path.clone()));
        }
    }
    Err(CliError::Usage(
        "--ica is required unless --no-ica is set".into(),
    ))
}

#[derive(Debug, Default, Clone, Copy)]
struct Overrides {
    alpha: Option<f64>,
    beta: Option<f64>,
    gamma: Option<f64>,
    eta: Option<f64>,
    clip_scale: Option<f64>,
    attn_scale: Option<f64>,
}

/// Trained model from a checkpoint, or the training-free one, with the
/// given balance and scale overrides applied.
fn build_model(
    task: &FewShotTask,
    checkpoint: Option<&Checkpoint>,
    disentangler: Disentangler,
    o: Overrides,
) -> CliResult<CcaModel> {
    let mut model = match checkpoint {
        Some(ckpt) => CcaModel::assemble(
            ckpt.cache.clone(),
            ckpt.head.clone(),
            disentangler,
            FusionContext::new(task.cache.features.to_mat())?,
        )?,
        None => {
            let head = HeadParams::default();
            CcaModel::training_free(
                task,
                disentangler,
                Balance::default(),
                head.clip_scale,
                head.attn_scale,
            )?
        }
    };
    let base = model.balance();
    let balance = Balance {
        alpha: o.alpha.unwrap_or(base.alpha),
        beta: o.beta.unwrap_or(base.beta),
        gamma: o.gamma.unwrap_or(base.gamma),
        eta: o.eta.unwrap_or(base.eta),
    };
    SearchGrid::single(&balance).validate()?;
    if balance.alpha < 0.0 {
        return Err(Error::InvalidConfig("alpha must be non-negative".into()).into());
    }
    model.set_balance(&balance);
    if let Some(s) = o.clip_scale {
        model.head.clip_scale = s;
    }
    if let Some(s) = o.attn_scale {
        model.head.attn_scale = s;
    }
    model.head.validate()?;
    Ok(model)
}

fn load_checkpoint(path: &Option<PathBuf>) -> CliResult<Option<Checkpoint>> {
    Ok(path.as_ref().map(Checkpoint::load).transpose()?)
}

fn split_by_name<'a>(task: &'a FewShotTask, name: &str) -> CliResult<&'a Split> {
    match name {
        "cache" => Ok(&task.cache),
        "val" => Ok(&task.val),
        "test" => Ok(&task.test),
        other => Err(CliError::Usage(format!(
            "unknown split `{other}` (expected cache, val or test)"
        ))),
    }
}

pub fn fit_ica(io: &Io<FitIcaArgs>) -> CliResult<()> {
    let started = Instant::now();
    let a = resolve(&io.args, io.config.as_deref())?;
    let source = require(&a.source, "source")?;
    let out = require(&a.out, "out")?;
    let seed = a.seed.unwrap_or(0);
    let defaults = IcaConfig::default();
    let config = IcaConfig {
        n_components: a.components.unwrap_or(defaults.n_components),
        nonlinearity: a.nonlinearity.unwrap_or(defaults.nonlinearity),
        tolerance: a.tolerance.unwrap_or(defaults.tolerance),
        max_iterations: a.max_iterations.unwrap_or(defaults.max_iterations),
        seed,
    };

    let pack = read_pack(source)?;
    config.validate(pack.cols())?;
    let mut model = IcaModel::fit(&normalized_mat(&pack)?, &config)?;
    model.normalize_output = !a.raw_output;
    create_dir(out)?;
    model.save(out)?;

    let result = json!({
        "model_dir": out,
        "n_samples": pack.rows(),
        "input_dim": pack.cols(),
        "n_components": config.n_components,
        "converged": model.converged,
        "iterations": model.iterations,
        "normalize_output": model.normalize_output,
    });
    emit(
        "fit-ica",
        seed,
        started,
        json!({"options": a, "ica": config}),
        result,
        io.report.as_deref(),
    )
}

pub fn train(io: &Io<TrainArgs>) -> CliResult<()> {
    let started = Instant::now();
    let a = resolve(&io.args, io.config.as_deref())?;
    let manifest = require(&a.manifest, "manifest")?;
    let out = require(&a.out, "out")?;
    let seed = a.seed.unwrap_or(0);
    let d = TrainConfig::default();
    let config = TrainConfig {
        epochs: a.epochs.unwrap_or(d.epochs),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        lr_cache: a.lr_cache.unwrap_or(d.lr_cache),
        lr_text: a.lr_text.unwrap_or(d.lr_text),
        l1_lambda: a.l1_lambda.unwrap_or(d.l1_lambda),
        seed,
        shuffle: !a.no_shuffle,
        balance: Balance {
            alpha: a.alpha.unwrap_or(d.balance.alpha),
            beta: a.beta.unwrap_or(d.balance.beta),
            gamma: a.gamma.unwrap_or(d.balance.gamma),
            eta: a.eta.unwrap_or(d.balance.eta),
        },
        clip_scale: a.clip_scale.unwrap_or(d.clip_scale),
        attn_scale: a.attn_scale.unwrap_or(d.attn_scale),
        ablations: Ablations {
            no_ica: a.no_ica,
            fix_cache_adapter: a.fix_cache_adapter,
            fix_text_classifier: a.fix_text_classifier,
            no_fusion: a.no_fusion,
        },
    };
    config.validate()?;

    let task = load_task(manifest)?;
    let (disentangler, space) = feature_space(&a.ica, a.no_ica, None)?;
    let ica = match &disentangler {
        Disentangler::Ica(model) => Some(model),
        Disentangler::Identity => None,
    };
    let state = trainer::train(&task, ica, &config)?;
    let model = state.model(&task, disentangler.clone())?;
    let balance = model.balance();
    let train_accuracy = evaluate(
        &model,
        &task.cache.features.to_mat(),
        &task.cache.labels.0,
        &balance,
    )?;
    let val_accuracy = if task.val.is_empty() {
        None
    } else {
        Some(evaluate(
            &model,
            &task.val.features.to_mat(),
            &task.val.labels.0,
            &balance,
        )?)
    };

    let log = TrainLog {
        config: config.clone(),
        loss_trace: state.loss_trace.clone(),
        epochs_run: state.epoch,
        seed,
        ica_model: ica.map(|_| space.clone()),
        tool_version: cca_core::VERSION.to_string(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    create_dir(out)?;
    Checkpoint {
        cache: state.cache,
        head: state.head,
        log,
    }
    .save(out)?;

    let result = json!({
        "checkpoint": out,
        "feature_space": space,
        "epochs_run": state.epoch,
        "final_loss": state.loss_trace.last(),
        "loss_trace": state.loss_trace,
        "balance": balance,
        "train_accuracy": train_accuracy,
        "val_accuracy": val_accuracy,
    });
    emit(
        "train",
        seed,
        started,
        json!({"options": a, "train": config}),
        result,
        io.report.as_deref(),
    )
}

pub fn eval(io: &Io<EvalArgs>) -> CliResult<()> {
    let started = Instant::now();
    let a = resolve(&io.args, io.config.as_deref())?;
    let manifest = require(&a.manifest, "manifest")?;
    let seed = a.seed.unwrap_or(0);
    let batch_size = a.batch_size.unwrap_or(DEFAULT_EVAL_BATCH);
    if batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be at least 1".into()));
    }

    let task = load_task(manifest)?;
    let checkpoint = load_checkpoint(&a.checkpoint)?;
    let (disentangler, space) = feature_space(&a.ica, a.no_ica, checkpoint.as_ref())?;
    let overrides = Overrides {
        alpha: a.alpha,
        beta: a.beta,
        gamma: a.gamma,
        eta: a.eta,
        clip_scale: a.clip_scale,
        attn_scale: a.attn_scale,
    };
    let model = build_model(&task, checkpoint.as_ref(), disentangler, overrides)?;
    let balance = model.balance();

    let names: Vec<String> = match &a.split {
        Some(names) => names.clone(),
        None => ["val", "test"]
            .into_iter()
            .filter(|n| !split_by_name(&task, n).map_or(true, Split::is_empty))
            .map(String::from)
            .collect(),
    };
    if names.is_empty() {
        return Err(Error::EmptySplit("the task has no val or test split to score".into()).into());
    }
    let mut splits = BTreeMap::new();
    for name in &names {
        let split = split_by_name(&task, name)?;
        if split.is_empty() {
            return Err(Error::EmptySplit(format!("split `{name}` is empty")).into());
        }
        let logits = evaluate_logits(&model, &split.features.to_mat(), &balance, batch_size)?;
        splits.insert(
            name.clone(),
            classification_report(&logits, &split.labels.0)?,
        );
    }

    let result = json!({
        "mode": if checkpoint.is_some() { "checkpoint" } else { "training-free" },
        "feature_space": space,
        "balance": balance,
        "clip_scale": model.head.clip_scale,
        "attn_scale": model.head.attn_scale,
        "batch_size": batch_size,
        "splits": splits,
    });
    emit(
        "eval",
        seed,
        started,
        json!({"options": a}),
        result,
        io.report.as_deref(),
    )
}

pub fn search(io: &Io<SearchArgs>) -> CliResult<()> {
    let started = Instant::now();
    let a = resolve(&io.args, io.config.as_deref())?;
    let manifest = require(&a.manifest, "manifest")?;
    let seed = a.seed.unwrap_or(0);

    let task = load_task(manifest)?;
    if task.val.is_empty() {
        return Err(Error::EmptySplit("search needs a non-empty validation split".into()).into());
    }
    let checkpoint = load_checkpoint(&a.checkpoint)?;
    let no_fusion = checkpoint
        .as_ref()
        .is_some_and(|c| c.log.config.ablations.no_fusion);
    let (disentangler, space) = feature_space(&a.ica, a.no_ica, checkpoint.as_ref())?;
    let overrides = Overrides {
        gamma: a.gamma,
        eta: a.eta,
        clip_scale: a.clip_scale,
        attn_scale: a.attn_scale,
        ..Overrides::default()
    };
    let model = build_model(&task, checkpoint.as_ref(), disentangler, overrides)?;

    let d = SearchGrid::default();
    let fusion_grid = |given: &Option<Vec<f64>>, default: Vec<f64>| {
        if no_fusion {
            vec![0.0]
        } else {
            given.clone().unwrap_or(default)
        }
    };
    let grid = SearchGrid {
        alpha_values: a.alpha_values.clone().unwrap_or(d.alpha_values),
        beta_values: a.beta_values.clone().unwrap_or(d.beta_values),
        gamma_values: fusion_grid(&a.gamma_values, d.gamma_values),
        eta_values: fusion_grid(&a.eta_values, d.eta_values),
    };
    let mode = if a.full {
        SearchMode::Full
    } else {
        SearchMode::TwoPass
    };
    let found = grid_search(
        &model,
        &task.val.features.to_mat(),
        &task.val.labels.0,
        &grid,
        mode,
    )?;
    let test_accuracy = if task.test.is_empty() {
        None
    } else {
        Some(search::evaluate(
            &model,
            &task.test.features.to_mat(),
            &task.test.labels.0,
            &found.best,
        )?)
    };

    let result = json!({
        "mode": mode,
        "feature_space": space,
        "n_points": found.table.len(),
        "best": found.best,
        "best_accuracy": found.best_accuracy,
        "test_accuracy": test_accuracy,
        "table": found.table,
    });
    emit(
        "search",
        seed,
        started,
        json!({"options": a, "grid": grid}),
        result,
        io.report.as_deref(),
    )
}

pub fn synth(io: &Io<SynthArgs>) -> CliResult<()> {
    let started = Instant::now();
    let a = resolve(&io.args, io.config.as_deref())?;
    let spec_path = require(&a.spec, "spec")?;
    let out = require(&a.out, "out")?;
    let text = fs::read_to_string(spec_path)
        .map_err(|e| CliError::Usage(format!("cannot read spec {}: {e}", spec_path.display())))?;
    let mut spec: SynthTaskSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid spec {}: {e}", spec_path.display())))?;
    if let Some(seed) = a.seed {
        spec.generative.seed = seed;
    }

    create_dir(out)?;
    let written = write_task(&spec, out)?;
    let result = json!({
        "manifest": written.manifest,
        "source": written.source,
        "n_classes": spec.generative.label_rule.n_classes(),
        "shots": spec.shots,
        "dim": spec.generative.ambient_dim,
    });
    let seed = spec.generative.seed;
    emit(
        "synth",
        seed,
        started,
        json!({"options": a, "spec": spec}),
        result,
        io.report.as_deref(),
    )
}

pub fn check_grads(io: &Io<CheckGradsArgs>) -> CliResult<()> {
    let started = Instant::now();
    let a = resolve(&io.args, io.config.as_deref())?;
    let manifest = require(&a.manifest, "manifest")?;
    let seed = a.seed.unwrap_or(0);
    let step = a.step.unwrap_or(DEFAULT_GRAD_STEP);
    let tolerance = a.tolerance.unwrap_or(DEFAULT_GRAD_TOLERANCE);
    let lambda = a.l1_lambda.unwrap_or(TrainConfig::default().l1_lambda);
    if !(step > 0.0 && tolerance > 0.0 && lambda >= 0.0) {
        return Err(CliError::Usage(
            "--step and --tolerance must be positive, --l1-lambda non-negative".into(),
        ));
    }

    let task = load_task(manifest)?;
    let checkpoint = load_checkpoint(&a.checkpoint)?;
    let (disentangler, space) = feature_space(&a.ica, a.no_ica, checkpoint.as_ref())?;
    let overrides = Overrides {
        alpha: a.alpha,
        beta: a.beta,
        gamma: a.gamma,
        eta: a.eta,
        clip_scale: a.clip_scale,
        attn_scale: a.attn_scale,
    };
    let model = build_model(&task, checkpoint.as_ref(), disentangler, overrides)?;

    let available = task.cache.labels.len();
    let rows = a.rows.unwrap_or(DEFAULT_GRAD_ROWS).min(available);
    if rows == 0 {
        return Err(CliError::Usage("--rows must be at least 1".into()));
    }
    // Evenly spaced so every class can appear in the probe batch.
    let picked: Vec<usize> = (0..rows).map(|i| i * available / rows).collect();
    let raw = task.cache.features.select_rows(&picked).to_mat();
    let batch = Batch {
        disentangled: model.disentangler.apply(&raw)?,
        labels: picked.iter().map(|&i| task.cache.labels.0[i]).collect(),
        raw: raw.clone(),
    };
    let ctx = FusionContext::new(raw)?;
    let state = TrainState::from_parts(model.cache, model.head, seed);
    let errors = finite_diff_check(&state, &batch, &ctx, lambda, step)?;
    let pass = errors.max() <= tolerance;

    let result = json!({
        "feature_space": space,
        "rows": rows,
        "n_parameters": state.cache.adapter.len() + state.head.text_weights.len(),
        "cache_adapter_rel_error": errors.cache,
        "text_weights_rel_error": errors.text,
        "tolerance": tolerance,
        "pass": pass,
    });
    let resolved: Value = json!({"step": step, "tolerance": tolerance, "l1_lambda": lambda});
    emit(
        "check-grads",
        seed,
        started,
        json!({"options": a, "resolved": resolved}),
        result,
        io.report.as_deref(),
    )?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: max relative error {:.3e} exceeds {tolerance:.1e}",
            errors.max()
        )))
    }
}
