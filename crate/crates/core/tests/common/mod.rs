#![allow(dead_code)]

use std::path::Path;

use cca_core::featurepack::{load_task, read_pack};
use cca_core::synth::{write_task, GenerativeSpec, LabelRule, SynthTaskSpec};
use cca_core::{FewShotTask, IcaConfig, IcaModel, Mat};

/// Sparse rule on two latents cutting the score into four classes.
pub fn two_latent_rule() -> LabelRule {
    LabelRule {
        latents: vec![0, 1],
        weights: vec![1.0, 1.0],
        thresholds: vec![-0.8, 0.0, 0.8],
    }
}

pub fn task_spec(n_latents: usize, dim: usize, shots: usize, seed: u64) -> SynthTaskSpec {
    SynthTaskSpec {
        generative: GenerativeSpec {
            offset_norm: 2.0,
            ..GenerativeSpec::laplace(n_latents, dim, two_latent_rule(), seed)
        },
        shots,
        val_per_class: 50,
        test_per_class: 100,
        text_per_class: 32,
        source_samples: 10_000,
    }
}

/// Label latents get a small scale and nuisance latents a large one, so
/// raw cosine similarity is dominated by label-irrelevant directions.
pub fn anisotropic_task_spec(
    n_latents: usize,
    dim: usize,
    shots: usize,
    seed: u64,
) -> SynthTaskSpec {
    scaled_task_spec(n_latents, dim, shots, seed, 0.7, 1.2)
}

pub fn scaled_task_spec(
    n_latents: usize,
    dim: usize,
    shots: usize,
    seed: u64,
    label_scale: f64,
    nuisance_scale: f64,
) -> SynthTaskSpec {
    let mut spec = task_spec(n_latents, dim, shots, seed);
    let mut scales = vec![nuisance_scale; n_latents];
    scales[0] = label_scale;
    scales[1] = label_scale;
    spec.generative.latent_scales = Some(scales);
    spec.generative.label_rule.thresholds = vec![-0.8 * label_scale, 0.0, 0.8 * label_scale];
    spec
}

pub struct SynthFixture {
    pub dir: tempfile::TempDir,
    pub task: FewShotTask,
    /// Row-normalized source pack.
    pub source: Mat,
}

pub fn synth_fixture(spec: &SynthTaskSpec) -> SynthFixture {
    let dir = tempfile::tempdir().unwrap();
    let out = write_task(spec, dir.path()).unwrap();
    let task = load_task(&out.manifest).unwrap();
    let source = cca_core::featurepack::normalized_mat(&read_pack(&out.source).unwrap()).unwrap();
    SynthFixture { dir, task, source }
}

pub fn fit_ica(source: &Mat, m: usize, seed: u64) -> IcaModel {
    IcaModel::fit(
        source,
        &IcaConfig {
            seed,
            ..IcaConfig::with_components(m)
        },
    )
    .unwrap()
}

pub fn report(name: &str, pass: bool, detail: impl AsRef<str>) {
    println!(
        "[{}] {name}: {}",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
}

pub fn data_path(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}
