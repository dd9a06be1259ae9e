//! Random problem instances for the kernel benchmarks.

use cca_core::linalg::{normalize_rows_mut, Mat};
use cca_core::trainer::Batch;
use cca_core::{CacheModel, CrossModalHead, FusionContext, HeadParams, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn unit_rows(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let mut m = Mat::from_fn(rows, cols, |_, _| rng.random::<f64>() - 0.5);
    normalize_rows_mut(&mut m).expect("random rows are nonzero");
    m
}

/// Sizes of a few-shot problem. Keys live in `dim` dimensions, so the
/// disentangler is the identity.
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub n_classes: usize,
    pub shots: usize,
    pub dim: usize,
    pub batch: usize,
}

pub struct Instance {
    pub state: TrainState,
    pub batch: Batch,
    pub context: FusionContext,
}

pub fn instance(shape: Shape, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Shape {
        n_classes,
        shots,
        dim,
        batch,
    } = shape;
    let entries = n_classes * shots;
    let keys = unit_rows(entries, dim, &mut rng);
    let values = Mat::from_fn(
        n_classes,
        entries,
        |n, j| if j / shots == n { 1.0 } else { 0.0 },
    );
    let cache = CacheModel {
        keys: keys.clone(),
        values,
        adapter: Mat::identity(dim, dim),
        beta: 5.5,
        alpha: 1.0,
    };
    let head = CrossModalHead::new(unit_rows(n_classes, dim, &mut rng), HeadParams::default())
        .expect("default head parameters are valid");
    let raw = unit_rows(batch, dim, &mut rng);
    let labels = (0..batch).map(|_| rng.random_range(0..n_classes)).collect();
    Instance {
        state: TrainState::from_parts(cache, head, seed),
        batch: Batch {
            disentangled: raw.clone(),
            raw,
            labels,
        },
        context: FusionContext::new(keys).expect("cache is not empty"),
    }
}
