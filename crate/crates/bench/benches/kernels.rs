use std::hint::black_box;

use cca_bench::{instance, unit_rows, Shape};
use cca_core::adapter::{affinity, cache_logits};
use cca_core::crossmodal::crossmodal_logits;
use cca_core::search::grid_search;
use cca_core::trainer::{backward, forward, Batch};
use cca_core::{Ablations, CcaModel, Disentangler, IcaConfig, IcaModel, SearchGrid, SearchMode};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SHAPES: [Shape; 2] = [
    Shape {
        n_classes: 10,
        shots: 16,
        dim: 64,
        batch: 128,
    },
    Shape {
        n_classes: 100,
        shots: 16,
        dim: 256,
        batch: 256,
    },
];

fn label(s: &Shape) -> String {
    format!("N{}xK{}xC{}xB{}", s.n_classes, s.shots, s.dim, s.batch)
}

fn cache_path(c: &mut Criterion) {
    let mut group = c.benchmark_group("cache_logits");
    for shape in SHAPES {
        let inst = instance(shape, 1);
        group.bench_with_input(
            BenchmarkId::from_parameter(label(&shape)),
            &inst,
            |b, inst| {
                b.iter(|| {
                    let s =
                        affinity(black_box(&inst.batch.disentangled), &inst.state.cache).unwrap();
                    cache_logits(&s, &inst.state.cache).unwrap()
                })
            },
        );
    }
    group.finish();
}

fn crossmodal_path(c: &mut Criterion) {
    let mut group = c.benchmark_group("crossmodal_logits");
    for shape in SHAPES {
        let inst = instance(shape, 2);
        group.bench_with_input(
            BenchmarkId::from_parameter(label(&shape)),
            &inst,
            |b, inst| {
                b.iter(|| {
                    crossmodal_logits(black_box(&inst.batch.raw), &inst.state.head, &inst.context)
                        .unwrap()
                })
            },
        );
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("training_step");
    for shape in SHAPES {
        let inst = instance(shape, 3);
        let ctx = cca_core::FusionContext::new(inst.batch.raw.clone()).unwrap();
        group.bench_with_input(
            BenchmarkId::new("forward", label(&shape)),
            &inst,
            |b, inst| b.iter(|| forward(&inst.state, black_box(&inst.batch), &ctx).unwrap()),
        );
        group.bench_with_input(
            BenchmarkId::new("backward", label(&shape)),
            &inst,
            |b, inst| {
                b.iter(|| {
                    backward(
                        &inst.state,
                        black_box(&inst.batch),
                        &ctx,
                        1e-4,
                        &Ablations::default(),
                    )
                    .unwrap()
                })
            },
        );
    }
    group.finish();
}

fn fastica(c: &mut Criterion) {
    let mut group = c.benchmark_group("fastica_fit");
    group.sample_size(10);
    for (rows, dim, components) in [(5_000, 32, 16), (10_000, 64, 32)] {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = unit_rows(rows, dim, &mut rng);
        let config = IcaConfig::with_components(components);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("n{rows}xC{dim}xM{components}")),
            &x,
            |b, x| b.iter(|| IcaModel::fit(black_box(x), &config).unwrap()),
        );
    }
    group.finish();
}

fn search(c: &mut Criterion) {
    let mut group = c.benchmark_group("grid_search");
    group.sample_size(10);
    let shape = SHAPES[0];
    let inst = instance(shape, 5);
    let model = CcaModel::assemble(
        inst.state.cache.clone(),
        inst.state.head.clone(),
        Disentangler::Identity,
        inst.context.clone(),
    )
    .unwrap();
    let Batch { raw, labels, .. } = &inst.batch;
    let small_full = SearchGrid {
        alpha_values: vec![0.5, 1.0, 2.0, 4.0],
        ..SearchGrid::default()
    };
    for (name, grid, mode) in [
        (
            "two-pass/default-grid",
            SearchGrid::default(),
            SearchMode::TwoPass,
        ),
        ("full/4-alphas", small_full, SearchMode::Full),
    ] {
        group.bench_function(name, |b| {
            b.iter(|| grid_search(&model, black_box(raw), labels, &grid, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    cache_path,
    crossmodal_path,
    training_step,
    fastica,
    search
);
criterion_main!(benches);
