use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fa_bench::{artifact, frame};
use fa_core::boundary::{analyze, estimate_boundary, tile, BoundaryOptions};
use fa_core::classifier::apply_threshold;
use fa_core::evaluation::reconcile_rates;
use fa_core::synthkit::{generate_frame, SynthParams};
use fa_core::{Axis, DistalDirection, StripClassification};

fn inference(c: &mut Criterion) {
    let image = frame();
    let mut group = c.benchmark_group("predict");
    group.sample_size(10);
    for (arch, side) in [
        ("residual-tiny", 224),
        ("residual-18", 224),
        ("residual-34", 96),
        ("residual-34", 224),
    ] {
        let model = artifact(arch, side);
        group.bench_function(format!("{arch}@{side}"), |b| {
            b.iter(|| model.predict(black_box(&image)))
        });
    }
    group.finish();
}

fn boundary(c: &mut Criterion) {
    let image = frame();
    c.bench_function("tile 1440px / 100", |b| {
        b.iter(|| tile(black_box(&image), 100, Axis::Horizontal).unwrap())
    });

    let strips: Vec<StripClassification> = (0..15u32)
        .map(|i| {
            let p = if i % 4 == 3 { 0.1 } else { 0.9 };
            StripClassification {
                index: i as usize,
                x0: i * 100,
                x1: ((i + 1) * 100).min(1440),
                probability: p,
                label: apply_threshold(p, 0.8),
            }
        })
        .collect();
    c.bench_function("estimate_boundary 15 strips", |b| {
        b.iter(|| estimate_boundary(black_box(&strips), DistalDirection::IncreasingX, 0.8))
    });

    let model = artifact("residual-34", 96);
    let mut group = c.benchmark_group("analyze");
    group.sample_size(10);
    group.bench_function("residual-34@96 1440x1080", |b| {
        b.iter(|| analyze(&model, black_box(&image), &BoundaryOptions::default()))
    });
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    c.bench_function("reconcile with total hint", |b| {
        b.iter(|| reconcile_rates(68.8, 91.7, 80.0, 78.6, Some(30), Some(16)).unwrap())
    });
    c.bench_function("reconcile up to 200 frames", |b| {
        b.iter(|| reconcile_rates(black_box(68.8), 91.7, 80.0, 78.6, None, None).unwrap())
    });
}

fn synthesis(c: &mut Criterion) {
    let mut group = c.benchmark_group("synth");
    group.sample_size(10);
    group.bench_function("frame 1440x1080", |b| {
        b.iter(|| generate_frame(black_box(&SynthParams::default())).unwrap())
    });
    group.finish();
}

criterion_group!(benches, inference, boundary, evaluation, synthesis);
criterion_main!(benches);
