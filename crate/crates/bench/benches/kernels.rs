use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use upcl_bench::{batch, cost_matrix, unit_rows};
use upcl_core::assignment::solve_assignment;
use upcl_core::encoder::EncoderState;
use upcl_core::geometry::{gram_schmidt_extend, Generator, PrototypeSet};
use upcl_core::losses::{feat_loss, LossConfig, MarginMode};
use upcl_core::memory::herding_select;
use upcl_core::rng::seeded;

fn hungarian(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve_assignment");
    for (rows, cols) in [(10, 10), (20, 40), (50, 100)] {
        let cost = cost_matrix(rows, cols, 7);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{rows}x{cols}")),
            &cost,
            |b, cost| b.iter(|| solve_assignment(black_box(cost.view())).unwrap()),
        );
    }
    group.finish();
}

fn herding(c: &mut Criterion) {
    let mut group = c.benchmark_group("herding_select");
    for (n, m) in [(200, 20), (1000, 80)] {
        let feats = unit_rows(n, 32, 3);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{n}/{m}")),
            &feats,
            |b, feats| b.iter(|| herding_select(black_box(feats.view()), m).unwrap()),
        );
    }
    group.finish();
}

fn supcon(c: &mut Criterion) {
    let cfg = LossConfig {
        temperature: 0.1,
        margin: MarginMode::None,
        feat_weight_base: 0.5,
        task_index: 0,
    };
    let mut group = c.benchmark_group("feat_loss");
    for n in [64, 256] {
        let b = batch(n, 32, 10, 5);
        group.bench_with_input(BenchmarkId::from_parameter(n), &b, |bench, b| {
            bench.iter(|| feat_loss(black_box(b), &cfg).unwrap())
        });
    }
    group.finish();
}

fn encoder(c: &mut Criterion) {
    let enc = EncoderState::new(&[32, 64, 64, 32], &mut seeded(1)).unwrap();
    let inputs = unit_rows(64, 32, 2);
    let grad = unit_rows(64, 32, 4);
    c.bench_function("encoder_forward_64", |b| {
        b.iter(|| enc.forward(black_box(inputs.view())).unwrap())
    });
    let cache = enc.forward(inputs.view()).unwrap();
    c.bench_function("encoder_backward_64", |b| {
        b.iter(|| enc.backward(&cache, black_box(grad.view())).unwrap())
    });
}

fn gram_schmidt(c: &mut Criterion) {
    let base = gram_schmidt_extend(
        &PrototypeSet::empty(64, Generator::GramSchmidt),
        32,
        &mut seeded(0),
    )
    .unwrap();
    c.bench_function("gram_schmidt_extend_32+8_d64", |b| {
        b.iter(|| gram_schmidt_extend(black_box(&base), 8, &mut seeded(1)).unwrap())
    });
}

criterion_group!(kernels, hungarian, herding, supcon, encoder, gram_schmidt);
criterion_main!(kernels);
