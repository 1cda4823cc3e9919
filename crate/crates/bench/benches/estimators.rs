use std::hint::black_box;
use std::sync::Arc;

use bdlab_core::{
    estimate_lhs, estimate_rhs, follmer_drift, optimize, parse_functional, AffineFeedback,
    BrownianStream, DriftForm, OptConfig, PolicyFamily, TimeGrid,
};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

fn stream(steps: usize, n: usize) -> BrownianStream {
    BrownianStream::new(Arc::new(TimeGrid::new(1.0, steps, &[]).unwrap()), 1, n, 42).unwrap()
}

fn brownian_paths(c: &mut Criterion) {
    let mut group = c.benchmark_group("brownian");
    for steps in [50, 200] {
        let s = stream(steps, 16_384);
        group.throughput(Throughput::Elements((16_384 * steps) as u64));
        group.bench_with_input(BenchmarkId::new("materialize", steps), &s, |b, s| {
            b.iter(|| black_box(s.materialize()))
        });
    }
    group.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let f = parse_functional("quadratic:c=0.25").unwrap();
    let s = stream(200, 16_384);
    let ou = AffineFeedback::ou(1, -1.0);
    c.bench_function("lhs_mc_quadratic_16k", |b| {
        b.iter(|| estimate_lhs(&f, &s).unwrap())
    });
    c.bench_function("rhs_ou_quadratic_16k", |b| {
        b.iter(|| estimate_rhs(&f, &ou, &s).unwrap())
    });
}

fn follmer(c: &mut Criterion) {
    let f = parse_functional("quadratic:c=0.25").unwrap();
    for form in [DriftForm::Ratio, DriftForm::Score] {
        c.bench_function(&format!("follmer_drift_{form:?}"), |b| {
            b.iter(|| follmer_drift(&f, black_box(0.5), black_box(&[0.3]), form).unwrap())
        });
    }
}

fn optimizer(c: &mut Criterion) {
    let f = parse_functional("linear:a=1").unwrap();
    let grid = Arc::new(TimeGrid::new(1.0, 50, &[]).unwrap());
    let family = PolicyFamily::parse("linear_feedback:pieces=4", 1, 1.0).unwrap();
    let config = OptConfig {
        iters: 10,
        batch: 256,
        heldout: 1024,
        eval_every: 10,
        ..OptConfig::default()
    };
    let mut group = c.benchmark_group("optimize");
    group.sample_size(10);
    group.bench_function("linear_feedback_10_iters", |b| {
        b.iter(|| optimize(&f, &family, grid.clone(), &config).unwrap())
    });
    group.finish();
}

criterion_group!(benches, brownian_paths, monte_carlo, follmer, optimizer);
criterion_main!(benches);
