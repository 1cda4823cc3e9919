use std::hint::black_box;

use bdlab_core::{
    ehc_check, estimate_lhs_quadrature, lsi_check, parse_field, parse_functional,
    GaussianQuadrature,
};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn rules(c: &mut Criterion) {
    let mut group = c.benchmark_group("gauss_hermite_build");
    for (dim, order) in [(1, 64), (2, 32), (3, 32)] {
        group.bench_with_input(
            BenchmarkId::new(format!("d{dim}"), order),
            &(dim, order),
            |b, &(d, o)| b.iter(|| GaussianQuadrature::new(black_box(d), black_box(o)).unwrap()),
        );
    }
    group.finish();
}

fn integrals(c: &mut Criterion) {
    for d in [1, 2, 3] {
        let f = parse_functional(&format!("quadratic:c=0.25,d={d}")).unwrap();
        c.bench_function(&format!("lhs_quadrature_quadratic_d{d}"), |b| {
            b.iter(|| estimate_lhs_quadrature(&f).unwrap())
        });
    }
}

fn ou_checks(c: &mut Criterion) {
    let q = GaussianQuadrature::standard(1).unwrap();
    let sin = parse_field("sin").unwrap();
    let quad = parse_field("quadratic:c=0.25").unwrap();
    c.bench_function("ehc_sin_t1", |b| {
        b.iter(|| ehc_check(&sin, black_box(1.0), &q).unwrap())
    });
    c.bench_function("ehc_quadratic_t1", |b| {
        b.iter(|| ehc_check(&quad, black_box(1.0), &q).unwrap())
    });
    c.bench_function("lsi_sin", |b| b.iter(|| lsi_check(&sin, &q).unwrap()));
}

criterion_group!(benches, rules, integrals, ou_checks);
criterion_main!(benches);
