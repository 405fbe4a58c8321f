use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use groupsync_bench::{instance, prior_draws, square};
use groupsync_core::{
    information_bundle, iterate_once, polar_factor, spectral_init, special_polar_factor,
};

fn polar(c: &mut Criterion) {
    let mut g = c.benchmark_group("polar");
    for d in [2, 3, 5, 10] {
        let x = square(d);
        g.bench_with_input(BenchmarkId::new("orthogonal", d), &x, |b, x| {
            b.iter(|| polar_factor(black_box(x)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("rotation", d), &x, |b, x| {
            b.iter(|| special_polar_factor(black_box(x)).unwrap())
        });
    }
    g.finish();
}

fn pipeline(c: &mut Criterion) {
    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    for n in [200, 1000] {
        let inst = instance(n, 3);
        let z = spectral_init(&inst).unwrap();
        g.bench_with_input(BenchmarkId::new("spectral_init", n), &inst, |b, inst| {
            b.iter(|| spectral_init(black_box(inst)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("iterate_once", n), &inst, |b, inst| {
            b.iter(|| iterate_once(black_box(inst), black_box(&z)))
        });
    }
    g.finish();
}

fn information(c: &mut Criterion) {
    let mut g = c.benchmark_group("information_bundle");
    for d in [2, 3, 4] {
        let (r, rp) = prior_draws(d);
        g.bench_function(BenchmarkId::from_parameter(d), |b| {
            b.iter(|| information_bundle(100, 0.5, 1.0, black_box(&r), black_box(&rp)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, polar, pipeline, information);
criterion_main!(benches);
