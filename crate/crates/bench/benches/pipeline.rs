use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ctsls::estimator::{fit_ctsls, FitOptions};
use ctsls::km::km_censoring;
use ctsls::synthetic::leurgans_transform;
use ctsls_bench::simulated_sample;

fn bench_km(c: &mut Criterion) {
    let mut group = c.benchmark_group("km_censoring");
    for &n in &[1_000usize, 10_000] {
        let sample = simulated_sample(n, 0.25);
        group.bench_with_input(BenchmarkId::from_parameter(n), &sample, |b, s| {
            b.iter(|| km_censoring(s).unwrap())
        });
    }
    group.finish();
}

fn bench_transform(c: &mut Criterion) {
    let sample = simulated_sample(10_000, 0.25);
    let g = km_censoring(&sample).unwrap();
    c.bench_function("leurgans_transform_10000", |b| {
        b.iter(|| leurgans_transform(&sample, &g).unwrap())
    });
}

fn bench_fit(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit_ctsls");
    group.sample_size(10);
    for &n in &[1_000usize, 5_000] {
        let sample = simulated_sample(n, 0.25);
        group.bench_with_input(BenchmarkId::from_parameter(n), &sample, |b, s| {
            b.iter(|| fit_ctsls(s, &FitOptions::default()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_km, bench_transform, bench_fit);
criterion_main!(benches);
