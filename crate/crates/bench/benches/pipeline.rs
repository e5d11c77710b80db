use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use palette_core::bundle::{build_bundle, fit_bundle};
use palette_core::fixtures::{golden_apis, golden_bundle, golden_traces};
use palette_core::pfa::CoarsenConfig;
use palette_core::sim::{simulate, SimConfig};
use palette_core::validate::{compare, Thresholds};

fn bench_build(c: &mut Criterion) {
    let traces = golden_traces(20, 42);
    c.bench_function("build_bundle/2000_traces", |b| {
        b.iter(|| {
            black_box(
                build_bundle(black_box(&traces), 10_000, 42, &CoarsenConfig::default()).unwrap(),
            )
        })
    });
}

fn bench_fit(c: &mut Criterion) {
    let traces = golden_traces(20, 42);
    let bundle = build_bundle(&traces, 10_000, 42, &CoarsenConfig::default()).unwrap();
    c.bench_function("fit_bundle/2000_traces", |b| {
        b.iter(|| black_box(fit_bundle(black_box(&bundle), black_box(&traces)).unwrap()))
    });
}

fn bench_simulate(c: &mut Criterion) {
    let (bundle, _, _) = golden_bundle(20, 42);
    let (root, ..) = golden_apis();
    let config = SimConfig::new(root, 5_000, 7);
    let mut group = c.benchmark_group("simulate");
    group.sample_size(10);
    group.bench_function("5000_requests", |b| {
        b.iter(|| black_box(simulate(black_box(&bundle), black_box(&config)).unwrap()))
    });
    group.finish();
}

fn bench_compare(c: &mut Criterion) {
    let (bundle, _, traces) = golden_bundle(20, 42);
    let (root, ..) = golden_apis();
    let out = simulate(&bundle, &SimConfig::new(root, 2_000, 7)).unwrap();
    let (synthetic, _) = palette_core::ingest::assemble_traces(out.spans);
    let mut group = c.benchmark_group("compare");
    group.sample_size(20);
    group.bench_function("2000_vs_2000_traces", |b| {
        b.iter(|| {
            black_box(compare(
                black_box(&traces),
                black_box(&synthetic),
                &Thresholds::default(),
            ))
        })
    });
    group.finish();
}

criterion_group!(benches, bench_build, bench_fit, bench_simulate, bench_compare);
criterion_main!(benches);
