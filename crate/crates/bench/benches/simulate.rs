use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use qchain_bench::mixed_chain;
use qchain_core::{simulate, SimConfig};

fn replication(c: &mut Criterion) {
    let (model, assignment) = mixed_chain(3, 2);
    let config = SimConfig {
        seed: 1,
        jobs_per_task: 5_000,
        replications: 2,
        ..SimConfig::default()
    };
    let mut group = c.benchmark_group("simulate");
    group.sample_size(10);
    group.bench_function("mixed_3x2", |b| {
        b.iter(|| simulate(black_box(&model), &assignment, &config).unwrap())
    });
    group.finish();
}

criterion_group!(benches, replication);
criterion_main!(benches);
