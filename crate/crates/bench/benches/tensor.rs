use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use synthsight_bench::{random, rng};
use synthsight_core::tensorcore::softmax_rows;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16usize, 64, 256] {
        let mut r = rng(n as u64);
        let a = random(n, n, &mut r);
        let b = random(n, n, &mut r);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn softmax(c: &mut Criterion) {
    let x = random(64, 512, &mut rng(1));
    c.bench_function("softmax_rows 64x512", |b| {
        b.iter(|| softmax_rows(black_box(&x)))
    });
}

criterion_group!(benches, matmul, softmax);
criterion_main!(benches);
