use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use memoattn_bench::attention_layer;
use memoattn_core::tensor::{attention_full, attention_memoized, ApmRef};

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    group.sample_size(20);
    for l in [64, 128, 256] {
        let (w, x) = attention_layer(64, 4, l, l as u64);
        let (_, apms) = attention_full(&x, &w).unwrap();
        let views: Vec<ApmRef<'_>> = apms.iter().map(|a| a.view()).collect();
        group.bench_with_input(BenchmarkId::new("full", l), &l, |b, _| {
            b.iter(|| attention_full(&x, &w).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("memoized", l), &l, |b, _| {
            b.iter(|| attention_memoized(&x, &w, &views).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, attention);
criterion_main!(benches);
