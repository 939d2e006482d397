use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use memoattn_bench::gaussian_vectors;
use memoattn_core::index::exhaustive_query;
use memoattn_core::{AnnIndex, IndexConfig};

fn search(c: &mut Criterion) {
    let data = gaussian_vectors(10_000, 128, 1);
    let queries = gaussian_vectors(64, 128, 2);
    let mut index = AnnIndex::build(IndexConfig::new(128), &data).unwrap();
    let mut group = c.benchmark_group("search");
    for ef in [16, 64, 256] {
        index.set_ef_search(ef).unwrap();
        group.bench_with_input(BenchmarkId::new("hnsw", ef), &ef, |b, _| {
            let mut i = 0;
            b.iter(|| {
                i = (i + 1) % queries.len();
                index.query(&queries[i].1, 1).unwrap()
            })
        });
    }
    group.bench_function("exhaustive", |b| {
        let mut i = 0;
        b.iter(|| {
            i = (i + 1) % queries.len();
            exhaustive_query(data.iter().map(|(id, v)| (*id, v.as_slice())), &queries[i].1, 1).unwrap()
        })
    });
    group.finish();

    let mut build = c.benchmark_group("index-build");
    build.sample_size(10);
    let small = &data[..2000];
    build.bench_function("2000x128", |b| b.iter(|| AnnIndex::build(IndexConfig::new(128), small).unwrap()));
    build.finish();
}

criterion_group!(benches, search);
criterion_main!(benches);
