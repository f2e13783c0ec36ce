use criterion::{criterion_group, criterion_main, Criterion};
use prepserve::worker::SlidingWindowCache;
use prepserve_bench::sample_batch;

fn window(c: &mut Criterion) {
    let batch = sample_batch(8, 32);
    c.bench_function("window_4_readers", |b| {
        b.iter(|| {
            let mut cache = SlidingWindowCache::new(16);
            for client in 0..4 {
                cache.register(client);
            }
            for _ in 0..256 {
                cache.push(batch.clone());
                for client in 0..4 {
                    cache.read(client);
                }
            }
            cache.stats()
        })
    });
}

criterion_group!(benches, window);
criterion_main!(benches);
