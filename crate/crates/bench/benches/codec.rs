use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use prepserve::wire::{decode_frame, encode_frame, ElementResult, Message};
use prepserve_bench::sample_batch;

fn frames(c: &mut Criterion) {
    let mut g = c.benchmark_group("frame");
    for payload in [64usize, 1024] {
        let msg = Message::ElementResult(ElementResult::Batch(sample_batch(32, payload)));
        for compress in [false, true] {
            let frame = encode_frame(&msg, 7, compress).unwrap();
            g.throughput(Throughput::Bytes((32 * payload) as u64));
            let id = format!("{payload}B/{}", if compress { "lz4" } else { "raw" });
            g.bench_with_input(BenchmarkId::new("encode", &id), &msg, |b, m| {
                b.iter(|| encode_frame(m, 7, compress).unwrap())
            });
            g.bench_with_input(BenchmarkId::new("decode", &id), &frame, |b, f| {
                b.iter(|| decode_frame(f).unwrap())
            });
        }
    }
    g.finish();
}

criterion_group!(benches, frames);
criterion_main!(benches);
