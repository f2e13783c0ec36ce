use criterion::{criterion_group, criterion_main, Criterion};
use prepserve::pipeline::{optimize, ElementStream, FunctionRegistry, Pipeline};

fn pipelines(c: &mut Criterion) {
    let reg = FunctionRegistry::default();
    let graph = Pipeline::range(0, 4096)
        .map("identity")
        .filter("always_true")
        .shuffle(256, 3)
        .batch(32)
        .build(&reg)
        .unwrap();
    let optimized = optimize(&graph);
    let mut g = c.benchmark_group("range_4096");
    g.bench_function("raw", |b| {
        b.iter(|| {
            ElementStream::for_range_graph(&graph, 1, &reg)
                .unwrap()
                .collect_all()
                .unwrap()
        })
    });
    g.bench_function("optimized", |b| {
        b.iter(|| {
            ElementStream::for_range_graph(&optimized, 1, &reg)
                .unwrap()
                .collect_all()
                .unwrap()
        })
    });
    g.finish();
    c.bench_function("optimize", |b| b.iter(|| optimize(&graph)));
}

criterion_group!(benches, pipelines);
criterion_main!(benches);
