use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use fewframe_bench::{clips, encoders, videos};
use fewframe_core::encoders::Model;
use fewframe_core::sampling::SamplerSpec;

/// Teacher (all frames) against students at a tenth and a quarter of them.
fn forward(c: &mut Criterion) {
    let data = videos(64, 40);
    let mut group = c.benchmark_group("forward");
    group.throughput(Throughput::Elements(data.len() as u64));
    for (name, enc) in encoders() {
        for k in [4, 10, 40] {
            let model = Model::new(enc.for_frames(k, 40), 1).unwrap();
            let batch = clips(&data, Some(&SamplerSpec::uniform(k)));
            group.bench_with_input(BenchmarkId::new(name, k), &batch, |b, batch| {
                b.iter(|| model.predict_batch(batch).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, forward);
criterion_main!(benches);
