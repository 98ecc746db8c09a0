use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flowdirect::flow::sample_batch;
use flowdirect::guidance::reward_field;
use flowdirect::softmax::softmax;
use flowdirect::stream::stream;
use flowdirect::{Dataset, GaussianMixture, GuidanceField, Mode, SamplerConfig};
use rand::Rng;

const DIM: usize = 2;

fn dataset(n: usize) -> Dataset {
    let model = GaussianMixture::standard_normal(DIM);
    let mut rng = stream(1, 0, 0);
    let points = model.sample(&mut rng, n);
    let rewards: Vec<f64> = points.iter().map(|p| p[0]).collect();
    Dataset::from_points(points, &rewards, 0).unwrap()
}

fn bench_reward_field(c: &mut Criterion) {
    let mut group = c.benchmark_group("reward_field");
    let x = [0.3, -0.2];
    let prediction = [0.5, -0.3];
    for n in [256, 1024, 4096] {
        let ds = dataset(n);
        group.bench_with_input(BenchmarkId::new("exact", n), &ds, |b, ds| {
            let mut rng = stream(2, 0, 0);
            b.iter(|| reward_field(ds, black_box(&x), 0.5, Mode::Exact, &mut rng, None).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("practical", n), &ds, |b, ds| {
            let mut rng = stream(2, 0, 0);
            b.iter(|| reward_field(ds, black_box(&x), 0.5, Mode::Practical, &mut rng, Some(&prediction)).unwrap())
        });
    }
    group.finish();
}

fn bench_sample_batch(c: &mut Criterion) {
    let mut group = c.benchmark_group("sample_batch");
    group.sample_size(10);
    let model = GaussianMixture::standard_normal(DIM);
    let config = SamplerConfig::new(50, 0.0, 3);
    group.bench_function("unguided_64", |b| {
        b.iter(|| sample_batch(&model, None, &config, 64, 0).unwrap())
    });
    let field = GuidanceField::reward_tilt(dataset(256), Mode::Exact, 4).unwrap();
    group.bench_function("guided_exact_64_by_256", |b| {
        b.iter(|| sample_batch(&model, Some(&field), &config, 64, 0).unwrap())
    });
    group.finish();
}

fn bench_softmax(c: &mut Criterion) {
    let mut rng = stream(5, 0, 0);
    let logits: Vec<f64> = (0..4096).map(|_| rng.random_range(-50.0..50.0)).collect();
    c.bench_function("softmax_4096", |b| b.iter(|| softmax(black_box(&logits))));
}

criterion_group!(benches, bench_reward_field, bench_sample_batch, bench_softmax);
criterion_main!(benches);
