use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use promptseg::attention::{relu_linear_attention_fast, relu_linear_attention_quadratic};
use promptseg::backbone::ModelConfig;
use promptseg::model::Model;
use promptseg::rng::Rng;
use promptseg::tensor::Tensor;

fn tokens(rng: &mut Rng, n: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[n, d], |_| rng.next_f32() * 2.0 - 1.0)
}

fn bench_attention_forms(c: &mut Criterion) {
    let mut group = c.benchmark_group("relu_linear_attention");
    group.sample_size(10);
    let d = 32;
    for n in [256usize, 1024] {
        let mut rng = Rng::new(7);
        let q = tokens(&mut rng, n, d);
        let k = tokens(&mut rng, n, d);
        let v = tokens(&mut rng, n, d);
        group.bench_with_input(BenchmarkId::new("fast", n), &n, |b, _| {
            b.iter(|| relu_linear_attention_fast(&q, &k, &v, 1e-6).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("quadratic", n), &n, |b, _| {
            b.iter(|| relu_linear_attention_quadratic(&q, &k, &v, 1e-6).unwrap())
        });
    }
    group.finish();
}

fn bench_encoder_forward(c: &mut Criterion) {
    let model = Model::new(ModelConfig::desk(), 0).unwrap();
    let mut rng = Rng::new(3);
    let image = Tensor::from_fn(&[3, 128, 128], |_| rng.next_f32());
    let mut group = c.benchmark_group("encoder");
    group.sample_size(10);
    group.bench_function("desk_128_forward", |b| {
        b.iter(|| model.embed_image(&image).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_attention_forms, bench_encoder_forward);
criterion_main!(benches);
