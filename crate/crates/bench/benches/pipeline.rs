use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use emotag_core::augment::{oversample_indices, BalanceConfig};
use emotag_core::evaluate::{default_grid, evaluate, tune_thresholds, PredictionMatrix};
use emotag_core::netcore::{ModelConfig, ModelParams, Network, Pass};
use emotag_core::{EmbeddingMatrix, LabelVocabulary, ThresholdVector, NUM_LABELS};

fn network(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, Arc::new(EmbeddingMatrix::<f32>::random(5000, 300, 1)), 1).unwrap();
    let net = Network::new(params);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ids = Array2::from_shape_fn((32, 30), |_| rng.random_range(1..5000u32));
    let y = Array2::from_shape_fn((32, NUM_LABELS), |_| f32::from(u8::from(rng.random_bool(0.1))));

    c.bench_function("forward_infer_b32", |b| b.iter(|| net.forward(black_box(&ids), Pass::Infer).unwrap()));
    c.bench_function("forward_backward_b32", |b| {
        b.iter(|| {
            let mut r = ChaCha8Rng::seed_from_u64(3);
            let cache = net.forward(&ids, Pass::Train(&mut r)).unwrap();
            net.backward(&cache, y.view(), 1.0).unwrap()
        })
    });
}

fn fixture(n: usize) -> (Array2<f32>, Array2<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let y = Array2::from_shape_fn((n, NUM_LABELS), |_| u8::from(rng.random_bool(0.1)));
    let p = y.mapv(|t| (0.4 * t as f32 + rng.random_range(0.0..0.6f32)).min(1.0));
    (p, y)
}

fn metrics(c: &mut Criterion) {
    let (p, y) = fixture(5000);
    let vocab = LabelVocabulary::goemotions();
    let preds = PredictionMatrix::new(p.clone(), None).unwrap();
    let tau = ThresholdVector::uniform(0.5, NUM_LABELS).unwrap();
    c.bench_function("evaluate_5000x28", |b| {
        b.iter(|| evaluate(black_box(&preds), y.view(), &tau, &vocab).unwrap())
    });
    let grid = default_grid();
    c.bench_function("tune_thresholds_5000x28", |b| {
        b.iter(|| tune_thresholds(black_box(p.view()), y.view(), &grid).unwrap())
    });
}

fn balancing(c: &mut Criterion) {
    let (_, y) = fixture(5000);
    let cfg = BalanceConfig::default();
    c.bench_function("oversample_5000x28", |b| {
        b.iter_batched(|| y.clone(), |y| oversample_indices(&y, &cfg).unwrap(), BatchSize::LargeInput)
    });
}

criterion_group!(benches, network, metrics, balancing);
criterion_main!(benches);
