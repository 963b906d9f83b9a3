use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use attmask_bench::{batch, dataset, desk, pair_and_optimizer};
use attmask_core::distill::{train_step, LossWeights, StepSettings};
use attmask_core::masking::{attmask_high, blockwise_mask, random_mask};
use attmask_core::tensor::{matmul, Tensor};
use attmask_core::{MaskPolicy, MaskStrategy, RngState};
use rand::Rng;

fn matmuls(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64usize, 128, 256] {
        let a = Tensor::<f32>::filled(&[n, n], 0.5);
        let b = Tensor::<f32>::filled(&[n, n], 0.25);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn masks(c: &mut Criterion) {
    let n = 64;
    let mut rng = RngState::new(0).stream("bench", 0);
    let attn: Vec<f32> = (0..n).map(|_| rng.random()).collect();
    let mut g = c.benchmark_group("mask");
    g.bench_function("random", |b| b.iter(|| random_mask(n, 0.4, &mut rng)));
    g.bench_function("block-wise", |b| {
        b.iter(|| blockwise_mask(n, 0.4, &mut rng).unwrap())
    });
    g.bench_function("attmask-high", |b| {
        b.iter(|| attmask_high(black_box(&attn), 0.4))
    });
    g.finish();
}

fn training_step(c: &mut Criterion) {
    let cfg = desk();
    let ds = dataset(16);
    let views = batch(&ds, 16);
    let policy = MaskPolicy {
        strategy: MaskStrategy::AttmaskHigh,
        ..cfg.masking.clone()
    };
    let settings = StepSettings {
        lr: 1e-4,
        weight_decay: 0.04,
        teacher_temp: 0.04,
        ema_alpha: 0.99,
    };
    let (mut pair, mut opt) = pair_and_optimizer(&cfg.model);
    let rng = RngState::new(3);
    let mut step = 0;
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("step-batch16", |b| {
        b.iter(|| {
            step += 1;
            train_step(
                &cfg.model,
                &mut pair,
                &mut opt,
                &views,
                &policy,
                &LossWeights::default(),
                &settings,
                &rng,
                step,
            )
            .unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, matmuls, masks, training_step);
criterion_main!(benches);
