use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qexpand_bench::{corpus, model, test_benchmark};
use qexpand_core::optim::Adam;
use qexpand_core::train::{draw_sample, train_step, TrainConfig, TrainSet};
use qexpand_core::WeightMode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn forward(c: &mut Criterion) {
    let bench = test_benchmark(&corpus());
    let m = model(0);
    let q = bench.queries.row(0).to_vec();
    let mut g = c.benchmark_group("lattqe_expand");
    for k in [8, 32, 64] {
        let rows = bench.database.knn(&q, k, &[]).unwrap().rows();
        let refs: Vec<&[f32]> = rows.iter().map(|&r| bench.database.row(r)).collect();
        g.bench_with_input(BenchmarkId::from_parameter(k), &refs, |b, refs| {
            b.iter(|| m.expand(&q, refs).unwrap())
        });
    }
    g.finish();
}

fn training(c: &mut Criterion) {
    let (emb, labels) = corpus().train_split().unwrap();
    let set = TrainSet::new(emb, labels, 64).unwrap();
    let cfg = TrainConfig {
        batch_size: 32,
        ..TrainConfig::default()
    };
    let pool: Vec<usize> = (0..set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch: Vec<_> = set.queries()[..cfg.batch_size]
        .iter()
        .map(|&q| draw_sample(&set, q, &pool, &mut rng, &cfg))
        .collect();
    let mut m = model(0);
    let mut adam = Adam::new(m.params());
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    g.bench_function("step_batch_32", |b| {
        b.iter(|| {
            let mut batch = batch.clone();
            train_step(
                &mut m,
                &mut adam,
                &set,
                &mut batch,
                &pool,
                &cfg,
                cfg.lr,
                WeightMode::Similarity,
            )
            .unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, forward, training);
criterion_main!(benches);
