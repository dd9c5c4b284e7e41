use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qexpand_bench::{corpus, test_benchmark};
use qexpand_core::dba::augment_database;
use qexpand_core::eval::{evaluate, Protocol};
use qexpand_core::{Expander, Method, QeConfig};

fn search(c: &mut Criterion) {
    let bench = test_benchmark(&corpus());
    let q = bench.queries.row(0).to_vec();
    let mut g = c.benchmark_group("search");
    for k in [10, 100] {
        g.bench_with_input(BenchmarkId::new("knn", k), &k, |b, &k| {
            b.iter(|| bench.database.knn(&q, k, &[]).unwrap())
        });
    }
    let queries: Vec<&[f32]> = bench.queries.rows().collect();
    g.bench_function("knn_batch", |b| {
        b.iter(|| bench.database.knn_batch(&queries, 100).unwrap())
    });
    g.finish();
}

fn classic(c: &mut Criterion) {
    let bench = test_benchmark(&corpus());
    let q = bench.queries.row(0).to_vec();
    let mut g = c.benchmark_group("expand");
    for cfg in [
        QeConfig::new(Method::Aqe, 8),
        QeConfig::new(Method::Aqewd, 8),
        QeConfig::alpha(8, 3.0),
        QeConfig::dqe(8, 0.1, 5),
    ] {
        let e = Expander::classic(cfg.clone()).unwrap();
        g.bench_function(cfg.label(), |b| b.iter(|| e.expand(&q, &bench.database, &[]).unwrap()));
    }
    g.finish();
}

fn pipeline(c: &mut Criterion) {
    let bench = test_benchmark(&corpus());
    let aqe = Expander::classic(QeConfig::new(Method::Aqe, 4)).unwrap();
    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    g.bench_function("evaluate_aqe", |b| {
        b.iter(|| evaluate(&bench, &aqe, &Protocol::reported(), 0).unwrap())
    });
    g.bench_function("augment_aqe_4", |b| {
        b.iter(|| augment_database(&bench.database, &aqe, 4).unwrap())
    });
    g.finish();
}

criterion_group!(benches, search, classic, pipeline);
criterion_main!(benches);
