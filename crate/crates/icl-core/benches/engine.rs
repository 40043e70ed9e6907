//! Criterion benches comparing the rayon data-parallel paths against the
//! sequential fallback, over the hot loops: batched kNN queries, candidate
//! selection, and the full synthetic evaluation pipeline.
//!
//! Run with `cargo bench -p icl-core`. The eval group drives identical work
//! through thread pools of 1 and N workers; the knn group compares the
//! parallel map helper against its always-sequential twin directly.

use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use icl_core::backend::SyntheticBackend;
use icl_core::embed::{knn, EmbeddingMatrix};
use icl_core::eval::{run_eval, EvalInputs, EvalOptions, Method};
use icl_core::fixture::{generate, SyntheticSpec};
use icl_core::par::{map_ordered, map_ordered_seq};
use icl_core::rank::RankConfig;
use icl_core::select::{select_dpp, select_topk, select_votek, SelectionConfig};

fn random_matrix(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = (0..n).map(|i| format!("v{i:05}")).collect();
    let vectors = (0..n)
        .map(|_| (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
        .collect();
    EmbeddingMatrix::build(ids, vectors).expect("valid matrix")
}

fn random_queries(count: usize, d: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
        .collect()
}

fn bench_knn_batch(c: &mut Criterion) {
    let index = random_matrix(2000, 64, 1);
    let queries = random_queries(200, 64, 2);
    let mut group = c.benchmark_group("knn_batch_200q_2000x64");
    group.bench_function("parallel", |b| {
        b.iter(|| {
            map_ordered(&queries, |q| knn(&index, q, 30).expect("knn").len())
                .iter()
                .sum::<usize>()
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            map_ordered_seq(&queries, |q| knn(&index, q, 30).expect("knn").len())
                .iter()
                .sum::<usize>()
        })
    });
    group.finish();
}

fn bench_selectors(c: &mut Criterion) {
    let index = random_matrix(500, 32, 3);
    let query = random_queries(1, 32, 4).pop().unwrap();
    let mut group = c.benchmark_group("selectors_500x32_m30");
    group.bench_function("topk", |b| {
        b.iter(|| select_topk(&index, &query, 30).expect("topk").len())
    });
    group.bench_function("votek", |b| {
        b.iter(|| {
            select_votek(&index, &query, 30, 15, 10.0)
                .expect("votek")
                .len()
        })
    });
    group.bench_function("dpp", |b| {
        b.iter(|| select_dpp(&index, &query, 30).expect("dpp").len())
    });
    group.finish();
}

fn bench_eval_pipeline(c: &mut Criterion) {
    let synth = generate(&SyntheticSpec {
        test_size: 100,
        ..SyntheticSpec::default()
    });
    let backend = SyntheticBackend::new(
        Arc::new(synth.pool_index.clone()),
        Arc::new(synth.test_index.clone()),
    );
    let selection = SelectionConfig::default();
    let rank = RankConfig::default();
    let options = EvalOptions::default();
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);

    let mut thread_counts = vec![1usize];
    if workers > 1 {
        thread_counts.push(workers);
    }
    let mut group = c.benchmark_group("run_eval_topk_mdl_100_samples");
    group.sample_size(10);
    for threads in thread_counts {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("bench pool");
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{threads}_threads")),
            &threads,
            |b, _| {
                b.iter(|| {
                    pool.install(|| {
                        let inputs = EvalInputs {
                            task: &synth.task,
                            pool: &synth.pool,
                            test: &synth.test,
                            pool_index: Some(&synth.pool_index),
                            test_index: Some(&synth.test_index),
                        };
                        run_eval(
                            &inputs,
                            &backend,
                            Method::TopKMdl,
                            &selection,
                            &rank,
                            1,
                            &options,
                        )
                        .expect("eval")
                        .accuracy
                    })
                })
            },
        );
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_knn_batch,
    bench_selectors,
    bench_eval_pipeline
);
criterion_main!(benches);
