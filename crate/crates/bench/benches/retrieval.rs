use amr_core::corpus::{generate_synthetic, GenConfig};
use amr_core::eval::{evaluate_run, search, EmbeddingMatrix, GainMap, MetricSpec};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn random_matrix(prefix: &str, n: usize, dim: usize, rng: &mut ChaCha8Rng) -> EmbeddingMatrix {
    let ids = (0..n).map(|i| format!("{prefix}{i}")).collect();
    let data = (0..n * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    EmbeddingMatrix::new(ids, dim, data).unwrap()
}

fn retrieval(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let queries = random_matrix("q", 64, 64, &mut rng);
    let mut group = c.benchmark_group("search_top100");
    for n in [2_000, 20_000] {
        let items = random_matrix("i", n, 64, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &items, |b, items| {
            b.iter(|| search(black_box(&queries), items, 100, "bench").unwrap())
        });
    }
    group.finish();

    let data = generate_synthetic(&GenConfig::default(), 0).unwrap();
    let q_ids: Vec<String> = data.queries.iter().map(|q| q.id.clone()).collect();
    let i_ids: Vec<String> = data.items.iter().map(|i| i.id.clone()).collect();
    let q = EmbeddingMatrix::new(q_ids.clone(), 16, (0..q_ids.len() * 16).map(|_| rng.random()).collect()).unwrap();
    let i = EmbeddingMatrix::new(i_ids.clone(), 16, (0..i_ids.len() * 16).map(|_| rng.random()).collect()).unwrap();
    let run = search(&q, &i, 100, "bench").unwrap();
    let specs = [MetricSpec::Recall(10), MetricSpec::Recall(100), MetricSpec::Ndcg(10)];
    c.bench_function("evaluate_600_queries", |b| {
        b.iter(|| evaluate_run(black_box(&run), &data.qrels, &specs, &GainMap::esci()).unwrap())
    });
}

criterion_group!(benches, retrieval);
criterion_main!(benches);
