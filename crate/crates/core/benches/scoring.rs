//! Each workload runs inside a one-thread rayon pool and inside the default
//! pool. Build with `--no-default-features` to time the plain sequential path.

use std::hint::black_box;

use abet_core::analysis::ood_proximal_accuracy;
use abet_core::dataset_io::FeatureDump;
use abet_core::metrics::{auroc_exact, build_histograms, Normalizer, Positive, ScoredSet};
use abet_core::model::{self, init_params, names, HeadKind, ModelConfig};
use abet_core::numerics::Matrix;
use abet_core::scorers::{fit_scorer, score_batch, PosthocConfig, ScorerId, Transform, TransformContext};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let all = rayon::ThreadPoolBuilder::new().build().unwrap();
    vec![("1-thread", one), ("all-threads", all)]
}

struct Fixture {
    params: model::ModelParams,
    inputs: Matrix,
    train: FeatureDump,
    test: FeatureDump,
    scores: ScoredSet,
}

fn fixture() -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cfg = ModelConfig {
        input_dim: 32,
        hidden_sizes: vec![128],
        penultimate_dim: 64,
        num_classes: 10,
        head: HeadKind::Cosine,
        seed: 3,
    };
    let params = init_params(&cfg).unwrap();
    let mut train = model::extract(&params, &random(&mut rng, 5000, 32)).unwrap();
    train.labels = Some((0..5000).map(|i| (i % 10) as u32).collect());
    let inputs = random(&mut rng, 2000, 32);
    let test = model::extract(&params, &inputs).unwrap();
    let normal = |rng: &mut ChaCha8Rng, shift: f64| -> Vec<f64> { (0..100_000).map(|_| rng.random_range(0.0..1.0) + shift).collect() };
    let scores = ScoredSet::new(normal(&mut rng, 0.0), normal(&mut rng, 0.3)).unwrap();
    Fixture {
        params,
        inputs,
        train,
        test,
        scores,
    }
}

fn bench(c: &mut Criterion) {
    let fx = fixture();
    let cfg = PosthocConfig::default();
    let knn = fit_scorer(ScorerId::Knn, &fx.train, &cfg).unwrap();
    let maha = fit_scorer(ScorerId::Mahalanobis, &fx.train, &cfg).unwrap();
    let ctx = TransformContext::default();
    let train_pen = fx.train.matrix(names::PENULTIMATE).unwrap();
    let test_pen = fx.test.matrix(names::PENULTIMATE).unwrap();
    let correct: Vec<bool> = (0..train_pen.rows()).map(|i| i % 7 != 0).collect();

    let mut g = c.benchmark_group("scoring");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new("knn_2000x5000", name), |b| {
            b.iter(|| pool.install(|| score_batch(ScorerId::Knn, black_box(&fx.test), &knn, &cfg, &Transform::None, &ctx).unwrap()))
        });
        g.bench_function(BenchmarkId::new("mahalanobis_2000", name), |b| {
            b.iter(|| pool.install(|| score_batch(ScorerId::Mahalanobis, black_box(&fx.test), &maha, &cfg, &Transform::None, &ctx).unwrap()))
        });
        g.bench_function(BenchmarkId::new("abet_2000", name), |b| {
            b.iter(|| pool.install(|| score_batch(ScorerId::Abet, black_box(&fx.test), &Default::default(), &cfg, &Transform::None, &ctx).unwrap()))
        });
        g.bench_function(BenchmarkId::new("forward_2000", name), |b| {
            b.iter(|| pool.install(|| model::extract(&fx.params, black_box(&fx.inputs)).unwrap()))
        });
        g.bench_function(BenchmarkId::new("nearest_neighbor_2000x5000", name), |b| {
            b.iter(|| pool.install(|| ood_proximal_accuracy(&train_pen, &correct, black_box(&test_pen)).unwrap()))
        });
        g.bench_function(BenchmarkId::new("auroc_exact_1e5", name), |b| {
            b.iter(|| pool.install(|| auroc_exact(black_box(&fx.scores), Positive::Id)))
        });
        g.bench_function(BenchmarkId::new("histograms_1e5", name), |b| {
            b.iter(|| pool.install(|| build_histograms(black_box(&fx.scores), Normalizer::MinMax, 100).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
