use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use semrank_bench::mixture_store;
use semrank_core::rqcodec::train::{rq_kmeans_init, train_epoch};
use semrank_core::rqcodec::{encode_all, quantize};
use semrank_core::sid::build_registry;
use semrank_core::TrainConfig;

fn config() -> TrainConfig {
    TrainConfig {
        codebook_sizes: vec![64, 64, 64],
        batch_size: 256,
        ..Default::default()
    }
}

fn bench_quantizer(c: &mut Criterion) {
    let store = mixture_store(4096, 32);
    let cfg = config();
    let stack = rq_kmeans_init(&store, &cfg).unwrap();
    let first = store.matrix().row(0).to_vec();

    let mut g = c.benchmark_group("quantizer");
    g.bench_function("quantize_one", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.iter(|| quantize(&first, &stack, 1, &mut rng).unwrap())
    });
    g.throughput(Throughput::Elements(store.len() as u64));
    g.bench_function("encode_all_4096", |b| b.iter(|| encode_all(&store, &stack).unwrap()));
    g.bench_function("build_registry_4096", |b| {
        b.iter(|| build_registry(&store, &stack, 1, 7).unwrap())
    });
    g.sample_size(10);
    g.bench_function("train_epoch_4096", |b| {
        b.iter_batched(
            || stack.clone(),
            |mut s| train_epoch(store.matrix(), &mut s, &cfg, 0).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, bench_quantizer);
criterion_main!(benches);
