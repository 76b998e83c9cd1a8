use std::sync::Arc;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ensemserve_bench::instance;
use ensemserve_core::runtime::{Accumulator, CombinationRule, FakeZeroBackend, PoolOptions, SampleStore, WorkerPool};
use ensemserve_core::AllocationMatrix;

fn accumulate(c: &mut Criterion) {
    let mut group = c.benchmark_group("accumulator");
    let (nb, width, models, seg) = (4096, 100, 4, 128);
    let blocks: Vec<Vec<f32>> = (0..nb / seg).map(|s| vec![s as f32; seg * width]).collect();
    group.throughput(Throughput::Elements((nb * models) as u64));
    for rule in [CombinationRule::Averaging, CombinationRule::MajorityVote] {
        group.bench_function(rule.name(), |b| {
            b.iter(|| {
                let mut acc = Accumulator::new(nb, width, models, seg, rule.clone()).unwrap();
                // reverse model order exercises the pending path
                for m in (0..models).rev() {
                    for (s, block) in blocks.iter().enumerate() {
                        acc.accept(s, m, block.clone()).unwrap();
                    }
                }
                acc.finish().unwrap()
            })
        });
    }
    group.finish();
}

/// Pipeline overhead with instant predictors.
fn fake_zero_pool(c: &mut Criterion) {
    let mut group = c.benchmark_group("pool_fake_zero");
    group.measurement_time(Duration::from_secs(5)).sample_size(20);
    let cluster = Arc::new(instance(4, 4));
    let matrix = AllocationMatrix::from_rows(&[
        vec![0, 0, 0, 0],
        vec![32, 0, 0, 8],
        vec![0, 32, 0, 8],
        vec![0, 0, 32, 0],
        vec![8, 0, 0, 32],
    ])
    .unwrap();
    let mut pool = WorkerPool::build(&matrix, Arc::clone(&cluster), Arc::new(FakeZeroBackend), PoolOptions::default())
        .unwrap();
    for nb in [1024, 16384] {
        let store = Arc::new(SampleStore::random(nb, cluster.input_width, 0));
        group.throughput(Throughput::Elements(nb as u64));
        group.bench_with_input(BenchmarkId::from_parameter(nb), &store, |b, store| {
            b.iter(|| pool.run(Arc::clone(store), &CombinationRule::Averaging).unwrap())
        });
    }
    group.finish();
    pool.shutdown();
}

criterion_group!(benches, accumulate, fake_zero_pool);
criterion_main!(benches);
