use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tracekit::exec::Parallelism;
use tracekit::experiment::run_matrix;
use tracekit::scoring::ScorerSpec;
use tracekit::synth::{synthetic_dataset, SyntheticSpec};

fn seed_sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("run_matrix");
    group.sample_size(10);
    let dataset = synthetic_dataset(&SyntheticSpec::new("bench", 100, 300, 7));
    let seeds: Vec<u64> = (1..=10).collect();
    for (label, mode) in [
        ("sequential", Parallelism::Sequential),
        ("parallel", Parallelism::Parallel),
    ] {
        group.bench_with_input(BenchmarkId::new(label, seeds.len()), &seeds, |b, seeds| {
            b.iter(|| {
                run_matrix(
                    &dataset,
                    "trace",
                    &[ScorerSpec::vsm()],
                    seeds,
                    [0.35, 0.10, 0.55],
                    0.5,
                    mode,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, seed_sweep);
criterion_main!(benches);
