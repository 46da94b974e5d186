//! Sequential versus pooled execution of independent runs.
//!
//! On a single-core machine the two should be within noise of each other;
//! the pooled variant only pulls ahead when rayon has more than one thread.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use aoii_lab::chain::ternary_source;
use aoii_lab::par::Execution;
use aoii_lab::policy::{calibrate_threshold, mean_rate, PolicyKind};
use aoii_lab::{Estimator, RunConfig};

const SEEDS: [u64; 8] = [1, 2, 3, 4, 5, 6, 7, 8];

fn modes() -> [(&'static str, Execution); 2] {
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn seed_fan_out(c: &mut Criterion) {
    let p = ternary_source();
    let cfg = RunConfig { horizon: 20_000, ..RunConfig::default() };
    let policy = PolicyKind::Random { alpha: 0.2 };
    let mut group = c.benchmark_group("mean_rate_8_seeds");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| mean_rate(&policy, &p, &cfg, &SEEDS, exec).unwrap())
        });
    }
    group.finish();
}

fn threshold_calibration(c: &mut Criterion) {
    let p = ternary_source();
    let cfg = RunConfig { horizon: 5_000, ..RunConfig::default() };
    let est = Estimator::map();
    let mut group = c.benchmark_group("calibrate_threshold");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| calibrate_threshold(&p, &est, 0.2, &cfg, &SEEDS[..3], exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, seed_fan_out, threshold_calibration);
criterion_main!(benches);
