//! Sequential vs parallel trial execution on one revert cell.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use x402_testbed::exec::ExecMode;
use x402_testbed::harness::attacks::{parties, run_revert_cell, Scenario};
use x402_testbed::harness::ExperimentConfig;
use x402_testbed::server::ExecutionPolicy;

fn revert_cell(c: &mut Criterion) {
    let parties = parties();
    let mut group = c.benchmark_group("revert_cell");
    group.sample_size(10);
    for trials in [1_000u64, 10_000] {
        group.throughput(Throughput::Elements(trials));
        for mode in [ExecMode::Sequential, ExecMode::Parallel] {
            let cfg = ExperimentConfig {
                exec: mode,
                ..ExperimentConfig::default()
            };
            let mut sc = Scenario::new(&cfg);
            sc.policy = ExecutionPolicy::Optimistic;
            sc.k = 3;
            sc.chain.p_reorg = 0.05;
            group.bench_with_input(BenchmarkId::new(format!("{mode:?}"), trials), &trials, |b, &n| {
                b.iter(|| run_revert_cell(&cfg, &parties, "bench", &sc, n, true).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, revert_cell);
criterion_main!(benches);
