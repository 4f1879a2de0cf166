use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use specderef::harness::{run_scenario, ExperimentConfig, Scenario};
use specderef::par::Execution;

fn scenarios(c: &mut Criterion) {
    let mut group = c.benchmark_group("execution");
    group.sample_size(10);
    for scenario in [Scenario::AddrTranslate, Scenario::SyscallSweep] {
        for exec in [Execution::Sequential, Execution::Parallel] {
            let mut cfg = ExperimentConfig::new(scenario);
            cfg.repetitions = 16;
            cfg.execution = exec;
            group.bench_with_input(BenchmarkId::new(scenario.as_str(), format!("{exec:?}")), &cfg, |b, cfg| {
                b.iter(|| run_scenario(cfg).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, scenarios);
criterion_main!(benches);
