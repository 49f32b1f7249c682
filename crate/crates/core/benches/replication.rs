use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use truncox::inference::{bootstrap, BootstrapOptions};
use truncox::rng::{stream, Purpose};
use truncox::simulation::{sample_observed, SimulationScenario, StudyOptions};
use truncox::{run_study, EMConfig, Estimator, ExecMode};

fn study(c: &mut Criterion) {
    let mut sc = SimulationScenario::table1(1.0, 100, 8, 7);
    sc.pilot_size = 20_000;
    sc.estimators = vec![Estimator::Em, Estimator::Standard];
    let mut group = c.benchmark_group("study_8_reps");
    group.sample_size(10);
    for mode in [ExecMode::Sequential, ExecMode::Parallel] {
        let mut opts = StudyOptions::from_scenario(&sc);
        opts.exec = mode;
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &opts, |b, o| {
            b.iter(|| run_study(&sc, o).unwrap())
        });
    }
    group.finish();
}

fn em_bootstrap(c: &mut Criterion) {
    let g = SimulationScenario::table1(1.0, 100, 1, 7).generator().unwrap();
    let ds = sample_observed(&g, 100, &mut stream(7, 0, Purpose::Sample)).unwrap().dataset;
    let mut group = c.benchmark_group("em_bootstrap_20");
    group.sample_size(10);
    for mode in [ExecMode::Sequential, ExecMode::Parallel] {
        let opts = BootstrapOptions { em: EMConfig::default(), exec: mode };
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &opts, |b, o| {
            b.iter(|| bootstrap(&ds, Estimator::Em, 20, 3, o).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, study, em_bootstrap);
criterion_main!(benches);
