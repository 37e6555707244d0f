use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use jumpflow::bsde::{solve_system, SolverOptions};
use jumpflow::harness::registry;
use jumpflow::par::with_threads;

fn backward_solve(c: &mut Criterion) {
    let problem = registry::build("nonmonotone1d", &Default::default()).unwrap();
    let bundle = problem.simulate(&[1.0], 20, 20_000, 1).unwrap();
    let options = SolverOptions::default();
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);

    let mut group = c.benchmark_group("backward_solve");
    group.sample_size(10);
    for (label, pool) in [("sequential", Some(1)), ("parallel", Some(threads))] {
        group.bench_function(BenchmarkId::new(label, threads), |b| {
            b.iter(|| with_threads(pool, || solve_system(&problem.driver, &bundle, None, &options).unwrap()))
        });
    }
    group.finish();
}

fn simulation(c: &mut Criterion) {
    let problem = registry::build("jumpmerton1d", &Default::default()).unwrap();
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mut group = c.benchmark_group("simulate_paths");
    group.sample_size(10);
    for (label, pool) in [("sequential", Some(1)), ("parallel", Some(threads))] {
        group.bench_function(BenchmarkId::new(label, threads), |b| {
            b.iter(|| with_threads(pool, || problem.simulate(&[1.0], 50, 20_000, 1).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, backward_solve, simulation);
criterion_main!(benches);
