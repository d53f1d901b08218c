use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use jbsde_bench::Fixture;
use jbsde_core::bsde::{bsde_residual, solve_backward, SolverOptions};
use jbsde_core::ipde::{operator_b, operator_k};
use jbsde_core::sde::{simulate_forward, simulate_with_streams, Streams};
use std::hint::black_box;

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulate_forward");
    g.sample_size(10);
    for k in [2u32, 8, 32] {
        let f = Fixture::linear(0.0, k, 50);
        g.bench_with_input(BenchmarkId::from_parameter(k), &f, |b, f| {
            b.iter(|| simulate_forward(&f.model, &f.measure, f.k, &f.grid, &f.init, 10_000, 1).unwrap())
        });
    }
    g.finish();
}

fn backward(c: &mut Criterion) {
    let mut g = c.benchmark_group("solve_backward");
    g.sample_size(10);
    for (name, f) in [
        ("driver-free", Fixture::linear(0.0, 8, 20)),
        ("linear-driver", Fixture::linear(0.5, 8, 20)),
        ("nonlocal-driver", Fixture::nonlocal(8, 20)),
    ] {
        let ens = simulate_forward(&f.model, &f.measure, f.k, &f.grid, &f.init, 10_000, 1).unwrap();
        for cv in [false, true] {
            let opts = SolverOptions {
                control_variates: cv,
                ..SolverOptions::default()
            };
            let id = BenchmarkId::new(name, if cv { "cv" } else { "plain" });
            g.bench_function(id, |b| b.iter(|| solve_backward(&f.model, &f.measure, f.k, &f.grid, &ens, &opts).unwrap()));
        }
    }
    g.finish();
}

fn residual(c: &mut Criterion) {
    let f = Fixture::linear(0.5, 8, 20);
    let ens = simulate_forward(&f.model, &f.measure, f.k, &f.grid, &f.init, 10_000, 1).unwrap();
    let sol = solve_backward(&f.model, &f.measure, f.k, &f.grid, &ens, &SolverOptions::default()).unwrap();
    let fresh = simulate_with_streams(&f.model, &f.measure, f.k, &f.grid, &f.init, 10_000, 1, Streams::FRESH).unwrap();
    let mut g = c.benchmark_group("bsde_residual");
    g.sample_size(10);
    g.bench_function("linear-driver", |b| b.iter(|| bsde_residual(&sol, &f.model, &f.measure, &fresh).unwrap()));
    g.finish();
}

fn operators(c: &mut Criterion) {
    let f = Fixture::nonlocal(8, 20);
    let ens = simulate_forward(&f.model, &f.measure, f.k, &f.grid, &f.init, 5_000, 1).unwrap();
    let sol = solve_backward(&f.model, &f.measure, f.k, &f.grid, &ens, &SolverOptions::default()).unwrap();
    c.bench_function("operator_b", |b| {
        b.iter(|| operator_b(&sol, &f.model, &f.measure, 0, 0.5, black_box(&[2.0]), f.k).unwrap())
    });
    c.bench_function("operator_k", |b| {
        b.iter(|| operator_k(&sol, &f.model, &f.measure, 0, 0.5, black_box(&[2.0]), f.k, 1e-2).unwrap())
    });
}

criterion_group!(benches, forward, backward, residual, operators);
criterion_main!(benches);
