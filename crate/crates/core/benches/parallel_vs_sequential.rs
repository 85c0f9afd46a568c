//! Row-parallel kernels on one thread versus the full pool.
//!
//! Build with `--no-default-features` to time the sequential fallback itself;
//! there both arms run on the calling thread.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mvmrp::data::expand_augmented;
use mvmrp::design::build_designs;
use mvmrp::formula::parse_formula;
use mvmrp::par::with_jobs;
use mvmrp::sim::{generate_superpoll, GeneratorSpec, DEFAULT_FORMULA};
use mvmrp::vi::{compute_weights, fit, initial_state, SolverConfig};

/// One thread, then the global pool (every core).
const ARMS: [(&str, usize); 2] = [("sequential", 1), ("parallel", 0)];

fn kernels(c: &mut Criterion) {
    let spec = GeneratorSpec { superpoll_size: 30_000, sample_size: 2_000, ..Default::default() };
    let sp = generate_superpoll(&spec).unwrap();
    let data = expand_augmented(&sp.sample(0), &sp.categories, &sp.alts).unwrap();
    let ds = build_designs(&parse_formula(DEFAULT_FORMULA).unwrap(), &data, Default::default()).unwrap();
    let state = initial_state(&ds, &data.y, &SolverConfig::default()).unwrap();
    let short = SolverConfig { max_iter: 5, ..Default::default() };

    let mut g = c.benchmark_group("weights");
    for (label, jobs) in ARMS {
        g.bench_with_input(BenchmarkId::from_parameter(label), &jobs, |b, &jobs| {
            with_jobs(jobs, || b.iter(|| black_box(compute_weights(&state, &ds).unwrap())))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("five_sweeps");
    g.sample_size(10);
    for (label, jobs) in ARMS {
        g.bench_with_input(BenchmarkId::from_parameter(label), &jobs, |b, &jobs| {
            with_jobs(jobs, || b.iter(|| black_box(fit(&ds, &data.y, &short).unwrap())))
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
