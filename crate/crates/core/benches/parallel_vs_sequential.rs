use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use qmmm_adapt::coupling::decompose_ball;
use qmmm_adapt::estimator::full_indicator;
use qmmm_adapt::lattice::{build_lattice, Displacement, LatticeSpec};
use qmmm_adapt::mmpotential::build_mm_potential;
use qmmm_adapt::par::Execution;
use qmmm_adapt::tightbinding::TbModel;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn indicator(c: &mut Criterion) {
    let model = TbModel::morse_toy();
    let lattice = build_lattice(&LatticeSpec::single_vacancy(), 14.0).unwrap();
    let part = decompose_ball(&lattice, 3.0, 9.0, 5.0).unwrap();
    let u = Displacement::zeros(lattice.len());
    let mut g = c.benchmark_group("full_indicator");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(full_indicator(&model, &lattice, &u, &part, 5.0, exec).unwrap().total))
        });
    }
    g.finish();
}

fn mm_potential(c: &mut Criterion) {
    let model = TbModel::morse_toy();
    let spec = LatticeSpec::triangular();
    let mut g = c.benchmark_group("mm_potential");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(build_mm_potential(&model, &spec, 3.05, 2, exec).unwrap().v0))
        });
    }
    g.finish();
}

criterion_group!(benches, indicator, mm_potential);
criterion_main!(benches);
