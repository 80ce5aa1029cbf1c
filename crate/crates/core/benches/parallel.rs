//! Sequential vs data-parallel execution of the two bulk stages: synthetic
//! data generation and frozen-backbone feature extraction.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use tpl_core::data::{generate_synthetic, SynthConfig};
use tpl_core::encoders::{Backbone, ModelConfig};
use tpl_core::exec::Execution;
use tpl_core::harness::model::original_features;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn generation(c: &mut Criterion) {
    let cfg = SynthConfig { per_cell: 16, ..SynthConfig::default() };
    let mut group = c.benchmark_group("generate_synthetic");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| generate_synthetic(black_box(&cfg), 0, exec).unwrap())
        });
    }
    group.finish();
}

fn features(c: &mut Criterion) {
    let ds = generate_synthetic(&SynthConfig { per_cell: 8, ..SynthConfig::default() }, 0, Execution::Parallel).unwrap();
    let bb = Backbone::init(ModelConfig::compact(), 0).unwrap();
    let mut group = c.benchmark_group("original_features");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| original_features(black_box(&bb), &ds, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, generation, features);
criterion_main!(benches);
