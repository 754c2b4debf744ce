use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use prlc_core::constraints::{FeatureMap, LinearFeatureConstraint};
use prlc_core::energy::{EnergyDistribution, IsOptions};
use prlc_core::harness::checks::short_config;
use prlc_core::harness::experiment::{grid_generator, run_single, ExperimentConfig, GridParams, Task};
use prlc_core::model::{CategoricalModel, ImplicitModel};
use prlc_core::rng::StreamFamily;
use prlc_core::trainer::Selector;

type Lin = LinearFeatureConstraint<usize, ()>;

fn categorical(k: usize) -> (CategoricalModel, Lin) {
    let logits: Vec<f64> = (0..k).map(|i| (i as f64 * 0.37).sin()).collect();
    let weights: Vec<f64> = (0..k).map(|i| (i as f64 * 0.11).cos()).collect();
    (CategoricalModel::from_logits(logits).unwrap(), Lin::new(FeatureMap::outcome_one_hot(k), weights).unwrap())
}

fn estimators(c: &mut Criterion) {
    let (p, f) = categorical(64);
    let e = EnergyDistribution::new(&p, &(), &f, &(), 1.5).unwrap();
    c.bench_function("exact_q/64", |b| b.iter(|| black_box(e.exact_q(64).unwrap())));
    let streams = StreamFamily::new(0, "bench");
    c.bench_function("is_expectation/100k", |b| {
        b.iter(|| black_box(e.is_expectation(|x| *x as f64, 100_000, &streams, IsOptions::default()).unwrap()))
    });
    c.bench_function("sample_q_sir/10k->1k", |b| b.iter(|| black_box(e.sample_q_sir(10_000, 1_000, &streams, Default::default()).unwrap())));
}

fn models(c: &mut Criterion) {
    let params = GridParams::default();
    let model = grid_generator(&params, 0).unwrap();
    let domain = prlc_core::harness::grid::GridDomain::new(12, 12, 3, 0.02).unwrap();
    let data = prlc_core::harness::grid::generate_grid_dataset(&domain, 1, 0, 0).unwrap();
    let ctx = &data.demos.records()[0].context;
    let z = vec![0.3, -0.7];
    c.bench_function("pushforward/12x12", |b| b.iter(|| black_box(model.push(ctx, &z))));
}

fn training(c: &mut Criterion) {
    let mut group = c.benchmark_group("short_run");
    group.sample_size(10);
    for task in [Task::Infill, Task::MdpBridge] {
        let cfg: ExperimentConfig = short_config(task);
        group.bench_function(task.name(), |b| b.iter(|| black_box(run_single(&cfg, Selector::Full, 0).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, estimators, models, training);
criterion_main!(benches);
