//! Hot-path benchmarks: model forward, full gradient step, simulator,
//! and the hydraulic root-finder.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use hydronet_bench::{demo_tree, training_windows};
use hydronet_core::model::{init_params, HydroNet, HydroNetConfig};
use hydronet_core::sim::{generate_dataset, normal_depth, SimConfig};
use hydronet_core::train::{batch_loss_and_grads, LossKind};

fn model_benches(c: &mut Criterion) {
    let graph = demo_tree();
    let config = HydroNetConfig::default();
    let params = init_params(&config).expect("params");
    let model = HydroNet::new(config, &graph).expect("model");
    let windows = training_windows(&graph, 120);

    c.bench_function("forward_one_window", |b| {
        b.iter(|| model.forward(black_box(&windows[0].input), &params).unwrap())
    });

    let batch: Vec<_> = windows.iter().take(32).collect();
    c.bench_function("gradient_step_batch32", |b| {
        b.iter(|| batch_loss_and_grads(&model, &params, black_box(&batch), LossKind::Mae).unwrap())
    });
}

fn simulator_benches(c: &mut Criterion) {
    let graph = demo_tree();
    let config = SimConfig {
        duration: 288,
        ..SimConfig::default()
    };
    c.bench_function("simulate_288_steps", |b| {
        b.iter(|| generate_dataset(black_box(&graph), &config, &[]).unwrap())
    });

    let edge = graph.edges()[2].clone();
    c.bench_function("normal_depth", |b| {
        b.iter(|| normal_depth(black_box(1.5), &edge).unwrap())
    });
}

criterion_group!(benches, model_benches, simulator_benches);
criterion_main!(benches);
