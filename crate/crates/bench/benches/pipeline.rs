use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rtip_core::ensemble::run_ensemble;
use rtip_core::indicators::sliding_autocorr_lag1;
use rtip_core::lrp::explain;
use rtip_core::neuralnet::{forward, loss_and_gradients, ModelParameters};
use rtip_core::preprocess::Label;
use rtip_core::{System, SystemConfig};

const WINDOW: usize = 200;

fn segment(seed: u64) -> Vec<f64> {
    (0..WINDOW).map(|k| (k as f64 * 0.37 + seed as f64).sin() * 1.3).collect()
}

fn simulate(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulate");
    g.sample_size(10);
    for system in System::ALL {
        let cfg = SystemConfig::default_for(system);
        g.bench_function(format!("{}_200_runs", system.name()), |b| {
            b.iter(|| run_ensemble(black_box(&cfg), 200, 1).unwrap())
        });
    }
    g.finish();
}

fn network(c: &mut Criterion) {
    let model = ModelParameters::init(WINDOW, 0, 1).unwrap();
    let x = segment(0);
    c.bench_function("forward", |b| b.iter(|| forward(&model, black_box(&x)).unwrap()));

    let batch: Vec<Vec<f64>> = (0..128).map(segment).collect();
    let refs: Vec<&[f64]> = batch.iter().map(Vec::as_slice).collect();
    let labels: Vec<usize> = (0..128).map(|i| i % 2).collect();
    c.bench_function("gradients_batch_128", |b| {
        b.iter(|| loss_and_gradients(&model, black_box(&refs), &labels).unwrap())
    });
    c.bench_function("lrp_explain", |b| b.iter(|| explain(&model, black_box(&x), Label::Tipping).unwrap()));
}

fn indicators(c: &mut Criterion) {
    let series: Vec<f64> = (0..1200).map(|k| (k as f64 * 0.11).sin()).collect();
    c.bench_function("autocorr_window_200", |b| {
        b.iter(|| sliding_autocorr_lag1(black_box(&series), 200).unwrap())
    });
}

criterion_group!(benches, simulate, network, indicators);
criterion_main!(benches);
