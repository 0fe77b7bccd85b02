//! Parallel vs sequential throughput of the per-window batch work that
//! dominates training: encoding and the filter gradient.

use cdl_core::conv::{estimate_lipschitz, DEFAULT_POWER_MAX_ITER, DEFAULT_POWER_TOL};
use cdl_core::encoder::{encode, encode_batch, EncoderConfig};
use cdl_core::grads::{grad_h, lambda_init};
use cdl_core::par::{map_sum, Execution};
use cdl_core::sim::{simulate, SimConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

const BATCH: usize = 32;

fn setup() -> (Vec<Vec<f64>>, cdl_core::FilterBank, EncoderConfig) {
    let data = simulate(&SimConfig::four_neuron(500, BATCH, Some(16.0), 0)).unwrap();
    let h = data.truth.as_ref().unwrap().filters.clone();
    let lip = estimate_lipschitz(&h, 500, DEFAULT_POWER_TOL, DEFAULT_POWER_MAX_ITER)
        .unwrap()
        .lipschitz;
    let lambda = lambda_init(h.n_filters(), h.code_len(500).unwrap(), data.sigma);
    let windows = data.windows().map(<[f64]>::to_vec).collect();
    (windows, h, EncoderConfig::new(120, lip, lambda, data.sigma))
}

fn modes() -> [(&'static str, Execution); 2] {
    [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)]
}

fn bench_encode(c: &mut Criterion) {
    let (windows, h, cfg) = setup();
    let mut g = c.benchmark_group("encode_batch");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| encode_batch(black_box(&windows), &h, &cfg, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_grad(c: &mut Criterion) {
    let (windows, h, cfg) = setup();
    let dim = h.n_filters() * h.filter_len();
    let mut g = c.benchmark_group("grad_h_batch");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                map_sum(BATCH, dim, exec, false, |j| {
                    let (_, trace) = encode(&windows[j], &h, &cfg, true)?;
                    grad_h(&windows[j], &h, &cfg, &trace.unwrap())
                })
                .unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_encode, bench_grad);
criterion_main!(benches);
