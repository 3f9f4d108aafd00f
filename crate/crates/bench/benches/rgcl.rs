use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rgcl_bench::fixture;
use rgcl_core::encoder::encode;
use rgcl_core::isogclr::{step_unimodal, OptimizerMode, OptimizerState};
use rgcl_core::numerics::{log_sum_exp, RandomStream};
use rgcl_core::rgcl::objective_unimodal_with_grad;
use rgcl_core::RgclConfig;
use std::hint::black_box;

fn bench_encode(c: &mut Criterion) {
    let (params, x, _) = fixture(2000, 16, 32, 8);
    c.bench_function("encode 2000x16", |b| b.iter(|| encode(black_box(&params), black_box(&x)).unwrap()));
}

fn bench_objective(c: &mut Criterion) {
    let cfg = RgclConfig::default();
    let mut g = c.benchmark_group("exact objective with gradient");
    for n in [128usize, 512] {
        let (params, _, views) = fixture(n, 16, 32, 8);
        let taus = vec![cfg.tau_init; n];
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| objective_unimodal_with_grad(&params, &views, &taus, &cfg).unwrap())
        });
    }
    g.finish();
}

fn bench_step(c: &mut Criterion) {
    let cfg = RgclConfig::default();
    let (mut params, x, _) = fixture(2000, 16, 32, 8);
    let mut opt = OptimizerState::new_unimodal(2000, params.num_params(), &cfg, OptimizerMode::Momentum);
    let mut stream = RandomStream::new(7);
    c.bench_function("isogclr step B=128", |b| {
        b.iter(|| step_unimodal(&mut opt, &mut params, &x, &cfg, 128, 0.1, &mut stream).unwrap())
    });
}

fn bench_lse(c: &mut Criterion) {
    let mut s = RandomStream::new(3);
    let v = s.draw_gaussian(4096);
    c.bench_function("log_sum_exp 4096", |b| b.iter(|| log_sum_exp(black_box(&v)).unwrap()));
}

criterion_group!(benches, bench_encode, bench_objective, bench_step, bench_lse);
criterion_main!(benches);
