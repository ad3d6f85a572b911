use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use rpslab_core::sdeflow::Flow;
use rpslab_core::specparse::parse_expr;
use rpslab_core::wiener::sample_path;
use rpslab_core::{parse_system, presets, DecayEnvelope, Ensemble, FlowOptions, GainConfig, GainContext, GridSpec, Scheme};

const STEPS: i64 = 628;

fn evolve(c: &mut Criterion) {
    let spec = presets::load("ex5_5").unwrap();
    let dt = spec.period / STEPS as f64;
    let w = sample_path(GridSpec::new(dt, -1, 4 * STEPS, 3).unwrap(), 1).unwrap();
    let flow = Flow::new(&spec, dt, FlowOptions::default()).unwrap();
    c.bench_function("evolve ex5_5 4 periods", |b| b.iter(|| flow.terminal(&w, 0, 4 * STEPS, black_box(&[1.0, 1.0, 1.0])).unwrap()));
}

fn wiener(c: &mut Criterion) {
    c.bench_function("sample path 3x10k", |b| b.iter(|| sample_path(GridSpec::new(1e-3, -5000, 5000, 3).unwrap(), black_box(9)).unwrap()));
}

fn apply_kh(c: &mut Criterion) {
    let spec = presets::load("ex5_5").unwrap();
    let env = DecayEnvelope::for_system(&spec, None).unwrap();
    let cfg = GainConfig::default_for(&env, spec.period);
    let grid = GainContext::required_grid(&spec, &cfg, spec.period / STEPS as f64).unwrap();
    let ens = Ensemble::generate(grid, 3, 32).unwrap();
    let ctx = GainContext::new(&spec, &env, &ens, cfg, Scheme::EulerMaruyama).unwrap();
    let u = ctx.midpoint().unwrap();
    let mut g = c.benchmark_group("gain");
    g.sample_size(10);
    g.bench_function("apply_kh ex5_5 32 paths", |b| b.iter(|| ctx.apply_kh(black_box(&u)).unwrap()));
    g.finish();
}

fn parse(c: &mut Criterion) {
    let text = presets::text("goodwin").unwrap();
    c.bench_function("parse goodwin spec", |b| b.iter(|| parse_system(black_box(text)).unwrap()));
    let e = parse_expr("0.3 * (2 + sin(t)) / (1 + (x3 / 3)^3)", 3).unwrap();
    c.bench_function("eval expression", |b| b.iter(|| e.eval(black_box(1.2), black_box(&[0.5, 1.0, 2.0])).unwrap()));
}

criterion_group!(benches, evolve, wiener, apply_kh, parse);
criterion_main!(benches);
