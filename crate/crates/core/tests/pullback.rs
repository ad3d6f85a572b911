use rpslab_core::operators::{GainConfig, GainContext};
use rpslab_core::pullback::{crosscheck_pullback_vs_fixpoint, envelope_diagnostics, run_pullback, verify_rps_invariance, write_fan_csv, PullbackRequest};
use rpslab_core::wiener::{Clock, Ensemble, GridSpec};
use rpslab_core::{parse_system, presets, DecayEnvelope, FlowOptions, Scheme, SystemSpec};

fn steps_for(spec: &SystemSpec, per_two_pi: f64) -> i64 {
    (per_two_pi * spec.period / (2.0 * std::f64::consts::PI)).round().max(1.0) as i64
}

fn ensemble(spec: &SystemSpec, steps: i64, periods_back: i64, paths: usize, seed: u64) -> Ensemble {
    let dt = spec.period / steps as f64;
    Ensemble::generate(GridSpec::new(dt, -(periods_back + 1) * steps, steps, spec.noise_dim()).unwrap(), seed, paths).unwrap()
}

#[test]
fn linear_pullback_collapses_to_zero() {
    let spec = parse_system("[system] d=2 T=1\n[drift]\nrow=-1,0\nrow=1,-1.5\n[noise k=1]\ndiag=0.3,0\n[feedback]\nkind=custom\nexpr1=0\nexpr2=0\n").unwrap();
    let ens = ensemble(&spec, 100, 8, 8, 1);
    let req = PullbackRequest { t: 0, alpha: 0, n_min: 1, n_max: 8, x0: vec![vec![1.0, 1.0], vec![4.0, 0.5]] };
    let fan = run_pullback(&spec, &ens, &req, FlowOptions::default()).unwrap();
    let s = fan.summary(0.5, 1.0);
    assert!(s.rows[7].diameter < 1e-2 * s.rows[0].diameter);
    assert!(fan.terminal(0, 8, 1).iter().all(|v| *v < 1e-2));
    let fit = s.rate_fit.unwrap();
    assert!(fit.slope < 0.0);
    assert_eq!(fit.within_band, fit.slope >= fit.band.0 && fit.slope <= fit.band.1);
}

#[test]
fn same_path_reuse_across_grid_extents() {
    let spec = presets::load("othmer_tyson").unwrap();
    let steps = steps_for(&spec, 200.0);
    let short = ensemble(&spec, steps, 4, 4, 9);
    let long = ensemble(&spec, steps, 7, 4, 9);
    let req = PullbackRequest { t: 10, alpha: 3, n_min: 1, n_max: 3, x0: vec![vec![2.0; 3]] };
    let a = run_pullback(&spec, &short, &req, FlowOptions::default()).unwrap();
    let b = run_pullback(&spec, &long, &req, FlowOptions::default()).unwrap();
    assert_eq!(a, b);
    for n in 1..=3 {
        assert_eq!(a.terminal(2, n, 0), b.terminal(2, n, 0));
    }
}

#[test]
fn order_is_preserved_by_the_cooperative_preset() {
    let spec = presets::load("othmer_tyson").unwrap();
    let steps = steps_for(&spec, 200.0);
    let ens = ensemble(&spec, steps, 4, 8, 5);
    let req = PullbackRequest { t: 0, alpha: 0, n_min: 1, n_max: 4, x0: vec![vec![0.5, 0.1, 0.0], vec![1.0, 2.0, 0.3]] };
    let fan = run_pullback(&spec, &ens, &req, FlowOptions::default()).unwrap();
    for p in 0..8 {
        for n in 1..=4 {
            for (a, b) in fan.terminal(p, n, 0).iter().zip(fan.terminal(p, n, 1)) {
                assert!(*a <= b + 1e-9);
            }
        }
    }
}

#[test]
fn squeeze_and_fan_collapse_on_presets() {
    for name in presets::NAMES {
        let spec = presets::load(name).unwrap();
        let steps = steps_for(&spec, 200.0);
        let ens = ensemble(&spec, steps, 6, 16, 2);
        let x0 = vec![vec![0.0; spec.d], vec![1.0; spec.d], vec![5.0; spec.d]];
        let req = PullbackRequest { t: 0, alpha: steps / 4, n_min: 1, n_max: 6, x0 };
        let fan = run_pullback(&spec, &ens, &req, FlowOptions::default()).unwrap();
        assert!(fan.all_nonnegative(), "{name}");
        assert!(fan.summary(1.0, spec.period).diameters_nonincreasing(4.0), "{name}");
        let env = envelope_diagnostics(&spec, &ens, 0, steps / 4, 1, 6, &vec![3.0; spec.d], FlowOptions::default()).unwrap();
        assert!(env.invariants_hold(), "{name}");
        let gaps = env.mean_gaps();
        assert!(gaps.last().unwrap().iter().all(|g| *g == 0.0));
    }
}

#[test]
fn constant_feedback_envelopes_coincide() {
    let spec = parse_system("[system] d=1 T=1\n[drift]\nrow=-1\n[noise k=1]\ndiag=0.4\n[feedback]\nkind=custom\nexpr1=2 + sin(6.283185307179586*t)\n").unwrap();
    let ens = ensemble(&spec, 50, 5, 4, 3);
    let env = envelope_diagnostics(&spec, &ens, 10, 0, 1, 5, &[1.0], FlowOptions::default()).unwrap();
    let h = 2.0 + (std::f64::consts::TAU * 10.0 / 50.0).sin();
    for p in 0..4 {
        for k in 0..5 {
            assert_eq!(env.lower[p][k], env.upper[p][k]);
            assert!((env.lower[p][k][0] - h).abs() < 1e-15);
        }
    }
    let single = envelope_diagnostics(&spec, &ens, 10, 0, 3, 3, &[1.0], FlowOptions::default()).unwrap();
    assert_eq!(single.lower, single.values);
    assert_eq!(single.upper, single.values);
}

fn realised(spec: &SystemSpec, steps: i64, m_periods: f64, back: i64, paths: usize) -> (DecayEnvelope, GainConfig, Ensemble) {
    let env = DecayEnvelope::for_system(spec, None).unwrap();
    let mut cfg = GainConfig::default_for(&env, spec.period);
    cfg.m_trunc = cfg.m_trunc.max(m_periods * spec.period);
    let clock = Clock::new(spec.period, steps).unwrap();
    let grid = GainContext::required_grid(spec, &cfg, clock.dt).unwrap();
    let lo = grid.i_min.min(-(back + 1) * steps);
    let ens = Ensemble::generate(GridSpec::new(clock.dt, lo, steps, spec.noise_dim()).unwrap(), 17, paths).unwrap();
    (env, cfg, ens)
}

#[test]
fn zero_feedback_gives_zero_solution_everywhere() {
    let spec = parse_system("[system] d=1 T=1\n[drift]\nrow=-2\n[noise k=1]\ndiag=0.5\n[feedback]\nkind=custom\nexpr1=0\n").unwrap();
    let (env, cfg, ens) = realised(&spec, 100, 0.0, 3, 4);
    let ctx = GainContext::new(&spec, &env, &ens, cfg, Scheme::EulerMaruyama).unwrap();
    let u = ctx.picard(ctx.midpoint().unwrap(), 3, 0.0).unwrap();
    let y = ctx.realize_rps(&u.fixed_point).unwrap();
    let res = verify_rps_invariance(&ctx, &y, &[(-100, 0), (0, 99)], FlowOptions::default()).unwrap();
    assert!(res.windows.iter().all(|w| w.max == 0.0));
    assert_eq!(res.shift_residual, 0.0);
    let req = PullbackRequest { t: 0, alpha: 0, n_min: 1, n_max: 3, x0: vec![vec![0.0]] };
    let fan = run_pullback(&spec, &ens, &req, FlowOptions::default()).unwrap();
    let agree = crosscheck_pullback_vs_fixpoint(&fan, &y).unwrap();
    assert!(agree.iter().all(|a| a.median == 0.0));
}

#[test]
fn deterministic_constant_case_agrees_with_fixed_point() {
    let spec = parse_system("[system] d=1 T=1\n[drift]\nrow=-2\n[feedback]\nkind=custom\nexpr1=1\n").unwrap();
    let (env, cfg, ens) = realised(&spec, 1000, 0.0, 8, 1);
    let ctx = GainContext::new(&spec, &env, &ens, cfg, Scheme::EulerMaruyama).unwrap();
    let u = ctx.picard(ctx.midpoint().unwrap(), 5, 0.0).unwrap();
    let y = ctx.realize_rps(&u.fixed_point).unwrap();
    let req = PullbackRequest { t: 0, alpha: 0, n_min: 1, n_max: 8, x0: vec![vec![0.0], vec![3.0]] };
    let fan = run_pullback(&spec, &ens, &req, FlowOptions::default()).unwrap();
    let agree = crosscheck_pullback_vs_fixpoint(&fan, &y).unwrap();
    // Euler fixed point 1/2 against the discrete sum (1 - 2dt)/2
    assert!((agree[7].median - 1e-3).abs() < 1e-6, "{agree:?}");
}

#[test]
fn shift_identity_is_exact_on_presets() {
    for name in presets::NAMES {
        let spec = presets::load(name).unwrap();
        let steps = steps_for(&spec, 100.0);
        let (env, cfg, ens) = realised(&spec, steps, 0.0, 0, 4);
        let ctx = GainContext::new(&spec, &env, &ens, cfg, Scheme::EulerMaruyama).unwrap();
        let u = ctx.picard(ctx.midpoint().unwrap(), 20, 1e-12).unwrap();
        let y = ctx.realize_rps(&u.fixed_point).unwrap();
        let res = verify_rps_invariance(&ctx, &y, &[(-steps, steps - 1)], FlowOptions::default()).unwrap();
        assert_eq!(res.shift_residual, 0.0, "{name}");
    }
}

#[test]
fn invariance_residual_shrinks_under_refinement() {
    let spec = presets::load("ex5_5").unwrap();
    let mut medians = Vec::new();
    for (steps, periods) in [(628i64, 5.0), (1256, 10.0)] {
        let (env, cfg, ens) = realised(&spec, steps, periods, 0, 32);
        let ctx = GainContext::new(&spec, &env, &ens, cfg, Scheme::EulerMaruyama).unwrap();
        let u = ctx.picard(ctx.midpoint().unwrap(), 20, 1e-12).unwrap();
        let y = ctx.realize_rps(&u.fixed_point).unwrap();
        let res = verify_rps_invariance(&ctx, &y, &[(-steps, 0), (-steps / 2, steps - 1)], FlowOptions::default()).unwrap();
        medians.push(res.windows.iter().map(|w| w.median).fold(0.0, f64::max));
    }
    assert!(medians[1] < medians[0], "{medians:?}");
}

#[test]
fn fan_csv_has_one_row_per_n() {
    let spec = parse_system("[system] d=1 T=1\n[drift]\nrow=-1\n[feedback]\nkind=custom\nexpr1=1/(1+x1)\n").unwrap();
    let ens = ensemble(&spec, 20, 3, 2, 1);
    let req = PullbackRequest { t: 0, alpha: 0, n_min: 1, n_max: 3, x0: vec![vec![0.0], vec![2.0]] };
    let fan = run_pullback(&spec, &ens, &req, FlowOptions::default()).unwrap();
    let mut buf = Vec::new();
    write_fan_csv(&mut buf, &fan.summary(0.5, 1.0), None).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().last().unwrap().starts_with("3,"));
}
