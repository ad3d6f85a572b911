use rpslab_core::conditions::{
    assemble_report, check_monotone_direction, competitive_bound, goodwin_bound, lipschitz_constant, othmer_tyson_bound, McBudget, Monotonicity, Verdict,
};
use rpslab_core::operators::{metric_rho, GainConfig, GainContext, PeriodicProcess};
use rpslab_core::specparse::{parse_expr, FeedbackSpec, LipschitzMode, Provenance};
use rpslab_core::wiener::{Clock, Ensemble};
use rpslab_core::{parse_system, presets, stats, DecayEnvelope, Scheme, SystemSpec};

struct Bench {
    spec: SystemSpec,
    env: DecayEnvelope,
    cfg: GainConfig,
    ens: Ensemble,
}

fn bench(spec: SystemSpec, steps: i64, paths: usize, seed: u64) -> Bench {
    let env = DecayEnvelope::for_system(&spec, None).unwrap();
    let cfg = GainConfig::default_for(&env, spec.period);
    let clock = Clock::new(spec.period, steps).unwrap();
    let grid = GainContext::required_grid(&spec, &cfg, clock.dt).unwrap();
    let ens = Ensemble::generate(grid, seed, paths).unwrap();
    Bench { spec, env, cfg, ens }
}

impl Bench {
    fn ctx(&self) -> GainContext<'_> {
        GainContext::new(&self.spec, &self.env, &self.ens, self.cfg, Scheme::EulerMaruyama).unwrap()
    }
}

#[test]
fn deterministic_k_approaches_c_over_alpha() {
    let spec = parse_system("[system] d=1 T=1\n[drift]\nrow=-4\n[feedback]\nkind=custom\nexpr1=2\n").unwrap();
    let b = bench(spec, 1000, 2, 1);
    let ctx = b.ctx();
    let y = ctx.apply_k(&ctx.constant(&[2.0]).unwrap().data).unwrap();
    // the discrete sum is c dt sum_{k=1}^{n} q^k with q = 1 - 4dt over n stored
    // steps of history, and c/alpha in the limit
    let dt = 1e-3;
    let q: f64 = 1.0 - 4.0 * dt;
    for i in [0, 500, 999] {
        let n = (i - ctx.layout.start()) as i32;
        let y = y.data.value(0, i)[0];
        assert!((y - 2.0 * dt * q * (1.0 - q.powi(n)) / (1.0 - q)).abs() < 1e-12);
        assert!((y - 0.5).abs() <= 2.0 * dt * 1.01);
    }
}

#[test]
fn gain_at_zero_is_feedback_at_zero() {
    let b = bench(presets::load("goodwin").unwrap(), 200, 4, 2);
    let ctx = b.ctx();
    let out = ctx.apply_kh(&ctx.constant(&[0.0, 0.0, 0.0]).unwrap()).unwrap();
    let clock = ctx.layout.clock;
    for i in [0, 50, 133] {
        let t = clock.phase(i);
        let v = out.data.value(1, i);
        assert!((v[0] - 0.02 / (3.0 + t.sin())).abs() < 1e-15);
        assert_eq!(v[1], 0.0);
    }
}

#[test]
fn gain_outputs_are_bounded_and_shift_consistent() {
    let b = bench(presets::load("ex5_5").unwrap(), 314, 16, 3);
    let ctx = b.ctx();
    let n = &b.spec.feedback.bound;
    let u = PeriodicProcess::random(ctx.layout, &b.ens, n, 5).unwrap();
    let out = ctx.apply_kh(&u).unwrap();
    assert_eq!(out.clamped, 0);
    let p = ctx.layout.clock.steps_per_period;
    for path in 0..b.ens.len() {
        for i in ctx.layout.start()..p {
            let v = out.data.value(path, i);
            assert!(v.iter().zip(n).all(|(x, m)| *x >= 0.0 && x <= m));
        }
        for i in 0..p {
            assert_eq!(out.data.value(path, i - p), out.data.shifted_value(path, 1, i));
        }
    }
}

#[test]
fn rho_estimates_agree_across_independent_ensembles() {
    let spec = presets::load("goodwin").unwrap();
    let a = bench(spec.clone(), 100, 400, 10);
    let b = bench(spec, 100, 400, 11);
    let est = |x: &Bench| {
        let ctx = x.ctx();
        let n = &x.spec.feedback.bound;
        let f = PeriodicProcess::random(ctx.layout, &x.ens, n, 1).unwrap();
        let g = PeriodicProcess::random(ctx.layout, &x.ens, n, 2).unwrap();
        metric_rho(&f.data, &g.data).unwrap()
    };
    let (ra, rb) = (est(&a), est(&b));
    let se = (ra.se.powi(2) + rb.se.powi(2)).sqrt();
    assert!((ra.value - rb.value).abs() <= 4.0 * se + 0.1 * ra.value, "{} vs {}", ra.value, rb.value);
}

#[test]
fn contraction_on_goodwin_preset() {
    let b = bench(presets::load("goodwin").unwrap(), 200, 128, 4);
    let ctx = b.ctx();
    let report = assemble_report(&b.spec, &b.env, None).unwrap();
    assert_eq!(report.verdict, Verdict::Pass);
    let n = &b.spec.feedback.bound;
    for k in 0..4u64 {
        let f1 = PeriodicProcess::random(ctx.layout, &b.ens, n, 100 + k).unwrap();
        let f2 = PeriodicProcess::random(ctx.layout, &b.ens, n, 200 + k).unwrap();
        let r0 = metric_rho(&f1.data, &f2.data).unwrap();
        let r1 = metric_rho(&ctx.apply_kh(&f1).unwrap().data, &ctx.apply_kh(&f2).unwrap().data).unwrap();
        assert!(r1.value <= report.kappa * r0.value + 4.0 * (r1.se + report.kappa * r0.se));
    }
}

#[test]
fn picard_from_both_ends_meets_in_the_middle() {
    // slow contraction so the residual history is not trivially short
    let spec = parse_system(
        "[system] d=1 T=1\n[drift]\nrow=-1\n[noise k=1]\ndiag=0.3\n[feedback]\nkind=custom\nexpr1=(1 + 0.5*sin(6.283185307179586*t))/(1 + x1^2)\n",
    )
    .unwrap();
    let b = bench(spec, 100, 64, 6);
    let ctx = b.ctx();
    let tol = 1e-12;
    let lo = ctx.picard(ctx.constant(&[0.0]).unwrap(), 200, tol).unwrap();
    let hi = ctx.picard(ctx.constant(&b.spec.feedback.bound).unwrap(), 200, tol).unwrap();
    assert!(lo.converged && hi.converged);
    assert!(lo.iterations > 5);
    assert!(metric_rho(&lo.fixed_point.data, &hi.fixed_point.data).unwrap().value <= 2.0 * tol);
    for out in [&lo, &hi] {
        let r: Vec<f64> = out.residuals.iter().map(|r| r.value).collect();
        assert!(r.windows(2).skip(1).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-15), "{r:?}");
        assert!(out.max_ratio < 1.0);
    }
}

#[test]
fn realised_solution_for_constant_and_zero_feedback() {
    let zero = parse_system("[system] d=1 T=1\n[drift]\nrow=-2\n[noise k=1]\ndiag=0.5\n[feedback]\nkind=custom\nexpr1=0\n").unwrap();
    let b = bench(zero, 100, 8, 7);
    let ctx = b.ctx();
    let u = ctx.picard(ctx.midpoint().unwrap(), 5, 0.0).unwrap();
    let y = ctx.realize_rps(&u.fixed_point).unwrap();
    assert!((0..8).all(|p| (0..100).all(|i| y.data.value(p, i)[0] == 0.0)));

    let c = parse_system("[system] d=1 T=1\n[drift]\nrow=-2\n[feedback]\nkind=custom\nexpr1=0.8\n").unwrap();
    let b = bench(c, 1000, 1, 7);
    let ctx = b.ctx();
    let u = ctx.picard(ctx.midpoint().unwrap(), 5, 0.0).unwrap();
    let y = ctx.realize_rps(&u.fixed_point).unwrap();
    assert!((y.data.value(0, 10)[0] - 0.4).abs() < 1e-3);
}

#[test]
fn three_stage_report_passes() {
    let spec = presets::load("ex5_5").unwrap();
    let env = DecayEnvelope::for_system(&spec, None).unwrap();
    let r = assemble_report(&spec, &env, None).unwrap();
    assert_eq!(r.verdict, Verdict::Pass);
    assert!((r.kappa - 0.9086).abs() < 1e-4);
    assert_eq!(r.monotonicity, Monotonicity::OrderPreserving);
    assert!(r.to_text().contains("PASS"));
}

#[test]
fn strong_goodwin_repression_fails() {
    let text = presets::text("goodwin").unwrap().replace("V = 0.02", "V = 100");
    let spec = parse_system(&text).unwrap();
    let env = DecayEnvelope::for_system(&spec, None).unwrap();
    let r = assemble_report(&spec, &env, None).unwrap();
    assert_eq!(r.verdict, Verdict::Fail);
    assert!(r.kappa >= 1.0);
}

#[test]
fn report_kappa_matches_closed_formulas() {
    let spec = presets::load("goodwin").unwrap();
    let env = DecayEnvelope::for_system(&spec, None).unwrap();
    let r = assemble_report(&spec, &env, None).unwrap();
    let sig = [0.5, 0.25, 1.0 / 3.0];
    let alphas = [8.0, 9.0, 10.0];
    let g = goodwin_bound(3, 3.0, 0.02, 3.0, &alphas, &sig, None).unwrap();
    assert!((r.kappa - g).abs() <= 1e-12 * g);

    let spec = presets::load("othmer_tyson").unwrap();
    let env = DecayEnvelope::for_system(&spec, None).unwrap();
    let r = assemble_report(&spec, &env, None).unwrap();
    let o = othmer_tyson_bound(3, 3.0, 0.005, 3.0, &alphas, &sig, None).unwrap();
    assert!((r.kappa - o).abs() <= 1e-12 * o);

    let spec = presets::load("competitive").unwrap();
    let env = DecayEnvelope::for_system(&spec, None).unwrap();
    let r = assemble_report(&spec, &env, None).unwrap();
    let c = competitive_bound(2, 2.0, 20.0, &[4.0, 4.0], &[0.5, 0.5]).unwrap();
    assert!((r.kappa - c).abs() <= 1e-12 * c);
    assert!((c - 0.425).abs() < 1e-12);
}

#[test]
fn bound_formulas_limits_and_rejections() {
    let s = [0.2, 0.2, 0.2];
    let a = [3.0, 3.0, 3.0];
    assert!(goodwin_bound(3, 2.0, 1e-9, 3.0, &a, &s, None).unwrap() < 1e-6);
    assert!(othmer_tyson_bound(3, 2.0, 1e-9, 3.0, &a, &s, None).unwrap() < 1e-6);
    assert!(othmer_tyson_bound(1, 2.0, 0.05, 2.0, &[2.0], &[0.0], Some(1.0)).is_err());
    assert!(goodwin_bound(1, 2.0, 0.05, 1.5, &[2.0], &[0.0], Some(1.0)).is_err());
    assert!(competitive_bound(1, 2.0, 1.0, &[2.0], &[0.0]).is_err());
    assert!(competitive_bound(2, 2.0, 1e6, &[4.0, 4.0], &[0.5, 0.5]).unwrap() < 1.0);
    let small = competitive_bound(1, 2.0, 10.0, &[2.0], &[1.0]).unwrap();
    let big = competitive_bound(1, 2.0, 10.0, &[2.0], &[30.0]).unwrap();
    assert!(big > 100.0 * small);
}

#[test]
fn lipschitz_constants_by_kind() {
    let g = FeedbackSpec::goodwin(3, 2.0 * std::f64::consts::PI, 0.5, 4.0, 3.0, LipschitzMode::ClosedForm).unwrap();
    assert_eq!(lipschitz_constant(&g), (3.0 * 0.5 / 3.0, Provenance::ClosedForm));
    let spec = presets::load("ex5_5").unwrap();
    let (l, p) = lipschitz_constant(&spec.feedback);
    assert!((l - 1.0 / (24.0 * 2f64.powf(1.0 / 3.0))).abs() < 1e-15);
    assert_eq!(p, Provenance::Exact);
    let c = FeedbackSpec::custom(vec![parse_expr("2 + sin(t)", 1).unwrap()], 2.0 * std::f64::consts::PI).unwrap();
    assert_eq!(lipschitz_constant(&c).0, 0.0);
}

#[test]
fn non_monotone_feedback_is_mixed() {
    let fb = FeedbackSpec::custom_unchecked(vec![parse_expr("(x1 - 1)^2", 1).unwrap()], 1.0, vec![100.0], 20.0).unwrap();
    assert_eq!(check_monotone_direction(&fb, 1000, 3).unwrap(), Monotonicity::Mixed);
    let spec = parse_system("[system] d=1 T=1\n[drift]\nrow=-2\n[feedback]\nkind=custom\nexpr1=1\n").unwrap().with_feedback(fb).unwrap();
    let env = DecayEnvelope::for_system(&spec, None).unwrap();
    let r = assemble_report(&spec, &env, None).unwrap();
    assert!(r.assumptions.iter().any(|a| a.name == "H" && a.status == rpslab_core::conditions::Status::Fail));
}

#[test]
fn sampled_envelope_is_consistent_with_bound_on_presets() {
    for name in presets::NAMES {
        let spec = presets::load(name).unwrap();
        let env = DecayEnvelope::for_system(&spec, None).unwrap();
        let steps = (628.0 * spec.period / (2.0 * std::f64::consts::PI)).round() as i64;
        let budget = McBudget { paths: 128, dt: spec.period / steps as f64, periods: 1, seed: 3 };
        let r = assemble_report(&spec, &env, Some(budget)).unwrap();
        let mc = r.sup_er_mc.clone().unwrap();
        assert!(mc.sup_er_mc <= mc.sup_er_bound + 4.0 * mc.sup_er_se, "{name}: {mc:?}");
        // bit-exact determinism
        assert_eq!(r, assemble_report(&spec, &env, Some(budget)).unwrap());
    }
}

#[test]
fn k_mean_matches_expectation_of_the_propagator() {
    let spec = parse_system("[system] d=1 T=1\n[drift]\nrow=-2\n[noise k=1]\ndiag=0.5\n[feedback]\nkind=custom\nexpr1=1\n").unwrap();
    let b = bench(spec, 100, 1024, 12);
    let ctx = b.ctx();
    let y = ctx.apply_k(&ctx.constant(&[1.0]).unwrap().data).unwrap();
    let xs: Vec<f64> = (0..1024).map(|p| y.data.value(p, 0)[0]).collect();
    let (m, se) = stats::mean_se(&xs);
    // the discrete mean is (1 - 2dt)/2
    assert!((m - 0.495).abs() <= 4.0 * se, "{m} +- {se}");
}
