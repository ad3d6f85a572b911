//! Checks of the structural assumptions and the small-gain certificate
//! kappa = L d^2 sup_t E R(t) / lambda < 1.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::linearflow::{verify_decay, DecayCheck, DecayEnvelope, LinearFlowError, PhiSource};
use crate::specparse::{EvalError, FeedbackKind, FeedbackSpec, Provenance, SystemSpec};
use crate::wiener::{Clock, Ensemble, GridSpec, WienerError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConditionError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Linear(#[from] LinearFlowError),
    #[error(transparent)]
    Grid(#[from] WienerError),
    #[error("feedback evaluation failed: {0}")]
    Feedback(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    /// Not checkable numerically; recorded for the reader.
    Note,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionStatus {
    pub name: String,
    pub status: Status,
    pub detail: String,
}

impl AssumptionStatus {
    fn new(name: &str, status: Status, detail: impl Into<String>) -> Self {
        AssumptionStatus { name: name.into(), status, detail: detail.into() }
    }
}

/// Off-diagonal entries of A must be nonnegative. The first offending
/// entry (1-based) is reported.
pub fn check_cooperative(a: &DMatrix<f64>) -> Result<(), (usize, usize, f64)> {
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            if i != j && a[(i, j)] < 0.0 {
                return Err((i + 1, j + 1, a[(i, j)]));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Monotonicity {
    OrderPreserving,
    AntiOrderPreserving,
    /// h does not move with x on any sampled pair; both directions hold.
    Constant,
    Mixed,
}

impl Monotonicity {
    pub fn is_admissible(self) -> bool {
        self != Monotonicity::Mixed
    }
}

const MONOTONE_TOL: f64 = 1e-12;

/// Direction of x -> h(t, x) on the nonnegative orthant. Builtins are
/// classified from their form; custom feedback is sampled on `samples`
/// random ordered pairs plus every adjacent pair of a 5-point lattice on
/// [0, 10]^d.
pub fn check_monotone_direction(fb: &FeedbackSpec, samples: usize, seed: u64) -> Result<Monotonicity, EvalError> {
    match &fb.kind {
        FeedbackKind::Goodwin { .. } | FeedbackKind::Competitive { .. } => return Ok(Monotonicity::AntiOrderPreserving),
        FeedbackKind::OthmerTyson { .. } => return Ok(Monotonicity::OrderPreserving),
        FeedbackKind::Custom(_) => {}
    }
    let d = fb.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for _ in 0..samples {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..10.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(0.0..10.0)).collect();
        pairs.push((x, y));
    }
    let ticks = [0.0, 2.5, 5.0, 7.5, 10.0];
    let points = ticks.len().pow(d as u32);
    for code in 0..points {
        let mut c = code;
        let idx: Vec<usize> = (0..d)
            .map(|_| {
                let r = c % ticks.len();
                c /= ticks.len();
                r
            })
            .collect();
        let x: Vec<f64> = idx.iter().map(|&r| ticks[r]).collect();
        for axis in 0..d {
            if idx[axis] + 1 < ticks.len() {
                let mut y = x.clone();
                y[axis] = ticks[idx[axis] + 1];
                pairs.push((x.clone(), y));
            }
        }
    }
    let (mut up, mut down) = (false, false);
    let mut hx = vec![0.0; d];
    let mut hy = vec![0.0; d];
    for (x, y) in &pairs {
        let t = rng.random_range(0.0..fb.period);
        fb.eval(t, x, &mut hx)?;
        fb.eval(t, y, &mut hy)?;
        for i in 0..d {
            let diff = hy[i] - hx[i];
            up |= diff > MONOTONE_TOL;
            down |= diff < -MONOTONE_TOL;
        }
        if up && down {
            return Ok(Monotonicity::Mixed);
        }
    }
    Ok(match (up, down) {
        (true, false) => Monotonicity::OrderPreserving,
        (false, true) => Monotonicity::AntiOrderPreserving,
        _ => Monotonicity::Constant,
    })
}

/// The Lipschitz constant L carried by the feedback, and how it was obtained.
pub fn lipschitz_constant(fb: &FeedbackSpec) -> (f64, Provenance) {
    if fb.is_state_independent() {
        return (0.0, Provenance::Exact);
    }
    (fb.lipschitz, fb.lipschitz_provenance)
}

/// kappa = L d^2 sup E R / lambda.
pub fn kappa(l: f64, d: usize, sup_er: f64, lambda: f64) -> f64 {
    l * (d * d) as f64 * sup_er / lambda
}

/// sum_{i=1}^n sum_{j=1}^i lambda^{-(i-j)} prod_{k=j}^i (1 + sigma_k^2 / (2 k lambda)).
pub fn single_loop_sum(sigmas: &[f64], lambda: f64) -> f64 {
    let n = sigmas.len();
    let mut total = 0.0;
    for i in 1..=n {
        for j in 1..=i {
            let mut prod = 1.0;
            for k in j..=i {
                prod *= 1.0 + sigmas[k - 1] * sigmas[k - 1] / (2.0 * k as f64 * lambda);
            }
            total += prod / lambda.powi((i - j) as i32);
        }
    }
    total
}

fn single_loop_lambda(n: usize, alphas: &[f64], sigmas: &[f64], lambda: Option<f64>) -> Result<f64, ConditionError> {
    if n == 0 || alphas.len() != n || sigmas.len() != n {
        return Err(ConditionError::Parameter(format!(
            "need n = {n} decay rates and noise intensities, got {} and {}",
            alphas.len(),
            sigmas.len()
        )));
    }
    let a_min = alphas.iter().cloned().fold(f64::INFINITY, f64::min);
    let cap = a_min / (n + 1) as f64;
    let lambda = lambda.unwrap_or(cap);
    if !(lambda > 0.0) || lambda > cap * (1.0 + 1e-12) {
        return Err(ConditionError::Parameter(format!("lambda = {lambda} must lie in (0, {cap}]")));
    }
    Ok(lambda)
}

/// m n^2 V / (lambda (K - 1)) times the single-loop sum.
pub fn goodwin_bound(n: usize, m: f64, v: f64, k: f64, alphas: &[f64], sigmas: &[f64], lambda: Option<f64>) -> Result<f64, ConditionError> {
    if !(k > 2.0) {
        return Err(ConditionError::Parameter(format!("K = {k} must exceed 2")));
    }
    let lambda = single_loop_lambda(n, alphas, sigmas, lambda)?;
    Ok(m * (n * n) as f64 * v / (lambda * (k - 1.0)) * single_loop_sum(sigmas, lambda))
}

/// m k0 n^2 K / (lambda (K - 1)) times the single-loop sum.
pub fn othmer_tyson_bound(n: usize, m: f64, k0: f64, k: f64, alphas: &[f64], sigmas: &[f64], lambda: Option<f64>) -> Result<f64, ConditionError> {
    if !(k > 2.0) {
        return Err(ConditionError::Parameter(format!("K = {k} must exceed 2")));
    }
    let lambda = single_loop_lambda(n, alphas, sigmas, lambda)?;
    Ok(m * k0 * (n * n) as f64 * k / (lambda * (k - 1.0)) * single_loop_sum(sigmas, lambda))
}

/// m n^2 / (lambda K_min) sum_i (1 + sigma_i^2 / (2 lambda)) with lambda = min alpha / 2.
pub fn competitive_bound(n: usize, m: f64, k_min: f64, alphas: &[f64], sigmas: &[f64]) -> Result<f64, ConditionError> {
    if !(k_min > 1.0) {
        return Err(ConditionError::Parameter(format!("K_min = {k_min} must exceed 1")));
    }
    if n == 0 || alphas.len() != n || sigmas.len() != n {
        return Err(ConditionError::Parameter("need n decay rates and noise intensities".into()));
    }
    let lambda = alphas.iter().cloned().fold(f64::INFINITY, f64::min) / 2.0;
    if !(lambda > 0.0) {
        return Err(ConditionError::Parameter("decay rates must be positive".into()));
    }
    let sum: f64 = sigmas.iter().map(|s| 1.0 + s * s / (2.0 * lambda)).sum();
    Ok(m * (n * n) as f64 / (lambda * k_min) * sum)
}

/// Monte Carlo settings for the advisory sup E R estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McBudget {
    pub paths: usize,
    pub dt: f64,
    /// horizon in periods
    pub periods: usize,
    pub seed: u64,
}

impl Default for McBudget {
    fn default() -> Self {
        McBudget { paths: 256, dt: 1e-2, periods: 2, seed: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmallGainReport {
    pub feedback: String,
    pub d: usize,
    pub lambda: f64,
    pub lipschitz: f64,
    pub lipschitz_provenance: Provenance,
    pub bound: Vec<f64>,
    pub bound_provenance: Provenance,
    pub sup_er_bound: f64,
    pub sup_er_mc: Option<DecayCheck>,
    pub kappa: f64,
    pub verdict: Verdict,
    pub monotonicity: Monotonicity,
    pub envelope: DecayEnvelope,
    pub assumptions: Vec<AssumptionStatus>,
}

/// Assembles the certificate. The verdict depends only on the analytic
/// kappa; the Monte Carlo estimate, if requested, is attached for comparison.
pub fn assemble_report(spec: &SystemSpec, env: &DecayEnvelope, mc: Option<McBudget>) -> Result<SmallGainReport, ConditionError> {
    let fb = &spec.feedback;
    let mut assumptions = Vec::new();
    match check_cooperative(&spec.drift) {
        Ok(()) => assumptions.push(AssumptionStatus::new("A", Status::Pass, "drift is cooperative")),
        Err((i, j, v)) => assumptions.push(AssumptionStatus::new("A", Status::Fail, format!("a_{i}{j} = {v} < 0"))),
    }
    let mono = check_monotone_direction(fb, 1000, 7)?;
    let (status, detail) = match mono {
        Monotonicity::OrderPreserving => (Status::Pass, "order-preserving in x"),
        Monotonicity::AntiOrderPreserving => (Status::Pass, "anti-order-preserving in x"),
        Monotonicity::Constant => (Status::Pass, "independent of x on all samples"),
        Monotonicity::Mixed => (Status::Fail, "neither order-preserving nor anti-order-preserving"),
    };
    assumptions.push(AssumptionStatus::new("H", status, detail));
    let (l, l_prov) = lipschitz_constant(fb);
    let sup_er_mc = match mc {
        None => {
            assumptions.push(AssumptionStatus::new("L", Status::Note, "envelope not sampled"));
            None
        }
        Some(b) => {
            let clock = Clock::from_dt(spec.period, b.dt)?;
            let steps = b.periods * clock.steps_per_period as usize;
            let grid = GridSpec::new(b.dt, -1, steps as i64, spec.noise_dim())?;
            let ens = Ensemble::generate(grid, b.seed, b.paths)?;
            let check = verify_decay(spec, env, &ens, steps, PhiSource::default())?;
            let ok = check.violations == 0 && check.sup_er_mc <= check.sup_er_bound + 4.0 * check.sup_er_se;
            assumptions.push(AssumptionStatus::new(
                "L",
                if ok { Status::Pass } else { Status::Fail },
                format!(
                    "{} envelope violations in {} checks; sup E R = {:.6} +- {:.2e} vs bound {:.6}",
                    check.violations, check.checks, check.sup_er_mc, check.sup_er_se, check.sup_er_bound
                ),
            ));
            Some(check)
        }
    };
    assumptions.push(AssumptionStatus::new("R", Status::Note, "temperedness of R is not checkable at finite horizon"));
    let k = kappa(l, spec.d, env.sup_er_bound, env.lambda);
    assumptions.push(AssumptionStatus::new(
        "H1",
        if k < 1.0 { Status::Pass } else { Status::Fail },
        format!("sup E R <= {:.6}, lambda / (L d^2) = {:.6}", env.sup_er_bound, env.lambda / (l * (spec.d * spec.d) as f64)),
    ));
    Ok(SmallGainReport {
        feedback: fb.kind.name().into(),
        d: spec.d,
        lambda: env.lambda,
        lipschitz: l,
        lipschitz_provenance: l_prov,
        bound: fb.bound.clone(),
        bound_provenance: fb.bound_provenance,
        sup_er_bound: env.sup_er_bound,
        sup_er_mc,
        kappa: k,
        verdict: if k < 1.0 { Verdict::Pass } else { Verdict::Fail },
        monotonicity: mono,
        envelope: env.clone(),
        assumptions,
    })
}

impl SmallGainReport {
    /// Aligned text table for humans.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let prov = |p: Provenance| match p {
            Provenance::ClosedForm => "closed form",
            Provenance::Exact => "exact",
            Provenance::Estimated => "estimated",
        };
        let _ = writeln!(s, "{:<16} {}", "feedback", self.feedback);
        let _ = writeln!(s, "{:<16} {}", "d", self.d);
        let _ = writeln!(s, "{:<16} {:.10}", "lambda", self.lambda);
        let _ = writeln!(s, "{:<16} {:.10} ({})", "L", self.lipschitz, prov(self.lipschitz_provenance));
        let _ = writeln!(s, "{:<16} {:.10}", "sup E R bound", self.sup_er_bound);
        if let Some(mc) = &self.sup_er_mc {
            let _ = writeln!(s, "{:<16} {:.10} +- {:.3e}", "sup E R (MC)", mc.sup_er_mc, mc.sup_er_se);
        }
        let _ = writeln!(s, "{:<16} {:.10}", "kappa", self.kappa);
        let verdict = match self.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
        };
        let _ = writeln!(s, "{:<16} {}", "verdict", verdict);
        let _ = writeln!(s);
        for a in &self.assumptions {
            let st = match a.status {
                Status::Pass => "pass",
                Status::Fail => "fail",
                Status::Note => "note",
            };
            let _ = writeln!(s, "{:<4} {:<5} {}", a.name, st, a.detail);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specparse::{parse_expr, LipschitzMode};

    #[test]
    fn cooperative_cases() {
        let mut a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 1.0, -2.0]);
        assert!(check_cooperative(&a).is_ok());
        a[(0, 1)] = -0.1;
        assert_eq!(check_cooperative(&a), Err((1, 2, -0.1)));
        assert!(check_cooperative(&DMatrix::zeros(3, 3)).is_ok());
    }

    #[test]
    fn builtin_directions() {
        let g = FeedbackSpec::goodwin(3, 2.0 * std::f64::consts::PI, 0.1, 3.0, 2.0, LipschitzMode::ClosedForm).unwrap();
        assert_eq!(check_monotone_direction(&g, 10, 0).unwrap(), Monotonicity::AntiOrderPreserving);
        let o = FeedbackSpec::othmer_tyson(3, 2.0 * std::f64::consts::PI, 0.1, 3.0, 2.0, LipschitzMode::ClosedForm).unwrap();
        assert_eq!(check_monotone_direction(&o, 10, 0).unwrap(), Monotonicity::OrderPreserving);
    }

    #[test]
    fn custom_direction_is_sampled() {
        let up = FeedbackSpec::custom(vec![parse_expr("x1/(1+x1)", 1).unwrap()], 1.0).unwrap();
        assert_eq!(check_monotone_direction(&up, 1000, 0).unwrap(), Monotonicity::OrderPreserving);
        let down = FeedbackSpec::custom(vec![parse_expr("1/(1+x1^2)", 1).unwrap()], 1.0).unwrap();
        assert_eq!(check_monotone_direction(&down, 1000, 0).unwrap(), Monotonicity::AntiOrderPreserving);
    }

    #[test]
    fn single_loop_sum_without_noise() {
        // lambda = 1: every product is 1, so the sum counts the n(n+1)/2 pairs
        assert_eq!(single_loop_sum(&[0.0, 0.0, 0.0], 1.0), 6.0);
        assert_eq!(single_loop_sum(&[0.0], 3.0), 1.0);
    }
}
