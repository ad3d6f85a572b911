//! Feedback nonlinearities h(t, x): the three builtin families plus free-form
//! expressions, with their sup bound N and Lipschitz constant L.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::expr::{EvalError, FeedbackExpr};

/// Where a constant came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Closed-form upper bound of the builtin family.
    ClosedForm,
    /// The exact extremum of the builtin family.
    Exact,
    /// Sampled supremum inflated by the safety factor.
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LipschitzMode {
    ClosedForm,
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeedbackKind {
    /// h_1 = V/(K + sin t + x_d^m), other components zero.
    Goodwin { v: f64, k: f64, m: f64 },
    /// h_1 = k0 (1 + x_d^m)/(K + sin t + x_d^m), other components zero.
    OthmerTyson { k0: f64, k: f64, m: f64 },
    /// h_i = |sin t| + 1/(K_i + sum_j x_j^m).
    Competitive { k: Vec<f64>, m: f64 },
    Custom(Vec<FeedbackExpr>),
}

impl FeedbackKind {
    pub fn name(&self) -> &'static str {
        match self {
            FeedbackKind::Goodwin { .. } => "goodwin",
            FeedbackKind::OthmerTyson { .. } => "othmer_tyson",
            FeedbackKind::Competitive { .. } => "competitive",
            FeedbackKind::Custom(_) => "custom",
        }
    }

    /// Smallest period of the builtin time dependence.
    pub fn natural_period(&self) -> Option<f64> {
        match self {
            FeedbackKind::Goodwin { .. } | FeedbackKind::OthmerTyson { .. } => Some(2.0 * PI),
            FeedbackKind::Competitive { .. } => Some(PI),
            FeedbackKind::Custom(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackSpec {
    pub kind: FeedbackKind,
    pub d: usize,
    pub period: f64,
    /// N_i, the sup of |h_i|.
    pub bound: Vec<f64>,
    pub bound_provenance: Provenance,
    pub lipschitz: f64,
    pub lipschitz_provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FeedbackError {
    #[error("invalid feedback parameter: {0}")]
    Parameter(String),
    #[error("period {period} is not a multiple of the feedback's natural period {natural}")]
    Period { period: f64, natural: f64 },
    #[error("feedback is not {period}-periodic: |h(t+T,x) - h(t,x)| = {gap:e} at t = {t}")]
    NotPeriodic { period: f64, t: f64, gap: f64 },
    #[error("feedback is not finite on the orthant: {0}")]
    Unsafe(EvalError),
}

const SAFETY: f64 = 1.05;
const PERIODICITY_TOL: f64 = 1e-12;
const LATTICE_CAP: usize = 20_000;
const SAMPLER_SEED: u64 = 0x5eed_0ffb;

#[inline]
fn pow_m(x: f64, m: f64) -> f64 {
    if m.fract() == 0.0 && m.abs() < 64.0 {
        x.powi(m as i32)
    } else {
        x.powf(m)
    }
}

/// sup over x >= 0 of m x^(m-1)/(c + x^m)^2, for m >= 1 and c > 0.
pub fn hill_slope_peak(m: f64, c: f64) -> f64 {
    let y = (m - 1.0) * c / (m + 1.0);
    let s = 2.0 * m * c / (m + 1.0);
    m * y.powf((m - 1.0) / m) / (s * s)
}

impl FeedbackSpec {
    pub fn goodwin(d: usize, period: f64, v: f64, k: f64, m: f64, mode: LipschitzMode) -> Result<Self, FeedbackError> {
        if !(v > 0.0) || !(k > 2.0) || !(m > 1.0) {
            return Err(FeedbackError::Parameter(format!(
                "goodwin needs V > 0, K > 2, m > 1 (got V={v}, K={k}, m={m})"
            )));
        }
        let kind = FeedbackKind::Goodwin { v, k, m };
        let mut bound = vec![0.0; d];
        bound[0] = v / (k - 1.0);
        let (l, prov) = match mode {
            LipschitzMode::ClosedForm => (m * v / (k - 1.0), Provenance::ClosedForm),
            LipschitzMode::Exact => (v * hill_slope_peak(m, k - 1.0), Provenance::Exact),
        };
        Self::builtin(kind, d, period, bound, l, prov)
    }

    pub fn othmer_tyson(d: usize, period: f64, k0: f64, k: f64, m: f64, mode: LipschitzMode) -> Result<Self, FeedbackError> {
        if !(k0 > 0.0) || !(k > 2.0) || !(m > 1.0) {
            return Err(FeedbackError::Parameter(format!(
                "othmer_tyson needs k0 > 0, K > 2, m > 1 (got k0={k0}, K={k}, m={m})"
            )));
        }
        let kind = FeedbackKind::OthmerTyson { k0, k, m };
        let mut bound = vec![0.0; d];
        bound[0] = k0;
        let (l, prov) = match mode {
            LipschitzMode::ClosedForm => (m * k0 * k / (k - 1.0), Provenance::ClosedForm),
            LipschitzMode::Exact => {
                // (c - 1) * peak(c) is maximised at c = m + 1 over c in [K-1, K+1]
                let c = (m + 1.0).clamp(k - 1.0, k + 1.0);
                (k0 * (c - 1.0) * hill_slope_peak(m, c), Provenance::Exact)
            }
        };
        Self::builtin(kind, d, period, bound, l, prov)
    }

    pub fn competitive(d: usize, period: f64, ks: Vec<f64>, m: f64, mode: LipschitzMode) -> Result<Self, FeedbackError> {
        if ks.len() != d {
            return Err(FeedbackError::Parameter(format!("competitive needs {d} K values, got {}", ks.len())));
        }
        if ks.iter().any(|&k| !(k > 1.0)) || !(m > 1.0) {
            return Err(FeedbackError::Parameter("competitive needs every K_i > 1 and m > 1".into()));
        }
        let k_min = ks.iter().cloned().fold(f64::INFINITY, f64::min);
        let bound = ks.iter().map(|k| 1.0 + 1.0 / k).collect();
        let (l, prov) = match mode {
            LipschitzMode::ClosedForm => (m / k_min, Provenance::ClosedForm),
            LipschitzMode::Exact => (hill_slope_peak(m, k_min), Provenance::Exact),
        };
        Self::builtin(FeedbackKind::Competitive { k: ks, m }, d, period, bound, l, prov)
    }

    fn builtin(kind: FeedbackKind, d: usize, period: f64, bound: Vec<f64>, lipschitz: f64, prov: Provenance) -> Result<Self, FeedbackError> {
        if d == 0 {
            return Err(FeedbackError::Parameter("dimension must be positive".into()));
        }
        let natural = kind.natural_period().unwrap();
        let ratio = period / natural;
        if !(ratio >= 1.0 - 1e-12) || (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(FeedbackError::Period { period, natural });
        }
        Ok(FeedbackSpec {
            kind,
            d,
            period,
            bound,
            bound_provenance: Provenance::ClosedForm,
            lipschitz,
            lipschitz_provenance: prov,
        })
    }

    /// Free-form feedback; validates periodicity and finiteness by sampling and
    /// estimates N and L.
    pub fn custom(exprs: Vec<FeedbackExpr>, period: f64) -> Result<Self, FeedbackError> {
        let mut spec = Self::custom_unchecked(exprs, period, Vec::new(), 0.0)?;
        spec.check_periodic()?;
        let lattice = orthant_lattice(spec.d);
        let (bound, lipschitz) = spec.estimate_constants(&lattice)?;
        spec.bound = bound;
        spec.lipschitz = lipschitz;
        Ok(spec)
    }

    /// Free-form feedback with caller-supplied constants and no validation.
    /// Intended for controlled experiments; a non-periodic h breaks the model.
    pub fn custom_unchecked(exprs: Vec<FeedbackExpr>, period: f64, bound: Vec<f64>, lipschitz: f64) -> Result<Self, FeedbackError> {
        let d = exprs.len();
        if d == 0 {
            return Err(FeedbackError::Parameter("no feedback components".into()));
        }
        if let Some(e) = exprs.iter().find(|e| e.dim != d) {
            return Err(FeedbackError::Parameter(format!(
                "expression parsed for dimension {} in a {d}-dimensional system",
                e.dim
            )));
        }
        let bound = if bound.is_empty() { vec![0.0; d] } else { bound };
        Ok(FeedbackSpec {
            kind: FeedbackKind::Custom(exprs),
            d,
            period,
            bound,
            bound_provenance: Provenance::Estimated,
            lipschitz,
            lipschitz_provenance: Provenance::Estimated,
        })
    }

    pub fn max_bound(&self) -> f64 {
        self.bound.iter().cloned().fold(0.0, f64::max)
    }

    /// Writes h(t, |x|) into `out`.
    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        match &self.kind {
            FeedbackKind::Goodwin { v, k, m } => {
                let y = pow_m(x[self.d - 1].abs(), *m);
                out.fill(0.0);
                out[0] = v / (k + t.sin() + y);
            }
            FeedbackKind::OthmerTyson { k0, k, m } => {
                let y = pow_m(x[self.d - 1].abs(), *m);
                out.fill(0.0);
                out[0] = k0 * (1.0 + y) / (k + t.sin() + y);
            }
            FeedbackKind::Competitive { k, m } => {
                let s: f64 = x.iter().map(|xi| pow_m(xi.abs(), *m)).sum();
                let st = t.sin().abs();
                for (o, ki) in out.iter_mut().zip(k) {
                    *o = st + 1.0 / (ki + s);
                }
            }
            FeedbackKind::Custom(exprs) => {
                for (o, e) in out.iter_mut().zip(exprs) {
                    *o = e.eval(t, x)?;
                }
            }
        }
        Ok(())
    }

    /// True when h does not depend on the state at all.
    pub fn is_state_independent(&self) -> bool {
        match &self.kind {
            FeedbackKind::Custom(exprs) => exprs.iter().all(|e| !e.root.depends_on_state()),
            _ => false,
        }
    }

    fn check_periodic(&self) -> Result<(), FeedbackError> {
        let mut rng = ChaCha8Rng::seed_from_u64(SAMPLER_SEED);
        let d = self.d;
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        let xs: Vec<Vec<f64>> = (0..64)
            .map(|_| (0..d).map(|_| rng.random::<f64>() * 10.0).collect())
            .collect();
        for i in 0..64 {
            let t = self.period * i as f64 / 64.0;
            for x in &xs {
                self.eval(t, x, &mut a).map_err(FeedbackError::Unsafe)?;
                self.eval(t + self.period, x, &mut b).map_err(FeedbackError::Unsafe)?;
                for (p, q) in a.iter().zip(&b) {
                    let gap = (p - q).abs();
                    if !(gap <= PERIODICITY_TOL) {
                        return Err(FeedbackError::NotPeriodic { period: self.period, t, gap });
                    }
                }
            }
        }
        Ok(())
    }

    /// Sampled sup |h_i| and sup |dh_i/dx_j|, both inflated by 5%. Every
    /// evaluation on the lattice must be finite.
    fn estimate_constants(&self, lattice: &[Vec<f64>]) -> Result<(Vec<f64>, f64), FeedbackError> {
        let d = self.d;
        let mut n = vec![0.0f64; d];
        let mut l = 0.0f64;
        let mut h = vec![0.0; d];
        let mut hp = vec![0.0; d];
        let mut hm = vec![0.0; d];
        let mut xp = vec![0.0; d];
        for it in 0..16 {
            let t = self.period * it as f64 / 16.0;
            let with_slope = it % 2 == 0;
            for x in lattice {
                self.eval(t, x, &mut h).map_err(FeedbackError::Unsafe)?;
                for (ni, hi) in n.iter_mut().zip(&h) {
                    *ni = ni.max(hi.abs());
                }
                if !with_slope {
                    continue;
                }
                for j in 0..d {
                    let delta = 1e-6 * x[j].max(1.0);
                    xp.copy_from_slice(x);
                    // one-sided near the boundary of the orthant
                    let slope_pairs = if x[j] < delta {
                        xp[j] = x[j] + delta;
                        self.eval(t, &xp, &mut hp).map_err(FeedbackError::Unsafe)?;
                        h.iter().zip(&hp).map(|(a, b)| (b - a) / delta).collect::<Vec<_>>()
                    } else {
                        xp[j] = x[j] + delta;
                        self.eval(t, &xp, &mut hp).map_err(FeedbackError::Unsafe)?;
                        xp[j] = x[j] - delta;
                        self.eval(t, &xp, &mut hm).map_err(FeedbackError::Unsafe)?;
                        hp.iter().zip(&hm).map(|(a, b)| (a - b) / (2.0 * delta)).collect()
                    };
                    for s in slope_pairs {
                        l = l.max(s.abs());
                    }
                }
            }
        }
        Ok((n.into_iter().map(|v| v * SAFETY).collect(), l * SAFETY))
    }
}

/// Log-spaced points of the nonnegative orthant, eight per decade from 1e-3 to
/// 1e6 plus zero on each axis; randomly thinned when the full product is large.
pub fn orthant_lattice(d: usize) -> Vec<Vec<f64>> {
    let mut axis = vec![0.0];
    axis.extend((-24..=48).map(|k| 10f64.powf(k as f64 / 8.0)));
    let full = (axis.len() as f64).powi(d as i32);
    if full <= LATTICE_CAP as f64 {
        let mut pts = vec![Vec::with_capacity(d)];
        for _ in 0..d {
            pts = pts
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |&a| {
                        let mut q = p.clone();
                        q.push(a);
                        q
                    })
                })
                .collect();
        }
        pts
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(SAMPLER_SEED ^ d as u64);
        let mut pts: Vec<Vec<f64>> = (0..axis.len()).map(|i| vec![axis[i]; d]).collect();
        while pts.len() < LATTICE_CAP {
            pts.push((0..d).map(|_| axis[rng.random_range(0..axis.len())]).collect());
        }
        pts
    }
}
