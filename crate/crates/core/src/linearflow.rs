//! The linear cocycle: fundamental matrix, closed forms for single-loop and
//! diagonal systems, and the decay envelope ||Phi(t)|| <= R(t) e^{-lambda t}.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use std::io::{self, Write};
use thiserror::Error;

use crate::specparse::{EnvelopeHints, SystemSpec};
use crate::stats;
use crate::wiener::{Ensemble, GridIndex, WienerError, WienerGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinearFlowError {
    #[error(transparent)]
    Grid(#[from] WienerError),
    #[error("path window [{lo}, {hi}] does not cover [{a}, {b}]")]
    Window { a: GridIndex, b: GridIndex, lo: GridIndex, hi: GridIndex },
    #[error("system is not of single-loop form: {0}")]
    NotSingleLoop(String),
    #[error("drift is not diagonal: {0}")]
    NotDiagonal(String),
    #[error("fundamental matrix is singular at index {0}")]
    Singular(GridIndex),
    #[error("invalid decay rate: {0}")]
    Rate(String),
    #[error("maximal inequality needs mu < 0, got {0}")]
    Drift(f64),
    #[error("no decay envelope available: {0}")]
    NoEnvelope(String),
    #[error("envelope has no closed form to sample")]
    NotSampleable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    EulerMaruyama,
    Milstein,
}

/// Which (i, j) terms enter the sup E R bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoundRule {
    /// sum over all i and j <= i
    #[default]
    Full,
    /// only the last row, i = n
    LastRow,
}

/// Decay rate assigned to R_ii.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RateRule {
    /// mu_i = i * lambda, valid for lambda <= min alpha/(n+1)
    #[default]
    Uniform,
    /// mu_i = alpha_i - (n+1-i) lambda
    Sharp,
}

/// B = diag(sum_k (sigma_k^i)^2) and the Stratonovich drift A - B/2.
pub fn stratonovich_drift(spec: &SystemSpec) -> (DMatrix<f64>, DMatrix<f64>) {
    let b = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(spec.noise_power()));
    (&spec.drift - &b * 0.5, b)
}

/// One grid step of the linear part, shared by every integrator in the crate
/// so that equal inputs give equal bits.
#[derive(Debug, Clone)]
pub struct LinearStep {
    pub d: usize,
    a: Vec<f64>,
    sig: Vec<Vec<f64>>,
    power: Vec<f64>,
    pub scheme: Scheme,
}

impl LinearStep {
    pub fn new(spec: &SystemSpec, scheme: Scheme) -> Self {
        let d = spec.d;
        let a = (0..d * d).map(|c| spec.drift[(c / d, c % d)]).collect();
        LinearStep { d, a, sig: spec.noise.clone(), power: spec.noise_power(), scheme }
    }

    pub fn noise_dim(&self) -> usize {
        self.sig.len()
    }

    /// Diagonal noise multipliers for one cell from its increments `dw`.
    #[inline]
    pub fn multipliers(&self, dw: &[f64], dt: f64, out: &mut [f64]) {
        for i in 0..self.d {
            let mut s = 0.0;
            for (k, sk) in self.sig.iter().enumerate() {
                s += sk[i] * dw[k];
            }
            out[i] = match self.scheme {
                Scheme::EulerMaruyama => s,
                Scheme::Milstein => s + 0.5 * (s * s - self.power[i] * dt),
            };
        }
    }

    /// out = x + (A x + f) dt + mul * x.
    #[inline]
    pub fn forced(&self, x: &[f64], f: &[f64], mul: &[f64], dt: f64, out: &mut [f64]) {
        let d = self.d;
        for i in 0..d {
            let row = &self.a[i * d..(i + 1) * d];
            let mut ax = 0.0;
            for j in 0..d {
                ax += row[j] * x[j];
            }
            out[i] = x[i] + (ax + f[i]) * dt + mul[i] * x[i];
        }
    }

    /// out = x + A x dt + mul * x, the homogeneous step.
    #[inline]
    pub fn homogeneous(&self, x: &[f64], mul: &[f64], dt: f64, out: &mut [f64]) {
        let d = self.d;
        for i in 0..d {
            let row = &self.a[i * d..(i + 1) * d];
            let mut ax = 0.0;
            for j in 0..d {
                ax += row[j] * x[j];
            }
            out[i] = x[i] + ax * dt + mul[i] * x[i];
        }
    }
}

/// Psi(t) = Phi(t - t0, theta_{t0} omega) sampled at t0, t0+1, ..., t1.
#[derive(Debug, Clone)]
pub struct Propagator {
    pub t0: GridIndex,
    pub samples: Vec<DMatrix<f64>>,
    /// Count of negative entries seen over all samples.
    pub negative_entries: usize,
}

impl Propagator {
    pub fn t1(&self) -> GridIndex {
        self.t0 + self.samples.len() as GridIndex - 1
    }

    pub fn at(&self, t: GridIndex) -> &DMatrix<f64> {
        &self.samples[(t - self.t0) as usize]
    }

    /// Psi(s)^{-1} v, by forward substitution when Psi(s) is lower triangular.
    pub fn solve_at(&self, s: GridIndex, v: &nalgebra::DVector<f64>) -> Result<nalgebra::DVector<f64>, LinearFlowError> {
        let m = self.at(s);
        if is_lower(m) {
            m.solve_lower_triangular(v).ok_or(LinearFlowError::Singular(s))
        } else {
            m.clone().lu().solve(v).ok_or(LinearFlowError::Singular(s))
        }
    }

    /// Psi(t) Psi(s)^{-1}, the propagator from s to t.
    pub fn factor(&self, t: GridIndex, s: GridIndex) -> Result<DMatrix<f64>, LinearFlowError> {
        let ms = self.at(s);
        let inv = if is_lower(ms) {
            ms.solve_lower_triangular(&DMatrix::identity(ms.nrows(), ms.ncols()))
                .ok_or(LinearFlowError::Singular(s))?
        } else {
            ms.clone().try_inverse().ok_or(LinearFlowError::Singular(s))?
        };
        Ok(self.at(t) * inv)
    }
}

fn is_lower(m: &DMatrix<f64>) -> bool {
    (0..m.nrows()).all(|i| (i + 1..m.ncols()).all(|j| m[(i, j)] == 0.0))
}

fn check_window(w: &WienerGrid, a: GridIndex, b: GridIndex) -> Result<(), LinearFlowError> {
    let (lo, hi) = w.index_range();
    if a > b || a < lo || b > hi {
        return Err(LinearFlowError::Window { a, b, lo, hi });
    }
    Ok(())
}

/// Euler-Maruyama (or Milstein) for dPhi = A Phi dt + sum_k sigma_k Phi dW^k,
/// column by column, from Psi(t0) = I.
pub fn integrate_propagator(spec: &SystemSpec, w: &WienerGrid, t0: GridIndex, t1: GridIndex, scheme: Scheme) -> Result<Propagator, LinearFlowError> {
    check_window(w, t0, t1)?;
    let step = LinearStep::new(spec, scheme);
    let d = spec.d;
    let r = step.noise_dim();
    let dt = w.dt();
    let mut cols: Vec<Vec<f64>> = (0..d).map(|j| (0..d).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let mut next = vec![0.0; d];
    let mut dw = vec![0.0; r];
    let mut mul = vec![0.0; d];
    let mut samples = Vec::with_capacity((t1 - t0 + 1) as usize);
    let mut negative = 0;
    samples.push(DMatrix::identity(d, d));
    for n in t0..t1 {
        for (k, v) in dw.iter_mut().enumerate() {
            *v = w.increment(k, n);
        }
        step.multipliers(&dw, dt, &mut mul);
        for col in cols.iter_mut() {
            step.homogeneous(col, &mul, dt, &mut next);
            col.copy_from_slice(&next);
        }
        let m = DMatrix::from_fn(d, d, |i, j| cols[j][i]);
        negative += m.iter().filter(|v| **v < 0.0).count();
        samples.push(m);
    }
    Ok(Propagator { t0, samples, negative_entries: negative })
}

/// Parameters of A = lower bidiagonal with diagonal -alpha_i and ones below,
/// noise sigma_i acting on component i only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SingleLoop {
    pub alphas: Vec<f64>,
    pub sigmas: Vec<f64>,
}

fn per_component_sigmas(spec: &SystemSpec) -> Result<Vec<f64>, String> {
    let d = spec.d;
    for (k, row) in spec.noise.iter().enumerate() {
        for (i, &v) in row.iter().enumerate() {
            if v != 0.0 && i != k {
                return Err(format!("noise {} acts on component {}", k + 1, i + 1));
            }
        }
    }
    Ok((0..d).map(|i| spec.noise.get(i).map(|r| r[i]).unwrap_or(0.0)).collect())
}

impl SingleLoop {
    pub fn detect(spec: &SystemSpec) -> Result<SingleLoop, LinearFlowError> {
        let d = spec.d;
        let a = &spec.drift;
        let mut alphas = Vec::with_capacity(d);
        for i in 0..d {
            for j in 0..d {
                let v = a[(i, j)];
                let ok = if i == j {
                    v < 0.0
                } else if j + 1 == i {
                    v == 1.0
                } else {
                    v == 0.0
                };
                if !ok {
                    return Err(LinearFlowError::NotSingleLoop(format!("entry ({},{}) = {v}", i + 1, j + 1)));
                }
            }
            alphas.push(-a[(i, i)]);
        }
        let sigmas = per_component_sigmas(spec).map_err(LinearFlowError::NotSingleLoop)?;
        Ok(SingleLoop { alphas, sigmas })
    }
}

/// Diagonal A = -diag(alpha) with per-component noise.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagonalForm {
    pub alphas: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl DiagonalForm {
    pub fn detect(spec: &SystemSpec) -> Result<DiagonalForm, LinearFlowError> {
        let d = spec.d;
        for i in 0..d {
            for j in 0..d {
                let v = spec.drift[(i, j)];
                if (i == j && !(v < 0.0)) || (i != j && v != 0.0) {
                    return Err(LinearFlowError::NotDiagonal(format!("entry ({},{}) = {v}", i + 1, j + 1)));
                }
            }
        }
        let sigmas = per_component_sigmas(spec).map_err(LinearFlowError::NotDiagonal)?;
        Ok(DiagonalForm { alphas: (0..d).map(|i| -spec.drift[(i, i)]).collect(), sigmas })
    }
}

/// Closed-form fundamental matrix of a single-loop system. Diagonal entries
/// are exponentials of the path; the lower triangle is the nested convolution
/// by left-endpoint quadrature, J(n+1) = rho_n (J(n) + g(n) dt).
pub fn closed_form_single_loop(spec: &SystemSpec, w: &WienerGrid, t0: GridIndex, t1: GridIndex) -> Result<Propagator, LinearFlowError> {
    let sl = SingleLoop::detect(spec)?;
    check_window(w, t0, t1)?;
    let d = spec.d;
    let dt = w.dt();
    let steps = (t1 - t0) as usize;
    let c: Vec<f64> = (0..d).map(|i| sl.alphas[i] + 0.5 * sl.sigmas[i] * sl.sigmas[i]).collect();
    let w0: Vec<f64> = (0..d).map(|i| if i < w.dim() { w.value(i, t0) } else { 0.0 }).collect();
    let mut samples = Vec::with_capacity(steps + 1);
    let mut cur = DMatrix::<f64>::identity(d, d);
    samples.push(cur.clone());
    for n in 0..steps {
        let t = t0 + n as GridIndex;
        let tau = (n + 1) as f64 * dt;
        let mut nxt = DMatrix::<f64>::zeros(d, d);
        for i in 0..d {
            let wi = if i < w.dim() { w.value(i, t + 1) - w0[i] } else { 0.0 };
            nxt[(i, i)] = (-c[i] * tau + sl.sigmas[i] * wi).exp();
            if i > 0 {
                let dwi = if i < w.dim() { w.increment(i, t) } else { 0.0 };
                let rho = (-c[i] * dt + sl.sigmas[i] * dwi).exp();
                for j in 0..i {
                    nxt[(i, j)] = rho * (cur[(i, j)] + cur[(i - 1, j)] * dt);
                }
            }
        }
        samples.push(nxt.clone());
        cur = nxt;
    }
    Ok(Propagator { t0, samples, negative_entries: 0 })
}

/// E sup_{t >= 0} exp((mu - sigma^2/2) t + sigma W_t) = 1 - sigma^2/(2 mu) for mu < 0.
pub fn max_inequality_gbm(mu: f64, sigma: f64) -> Result<f64, LinearFlowError> {
    if !(mu < 0.0) {
        return Err(LinearFlowError::Drift(mu));
    }
    Ok(1.0 - sigma * sigma / (2.0 * mu))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnvelopeOptions {
    pub lambda: Option<f64>,
    pub bound_rule: BoundRule,
    pub rate_rule: RateRule,
}

impl EnvelopeOptions {
    pub fn from_hints(h: &EnvelopeHints) -> Self {
        EnvelopeOptions {
            lambda: h.lambda,
            bound_rule: h.bound_rule.unwrap_or_default(),
            rate_rule: h.rate_rule.unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum EnvelopeForm {
    SingleLoop {
        alphas: Vec<f64>,
        sigmas: Vec<f64>,
        /// decay rate mu_i of R_ii
        rates: Vec<f64>,
        bound_rule: BoundRule,
        rate_rule: RateRule,
    },
    Diagonal { alphas: Vec<f64>, sigmas: Vec<f64> },
    Supplied,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayEnvelope {
    pub lambda: f64,
    pub form: EnvelopeForm,
    /// Analytic bound on sup_t E R(t).
    pub sup_er_bound: f64,
    /// E sup_t R_ii(t) for each component, when known.
    pub component_maxima: Vec<f64>,
}

/// Envelope of a single-loop system. The default lambda is min alpha/(n+1).
pub fn decay_envelope_single_loop(spec: &SystemSpec, opts: EnvelopeOptions) -> Result<DecayEnvelope, LinearFlowError> {
    let sl = SingleLoop::detect(spec)?;
    let n = sl.alphas.len();
    let a_min = sl.alphas.iter().cloned().fold(f64::INFINITY, f64::min);
    let lambda = opts.lambda.unwrap_or(a_min / (n + 1) as f64);
    if !(lambda > 0.0) {
        return Err(LinearFlowError::Rate(format!("lambda = {lambda}")));
    }
    let rates: Vec<f64> = match opts.rate_rule {
        RateRule::Uniform => {
            if lambda > a_min / (n + 1) as f64 * (1.0 + 1e-12) {
                return Err(LinearFlowError::Rate(format!(
                    "lambda = {lambda} exceeds min alpha/(n+1) = {}",
                    a_min / (n + 1) as f64
                )));
            }
            (1..=n).map(|i| i as f64 * lambda).collect()
        }
        RateRule::Sharp => (0..n).map(|i| sl.alphas[i] - (n - i) as f64 * lambda).collect(),
    };
    if let Some(i) = rates.iter().position(|m| !(*m > 0.0)) {
        return Err(LinearFlowError::Rate(format!("rate of R_{0}{0} is {1} <= 0", i + 1, rates[i])));
    }
    let maxima = rates
        .iter()
        .zip(&sl.sigmas)
        .map(|(m, s)| max_inequality_gbm(-m, *s))
        .collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<usize> = match opts.bound_rule {
        BoundRule::Full => (0..n).collect(),
        BoundRule::LastRow => vec![n - 1],
    };
    let mut bound = 0.0;
    for i in rows {
        for j in 0..=i {
            let prod: f64 = maxima[j..=i].iter().product();
            bound += prod / lambda.powi((i - j) as i32);
        }
    }
    Ok(DecayEnvelope {
        lambda,
        form: EnvelopeForm::SingleLoop {
            alphas: sl.alphas,
            sigmas: sl.sigmas,
            rates,
            bound_rule: opts.bound_rule,
            rate_rule: opts.rate_rule,
        },
        sup_er_bound: bound,
        component_maxima: maxima,
    })
}

/// Envelope of a diagonal system; lambda defaults to min alpha/2.
pub fn decay_envelope_diagonal(spec: &SystemSpec, lambda: Option<f64>) -> Result<DecayEnvelope, LinearFlowError> {
    let df = DiagonalForm::detect(spec)?;
    let a_min = df.alphas.iter().cloned().fold(f64::INFINITY, f64::min);
    let lambda = lambda.unwrap_or(a_min / 2.0);
    if !(lambda > 0.0) || lambda > a_min / 2.0 * (1.0 + 1e-12) {
        return Err(LinearFlowError::Rate(format!("lambda = {lambda} must lie in (0, {}]", a_min / 2.0)));
    }
    let maxima = df
        .sigmas
        .iter()
        .map(|s| max_inequality_gbm(-lambda, *s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DecayEnvelope {
        lambda,
        sup_er_bound: maxima.iter().sum(),
        form: EnvelopeForm::Diagonal { alphas: df.alphas, sigmas: df.sigmas },
        component_maxima: maxima,
    })
}

impl DecayEnvelope {
    /// Picks the envelope for a spec: a supplied (lambda, sup_er) pair, else
    /// the single-loop form, else the diagonal form.
    pub fn for_system(spec: &SystemSpec, lambda_override: Option<f64>) -> Result<DecayEnvelope, LinearFlowError> {
        let hints = &spec.envelope;
        let lambda = lambda_override.or(hints.lambda);
        if let Some(sup_er) = hints.sup_er {
            let lambda = lambda.ok_or_else(|| LinearFlowError::NoEnvelope("sup_er given without lambda".into()))?;
            if !(lambda > 0.0) || !(sup_er > 0.0) {
                return Err(LinearFlowError::Rate(format!("lambda = {lambda}, sup_er = {sup_er}")));
            }
            return Ok(DecayEnvelope { lambda, form: EnvelopeForm::Supplied, sup_er_bound: sup_er, component_maxima: Vec::new() });
        }
        match SingleLoop::detect(spec) {
            Ok(_) => {
                let mut opts = EnvelopeOptions::from_hints(hints);
                opts.lambda = lambda;
                decay_envelope_single_loop(spec, opts)
            }
            Err(sl_err) => match DiagonalForm::detect(spec) {
                Ok(_) => decay_envelope_diagonal(spec, lambda),
                Err(dg_err) => Err(LinearFlowError::NoEnvelope(format!(
                    "supply lambda and sup_er in [envelope] ({sl_err}; {dg_err})"
                ))),
            },
        }
    }

    /// R(t) on grid times t0..=t1, with time measured from t0 on theta_{t0} omega.
    pub fn sample(&self, w: &WienerGrid, t0: GridIndex, t1: GridIndex) -> Result<Vec<f64>, LinearFlowError> {
        check_window(w, t0, t1)?;
        let dt = w.dt();
        let steps = (t1 - t0) as usize;
        let wv = |i: usize, t: GridIndex| if i < w.dim() { w.value(i, t) - w.value(i, t0) } else { 0.0 };
        let dwv = |i: usize, t: GridIndex| if i < w.dim() { w.increment(i, t) } else { 0.0 };
        match &self.form {
            EnvelopeForm::Supplied => Err(LinearFlowError::NotSampleable),
            EnvelopeForm::Diagonal { sigmas, .. } => Ok((0..=steps)
                .map(|n| {
                    let tau = n as f64 * dt;
                    let t = t0 + n as GridIndex;
                    sigmas
                        .iter()
                        .enumerate()
                        .map(|(i, s)| (-(self.lambda + 0.5 * s * s) * tau + s * wv(i, t)).exp())
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect()),
            EnvelopeForm::SingleLoop { sigmas, rates, .. } => {
                let d = sigmas.len();
                let c: Vec<f64> = (0..d).map(|i| rates[i] + 0.5 * sigmas[i] * sigmas[i]).collect();
                let mut cur = DMatrix::<f64>::identity(d, d);
                let mut out = Vec::with_capacity(steps + 1);
                out.push(1.0);
                for n in 0..steps {
                    let t = t0 + n as GridIndex;
                    let tau = (n + 1) as f64 * dt;
                    let damp = (-self.lambda * n as f64 * dt).exp();
                    let mut nxt = DMatrix::<f64>::zeros(d, d);
                    for i in 0..d {
                        nxt[(i, i)] = (-c[i] * tau + sigmas[i] * wv(i, t + 1)).exp();
                        if i > 0 {
                            let rho = (-c[i] * dt + sigmas[i] * dwv(i, t)).exp();
                            for j in 0..i {
                                nxt[(i, j)] = rho * (cur[(i, j)] + damp * cur[(i - 1, j)] * dt);
                            }
                        }
                    }
                    out.push(nxt.max());
                    cur = nxt;
                }
                Ok(out)
            }
        }
    }
}

/// How Phi is obtained when checking the envelope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhiSource {
    /// closed form, compared with relative tolerance `rel_tol`
    ClosedForm { rel_tol: f64 },
    Integrated { scheme: Scheme, rel_tol: f64 },
}

impl Default for PhiSource {
    fn default() -> Self {
        PhiSource::ClosedForm { rel_tol: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayCheck {
    pub violations: usize,
    pub checks: usize,
    pub violation_fraction: f64,
    /// sup over grid times of the ensemble mean of R(t)
    pub sup_er_mc: f64,
    pub sup_er_se: f64,
    pub t_at_sup: f64,
    pub sup_er_bound: f64,
}

/// Counts grid times where max_ij |Phi_ij(t)| > R(t) e^{-lambda t} beyond the
/// tolerance, over paths started at index 0 and run for `steps` cells, and
/// estimates sup_t E R(t).
pub fn verify_decay(spec: &SystemSpec, env: &DecayEnvelope, ens: &Ensemble, steps: usize, source: PhiSource) -> Result<DecayCheck, LinearFlowError> {
    let t1 = steps as GridIndex;
    let dt = ens.dt();
    let per_path: Vec<(usize, Vec<f64>)> = ens
        .paths
        .par_iter()
        .map(|w| {
            let r = env.sample(w, 0, t1)?;
            let (phi, tol) = match source {
                PhiSource::ClosedForm { rel_tol } => match &env.form {
                    EnvelopeForm::SingleLoop { .. } => (closed_form_single_loop(spec, w, 0, t1)?, rel_tol),
                    _ => (diagonal_closed_form(spec, w, t1)?, rel_tol),
                },
                PhiSource::Integrated { scheme, rel_tol } => (integrate_propagator(spec, w, 0, t1, scheme)?, rel_tol),
            };
            let mut v = 0;
            for (n, m) in phi.samples.iter().enumerate() {
                let norm = m.iter().fold(0.0f64, |a, x| a.max(x.abs()));
                let env_v = r[n] * (-env.lambda * n as f64 * dt).exp();
                if norm > env_v * (1.0 + tol) {
                    v += 1;
                }
            }
            Ok((v, r))
        })
        .collect::<Result<Vec<_>, LinearFlowError>>()?;
    let violations: usize = per_path.iter().map(|p| p.0).sum();
    let checks = per_path.len() * (steps + 1);
    let (mut best, mut best_se, mut best_t) = (f64::NEG_INFINITY, 0.0, 0.0);
    for n in 0..=steps {
        let col: Vec<f64> = per_path.iter().map(|p| p.1[n]).collect();
        let (m, se) = stats::mean_se(&col);
        if m > best {
            best = m;
            best_se = se;
            best_t = n as f64 * dt;
        }
    }
    Ok(DecayCheck {
        violations,
        checks,
        violation_fraction: violations as f64 / checks.max(1) as f64,
        sup_er_mc: best,
        sup_er_se: best_se,
        t_at_sup: best_t,
        sup_er_bound: env.sup_er_bound,
    })
}

fn diagonal_closed_form(spec: &SystemSpec, w: &WienerGrid, t1: GridIndex) -> Result<Propagator, LinearFlowError> {
    let df = DiagonalForm::detect(spec)?;
    check_window(w, 0, t1)?;
    let d = spec.d;
    let dt = w.dt();
    let samples = (0..=t1)
        .map(|n| {
            DMatrix::from_fn(d, d, |i, j| {
                if i != j {
                    return 0.0;
                }
                let s = df.sigmas[i];
                let wi = if i < w.dim() { w.value(i, n) } else { 0.0 };
                (-(df.alphas[i] + 0.5 * s * s) * n as f64 * dt + s * wi).exp()
            })
        })
        .collect();
    Ok(Propagator { t0: 0, samples, negative_entries: 0 })
}

/// CSV with columns t, norm_phi, envelope.
pub fn write_decay_csv<W: Write>(mut out: W, phi: &Propagator, r: &[f64], lambda: f64, dt: f64) -> io::Result<()> {
    writeln!(out, "t,norm_phi,envelope")?;
    for (n, m) in phi.samples.iter().enumerate() {
        let t = (phi.t0 + n as GridIndex) as f64 * dt;
        let norm = m.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let env = r[n] * (-lambda * n as f64 * dt).exp();
        writeln!(out, "{},{},{}", crate::io::fmt_f64(t), crate::io::fmt_f64(norm), crate::io::fmt_f64(env))?;
    }
    Ok(())
}
