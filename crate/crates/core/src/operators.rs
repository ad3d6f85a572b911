//! The input-to-state operator K, the gain operator K^h = h(., K(.)), the
//! metric rho and Picard iteration.
//!
//! A process is stored per path on the window [-K T, T) of grid indices,
//! where K = ceil(M_trunc / T). The block [-kT, -kT + T) of path omega is the
//! period block of theta_{-kT} omega, so f(t + T, omega) = f(t, theta_T omega)
//! holds by construction.
//!
//! K(v)(t) is the left-endpoint sum of Psi(t) Psi(s)^{-1} v(s) ds from the
//! window start, evaluated by the recursion Y(n+1) = M_n (Y(n) + v(n) dt)
//! with M_n the homogeneous step. This is the same sum without forming
//! inverses of Psi.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::io::fmt_f64;
use crate::linearflow::{DecayEnvelope, LinearStep, Scheme};
use crate::specparse::{EvalError, SystemSpec};
use crate::stats;
use crate::wiener::{mix_seed, Clock, Ensemble, GridIndex, GridSpec, WienerError, WienerGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error(transparent)]
    Grid(#[from] WienerError),
    #[error("truncation tail {tail:e} exceeds tolerance {tol:e}; increase M_trunc")]
    Tail { tail: f64, tol: f64 },
    #[error("ensemble paths do not cover the window [{a}, {b}]")]
    Window { a: GridIndex, b: GridIndex },
    #[error("processes live on different ensembles or grids")]
    Mismatch,
    #[error("process value {value} outside [0, {bound}] in component {component}")]
    OutOfBounds { component: usize, value: f64, bound: f64 },
    #[error("feedback evaluation failed: {0}")]
    Feedback(#[from] EvalError),
    #[error("invalid gain configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainConfig {
    /// Length of history used for the lower limit of the K integral.
    pub m_trunc: f64,
    /// Admissible e^{-lambda M} sup E R max N / lambda.
    pub tail_tol: f64,
}

impl GainConfig {
    /// M_trunc = max(10/lambda, 5T).
    pub fn default_for(env: &DecayEnvelope, period: f64) -> Self {
        GainConfig { m_trunc: (10.0 / env.lambda).max(5.0 * period), tail_tol: 1e-3 }
    }

    pub fn tail_bound(&self, env: &DecayEnvelope, n_max: f64) -> f64 {
        (-env.lambda * self.m_trunc).exp() * env.sup_er_bound * n_max / env.lambda
    }

    pub fn validate(&self, env: &DecayEnvelope, n_max: f64) -> Result<(), OperatorError> {
        if !(self.m_trunc > 0.0) || !(self.tail_tol > 0.0) {
            return Err(OperatorError::Config(format!("M_trunc = {}, tail_tol = {}", self.m_trunc, self.tail_tol)));
        }
        let tail = self.tail_bound(env, n_max);
        if tail > self.tail_tol {
            return Err(OperatorError::Tail { tail, tol: self.tail_tol });
        }
        Ok(())
    }
}

/// Window geometry shared by all processes of one experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Layout {
    pub clock: Clock,
    /// Number of whole periods of history before [0, T).
    pub history: usize,
    pub d: usize,
}

impl Layout {
    pub fn new(clock: Clock, m_trunc: f64, d: usize) -> Self {
        let history = (m_trunc / clock.period - 1e-12).ceil().max(1.0) as usize;
        Layout { clock, history, d }
    }

    pub fn steps(&self) -> usize {
        self.clock.steps_per_period as usize
    }

    /// Grid index of the first stored time.
    pub fn start(&self) -> GridIndex {
        -(self.history as GridIndex) * self.clock.steps_per_period
    }

    /// Number of stored times per path.
    pub fn len(&self) -> usize {
        (self.history + 1) * self.steps()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A grid covering the window, with `extra_left` more cells of history.
    pub fn grid_spec(&self, noise_dim: usize, extra_left: GridIndex) -> Result<GridSpec, WienerError> {
        GridSpec::new(self.clock.dt, self.start() - extra_left, self.clock.steps_per_period, noise_dim)
    }
}

/// Values of a process on the window for every path of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessData {
    pub layout: Layout,
    pub seeds: Vec<u64>,
    values: Vec<f64>,
}

impl ProcessData {
    fn zeros(layout: Layout, seeds: Vec<u64>) -> Self {
        let n = seeds.len() * layout.len() * layout.d;
        ProcessData { layout, seeds, values: vec![0.0; n] }
    }

    pub fn paths(&self) -> usize {
        self.seeds.len()
    }

    fn path_slice(&self, p: usize) -> &[f64] {
        let w = self.layout.len() * self.layout.d;
        &self.values[p * w..(p + 1) * w]
    }

    /// Value at grid index `i` in [-K T, T) on path `p`.
    pub fn value(&self, p: usize, i: GridIndex) -> &[f64] {
        let d = self.layout.d;
        let k = (i - self.layout.start()) as usize;
        &self.path_slice(p)[k * d..(k + 1) * d]
    }

    /// f(t, theta_{-kT} omega_p) for t in [0, T), read from the window.
    pub fn shifted_value(&self, p: usize, k: usize, t: GridIndex) -> &[f64] {
        self.value(p, t - k as GridIndex * self.layout.clock.steps_per_period)
    }

    fn compatible(&self, other: &ProcessData) -> bool {
        self.layout == other.layout && self.seeds == other.seeds
    }

    /// Per-path values on [0, T), flattened.
    pub fn period_block(&self, p: usize) -> &[f64] {
        let d = self.layout.d;
        let off = self.layout.history * self.layout.steps() * d;
        &self.path_slice(p)[off..off + self.layout.steps() * d]
    }
}

/// An element of M: shift-consistent, valued in [0, N].
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicProcess {
    pub data: ProcessData,
    pub bound: Vec<f64>,
    /// Values pulled back into [0, N] when produced by K^h.
    pub clamped: usize,
}

/// Output of K: nonnegative but not bounded by N.
#[derive(Debug, Clone, PartialEq)]
pub struct StateProcess {
    pub data: ProcessData,
    /// Negative quadrature values replaced by 0.
    pub clamped: usize,
}

impl PeriodicProcess {
    pub fn constant(layout: Layout, ens: &Ensemble, c: &[f64], bound: &[f64]) -> Result<Self, OperatorError> {
        Self::from_fn(layout, ens, bound, |_, _, _, out| out.copy_from_slice(c))
    }

    /// Builds a process from `f(path index, path, grid index, out)`.
    pub fn from_fn<F>(layout: Layout, ens: &Ensemble, bound: &[f64], f: F) -> Result<Self, OperatorError>
    where
        F: Fn(usize, &WienerGrid, GridIndex, &mut [f64]) + Sync,
    {
        let mut data = ProcessData::zeros(layout, ens.seeds());
        let d = layout.d;
        let w = layout.len() * d;
        data.values.par_chunks_mut(w).enumerate().for_each(|(p, chunk)| {
            for (k, out) in chunk.chunks_mut(d).enumerate() {
                f(p, &ens.paths[p], layout.start() + k as GridIndex, out);
            }
        });
        for (k, v) in data.values.iter().enumerate() {
            let i = k % d;
            if !(*v >= 0.0 && *v <= bound[i]) {
                return Err(OperatorError::OutOfBounds { component: i, value: *v, bound: bound[i] });
            }
        }
        Ok(PeriodicProcess { data, bound: bound.to_vec(), clamped: 0 })
    }

    /// A random element of M: per component
    /// `N_i / (1 + exp(-(c0 + c1 sin(2 pi t/T + phi) + c2 (W(t) - W(t - tau)))))`,
    /// with coefficients drawn from `seed`.
    pub fn random(layout: Layout, ens: &Ensemble, bound: &[f64], seed: u64) -> Result<Self, OperatorError> {
        let d = layout.d;
        let unit = |j: u64| (mix_seed(seed, j) >> 11) as f64 / (1u64 << 53) as f64;
        let params: Vec<[f64; 5]> = (0..d as u64)
            .map(|i| {
                [
                    4.0 * unit(5 * i) - 2.0,
                    3.0 * unit(5 * i + 1),
                    4.0 * unit(5 * i + 2),
                    std::f64::consts::TAU * unit(5 * i + 3),
                    1.0 + (unit(5 * i + 4) * 0.25 * layout.steps() as f64).floor(),
                ]
            })
            .collect();
        let clock = layout.clock;
        let lag_max = params.iter().map(|p| p[4] as GridIndex).max().unwrap_or(1);
        let (lo, _) = ens.index_range();
        if lo > layout.start() - lag_max {
            return Err(OperatorError::Window { a: layout.start() - lag_max, b: clock.steps_per_period });
        }
        let r = ens.paths.first().map(|w| w.dim()).unwrap_or(0);
        Self::from_fn(layout, ens, bound, |_, w, t, out| {
            for (i, o) in out.iter_mut().enumerate() {
                let [c0, c1, c2, phi, lag] = params[i];
                let k = i % r;
                let dw = w.value(k, t) - w.value(k, t - lag as GridIndex);
                let z = c0 + c1 * (std::f64::consts::TAU * clock.phase(t) / clock.period + phi).sin() + c2 * dw;
                *o = (bound[i] / (1.0 + (-z).exp())).min(bound[i]);
            }
        })
    }
}

/// Estimate of rho(f1, f2) = sup_t E max_i |f1_i - f2_i| over t in [0, T).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RhoEstimate {
    pub value: f64,
    /// Standard error at the maximising time.
    pub se: f64,
    pub t_at_sup: f64,
    #[serde(skip)]
    pub per_t_mean: Vec<f64>,
    #[serde(skip)]
    pub per_t_se: Vec<f64>,
}

pub fn metric_rho(f1: &ProcessData, f2: &ProcessData) -> Result<RhoEstimate, OperatorError> {
    if !f1.compatible(f2) {
        return Err(OperatorError::Mismatch);
    }
    let lay = f1.layout;
    let d = lay.d;
    let paths = f1.paths();
    let cols: Vec<(f64, f64)> = (0..lay.steps())
        .into_par_iter()
        .map(|n| {
            let diffs: Vec<f64> = (0..paths)
                .map(|p| {
                    let a = &f1.period_block(p)[n * d..(n + 1) * d];
                    let b = &f2.period_block(p)[n * d..(n + 1) * d];
                    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
                })
                .collect();
            stats::mean_se(&diffs)
        })
        .collect();
    let mut best = 0;
    for (n, c) in cols.iter().enumerate() {
        if c.0 > cols[best].0 {
            best = n;
        }
    }
    Ok(RhoEstimate {
        value: cols[best].0,
        se: cols[best].1,
        t_at_sup: lay.clock.time(best as GridIndex),
        per_t_mean: cols.iter().map(|c| c.0).collect(),
        per_t_se: cols.iter().map(|c| c.1).collect(),
    })
}

/// Everything needed to apply K and K^h on one ensemble.
#[derive(Debug, Clone)]
pub struct GainContext<'a> {
    pub spec: &'a SystemSpec,
    pub envelope: &'a DecayEnvelope,
    pub ens: &'a Ensemble,
    pub cfg: GainConfig,
    pub layout: Layout,
    step: LinearStep,
}

impl<'a> GainContext<'a> {
    pub fn new(spec: &'a SystemSpec, envelope: &'a DecayEnvelope, ens: &'a Ensemble, cfg: GainConfig, scheme: Scheme) -> Result<Self, OperatorError> {
        cfg.validate(envelope, spec.feedback.max_bound())?;
        let clock = Clock::from_dt(spec.period, ens.dt())?;
        let layout = Layout::new(clock, cfg.m_trunc, spec.d);
        let (lo, hi) = ens.index_range();
        if lo > layout.start() || hi < clock.steps_per_period {
            return Err(OperatorError::Window { a: layout.start(), b: clock.steps_per_period });
        }
        if ens.paths.first().map(|w| w.dim()).unwrap_or(0) < spec.noise_dim() {
            return Err(OperatorError::Mismatch);
        }
        Ok(GainContext { spec, envelope, ens, cfg, layout, step: LinearStep::new(spec, scheme) })
    }

    /// The ensemble grid a context with these settings needs.
    pub fn required_grid(spec: &SystemSpec, cfg: &GainConfig, dt: f64) -> Result<GridSpec, OperatorError> {
        let clock = Clock::from_dt(spec.period, dt)?;
        Ok(Layout::new(clock, cfg.m_trunc, spec.d).grid_spec(spec.noise_dim(), clock.steps_per_period)?)
    }

    pub fn constant(&self, c: &[f64]) -> Result<PeriodicProcess, OperatorError> {
        PeriodicProcess::constant(self.layout, self.ens, c, &self.spec.feedback.bound)
    }

    /// N/2, the default starting point of the iteration.
    pub fn midpoint(&self) -> Result<PeriodicProcess, OperatorError> {
        let half: Vec<f64> = self.spec.feedback.bound.iter().map(|n| n / 2.0).collect();
        self.constant(&half)
    }

    fn check(&self, v: &ProcessData) -> Result<(), OperatorError> {
        if v.layout != self.layout || v.seeds.len() != self.ens.len() || v.seeds.iter().zip(&self.ens.paths).any(|(s, w)| *s != w.seed()) {
            return Err(OperatorError::Mismatch);
        }
        Ok(())
    }

    /// K(v) on the whole window.
    pub fn apply_k(&self, v: &ProcessData) -> Result<StateProcess, OperatorError> {
        self.check(v)?;
        let lay = self.layout;
        let d = lay.d;
        let dt = lay.clock.dt;
        let r = self.step.noise_dim();
        let mut out = ProcessData::zeros(lay, v.seeds.clone());
        let w_len = lay.len() * d;
        let clamped: usize = out
            .values
            .par_chunks_mut(w_len)
            .enumerate()
            .map(|(p, chunk)| {
                let w = &self.ens.paths[p];
                let vin = v.path_slice(p);
                let mut y = vec![0.0; d];
                let mut z = vec![0.0; d];
                let mut mul = vec![0.0; d];
                let mut dw = vec![0.0; r];
                let mut clamps = 0;
                for (k, o) in chunk.chunks_mut(d).enumerate() {
                    for i in 0..d {
                        if y[i] < 0.0 {
                            clamps += 1;
                            o[i] = 0.0;
                        } else {
                            o[i] = y[i];
                        }
                    }
                    let n = lay.start() + k as GridIndex;
                    for (kk, x) in dw.iter_mut().enumerate() {
                        *x = w.increment(kk, n);
                    }
                    self.step.multipliers(&dw, dt, &mut mul);
                    for i in 0..d {
                        z[i] = y[i] + vin[k * d + i] * dt;
                    }
                    self.step.homogeneous(&z, &mul, dt, &mut y);
                }
                clamps
            })
            .sum();
        Ok(StateProcess { data: out, clamped })
    }

    /// K^h(u) = h(t, K(u)(t)).
    pub fn apply_kh(&self, u: &PeriodicProcess) -> Result<PeriodicProcess, OperatorError> {
        let y = self.apply_k(&u.data)?;
        self.feedback_of(&y)
    }

    /// h(t, Y(t)) pointwise; values above N (possible only for estimated
    /// bounds) are clamped and counted.
    pub fn feedback_of(&self, y: &StateProcess) -> Result<PeriodicProcess, OperatorError> {
        let lay = self.layout;
        let d = lay.d;
        let fb = &self.spec.feedback;
        let mut out = ProcessData::zeros(lay, y.data.seeds.clone());
        let w_len = lay.len() * d;
        let res: Result<Vec<usize>, EvalError> = out
            .values
            .par_chunks_mut(w_len)
            .enumerate()
            .map(|(p, chunk)| {
                let ys = y.data.path_slice(p);
                let mut clamps = 0;
                for (k, o) in chunk.chunks_mut(d).enumerate() {
                    let t = lay.clock.phase(lay.start() + k as GridIndex);
                    fb.eval(t, &ys[k * d..(k + 1) * d], o)?;
                    for (i, v) in o.iter_mut().enumerate() {
                        if *v > fb.bound[i] || *v < 0.0 {
                            *v = v.clamp(0.0, fb.bound[i]);
                            clamps += 1;
                        }
                    }
                }
                Ok(clamps)
            })
            .collect();
        let clamped = res?.into_iter().sum();
        Ok(PeriodicProcess { data: out, bound: fb.bound.clone(), clamped })
    }

    /// Iterates u <- K^h(u) until rho(u_{k+1}, u_k) <= tol or `k_max` steps.
    pub fn picard(&self, u0: PeriodicProcess, k_max: usize, tol: f64) -> Result<PicardOutcome, OperatorError> {
        let mut u = u0;
        let mut residuals: Vec<RhoEstimate> = Vec::new();
        let mut converged = false;
        for _ in 0..k_max {
            let next = self.apply_kh(&u)?;
            let r = metric_rho(&next.data, &u.data)?;
            u = next;
            let done = r.value <= tol;
            residuals.push(r);
            if done {
                converged = true;
                break;
            }
        }
        if !converged {
            log::warn!("Picard iteration did not reach tol {tol:e} in {k_max} steps");
        }
        let ratios: Vec<f64> = residuals
            .windows(2)
            .filter(|w| w[0].value > 0.0)
            .map(|w| w[1].value / w[0].value)
            .collect();
        Ok(PicardOutcome {
            fixed_point: u,
            iterations: residuals.len(),
            converged,
            tol,
            max_ratio: ratios.iter().cloned().fold(f64::NAN, f64::max),
            ratios,
            residuals,
        })
    }

    /// Y = K(u*).
    pub fn realize_rps(&self, u_star: &PeriodicProcess) -> Result<StateProcess, OperatorError> {
        self.apply_k(&u_star.data)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PicardOutcome {
    #[serde(skip)]
    pub fixed_point: PeriodicProcess,
    pub iterations: usize,
    pub converged: bool,
    pub tol: f64,
    pub residuals: Vec<RhoEstimate>,
    /// r_{k+1} / r_k
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
}

/// Picard iteration from `u0`; warns when the small-gain constant is not below one.
pub fn picard_fixed_point(ctx: &GainContext, u0: PeriodicProcess, k_max: usize, tol: f64, kappa: Option<f64>) -> Result<PicardOutcome, OperatorError> {
    if let Some(k) = kappa {
        if k >= 1.0 {
            log::warn!("small-gain constant {k} >= 1, contraction is not guaranteed");
        }
    }
    ctx.picard(u0, k_max, tol)
}

/// CSV of per-time 5%, 50%, 95% ensemble quantiles of Y on [0, T).
pub fn write_quantiles_csv<W: Write>(mut out: W, y: &ProcessData) -> io::Result<()> {
    let d = y.layout.d;
    let mut header = String::from("t");
    for i in 1..=d {
        header.push_str(&format!(",x{i}_q05,x{i}_median,x{i}_q95"));
    }
    writeln!(out, "{header}")?;
    for n in 0..y.layout.steps() {
        let mut line = fmt_f64(y.layout.clock.time(n as GridIndex));
        for i in 0..d {
            let col: Vec<f64> = (0..y.paths()).map(|p| y.period_block(p)[n * d + i]).collect();
            for q in [0.05, 0.5, 0.95] {
                line.push(',');
                line.push_str(&fmt_f64(stats::quantile(&col, q)));
            }
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}
