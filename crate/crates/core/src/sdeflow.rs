//! The nonlinear flow phi(t, s, omega) x of dX = (AX + h(t,X)) dt + sum sigma_k X dW^k.
//!
//! Each step is
//! `X_{n+1} = X_n + (A X_n + h(t_n, |X_n|)) dt + sum_k sigma_k X_n dW_n^k`,
//! after which negative components are set to zero and counted.
//! Time enters h through its phase on the grid (see [`TimeConvention`]), so
//! a run over [s + T, t + T] on omega and a run over [s, t] on theta_T omega
//! perform the same floating point operations.

use std::io::{self, Write};

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::io::fmt_f64;
use crate::linearflow::{integrate_propagator, LinearFlowError, LinearStep, Scheme};
use crate::specparse::{EvalError, SystemSpec};
use crate::wiener::{Clock, GridIndex, WienerError, WienerGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    Grid(#[from] WienerError),
    #[error(transparent)]
    Linear(#[from] LinearFlowError),
    #[error("path window [{lo}, {hi}] does not cover [{a}, {b}]")]
    Window { a: GridIndex, b: GridIndex, lo: GridIndex, hi: GridIndex },
    #[error("initial state must be finite, nonnegative and of length {0}")]
    InitialState(usize),
    #[error("state blew up at grid index {index}: {state:?}")]
    BlowUp { index: GridIndex, state: Vec<f64> },
    #[error("feedback evaluation failed at grid index {index}: {source}")]
    Feedback { index: GridIndex, source: EvalError },
    #[error("noise dimension {system} exceeds path dimension {path}")]
    NoiseDim { system: usize, path: usize },
}

/// How the time argument of h is formed from a grid index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeConvention {
    /// `(i mod P) * dt` with P steps per period.
    #[default]
    PhaseReduced,
    /// `i * dt`.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlowOptions {
    pub scheme: Scheme,
    pub time: TimeConvention,
}

/// States at grid indices s, s+1, ..., t1 along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub s: GridIndex,
    pub d: usize,
    pub seed: u64,
    states: Vec<f64>,
    pub projection_events: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn t1(&self) -> GridIndex {
        self.s + self.len() as GridIndex - 1
    }

    /// State at grid index `i`.
    pub fn at(&self, i: GridIndex) -> &[f64] {
        let k = (i - self.s) as usize;
        &self.states[k * self.d..(k + 1) * self.d]
    }

    pub fn last(&self) -> &[f64] {
        self.at(self.t1())
    }

    pub fn iter(&self) -> impl Iterator<Item = (GridIndex, &[f64])> {
        self.states.chunks(self.d).enumerate().map(move |(k, x)| (self.s + k as GridIndex, x))
    }
}

/// A prepared integrator for one system and step size.
#[derive(Debug, Clone)]
pub struct Flow<'a> {
    pub spec: &'a SystemSpec,
    pub clock: Clock,
    pub opts: FlowOptions,
    step: LinearStep,
}

impl<'a> Flow<'a> {
    pub fn new(spec: &'a SystemSpec, dt: f64, opts: FlowOptions) -> Result<Self, FlowError> {
        let clock = Clock::from_dt(spec.period, dt)?;
        Ok(Flow { spec, clock, opts, step: LinearStep::new(spec, opts.scheme) })
    }

    #[inline]
    pub fn time_arg(&self, i: GridIndex) -> f64 {
        match self.opts.time {
            TimeConvention::PhaseReduced => self.clock.phase(i),
            TimeConvention::Absolute => self.clock.time(i),
        }
    }

    fn check(&self, w: &WienerGrid, s: GridIndex, t1: GridIndex, x0: &[f64]) -> Result<(), FlowError> {
        let d = self.spec.d;
        if x0.len() != d || x0.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(FlowError::InitialState(d));
        }
        if self.step.noise_dim() > w.dim() {
            return Err(FlowError::NoiseDim { system: self.step.noise_dim(), path: w.dim() });
        }
        let (lo, hi) = w.index_range();
        if s > t1 || s < lo || t1 > hi {
            return Err(FlowError::Window { a: s, b: t1, lo, hi });
        }
        Ok(())
    }

    /// Runs from `x0` at index `s` to `t1`, calling `visit` on every state.
    pub fn run<F: FnMut(GridIndex, &[f64])>(&self, w: &WienerGrid, s: GridIndex, t1: GridIndex, x0: &[f64], mut visit: F) -> Result<(Vec<f64>, usize), FlowError> {
        self.check(w, s, t1, x0)?;
        let d = self.spec.d;
        let r = self.step.noise_dim();
        let dt = self.clock.dt;
        let mut x = x0.to_vec();
        let mut next = vec![0.0; d];
        let mut h = vec![0.0; d];
        let mut mul = vec![0.0; d];
        let mut dw = vec![0.0; r];
        let mut events = 0;
        visit(s, &x);
        for n in s..t1 {
            for (k, v) in dw.iter_mut().enumerate() {
                *v = w.increment(k, n);
            }
            self.spec
                .feedback
                .eval(self.time_arg(n), &x, &mut h)
                .map_err(|source| FlowError::Feedback { index: n, source })?;
            self.step.multipliers(&dw, dt, &mut mul);
            self.step.forced(&x, &h, &mul, dt, &mut next);
            for v in next.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                    events += 1;
                } else if !v.is_finite() {
                    return Err(FlowError::BlowUp { index: n + 1, state: next.clone() });
                }
            }
            std::mem::swap(&mut x, &mut next);
            visit(n + 1, &x);
        }
        Ok((x, events))
    }

    pub fn evolve(&self, w: &WienerGrid, s: GridIndex, t1: GridIndex, x0: &[f64]) -> Result<Trajectory, FlowError> {
        let mut states = Vec::with_capacity(((t1 - s).max(0) as usize + 1) * x0.len());
        let (_, events) = self.run(w, s, t1, x0, |_, x| states.extend_from_slice(x))?;
        Ok(Trajectory { s, d: self.spec.d, seed: w.seed(), states, projection_events: events })
    }

    /// Final state only.
    pub fn terminal(&self, w: &WienerGrid, s: GridIndex, t1: GridIndex, x0: &[f64]) -> Result<Vec<f64>, FlowError> {
        Ok(self.run(w, s, t1, x0, |_, _| {})?.0)
    }

    /// The homogeneous flow applied to `x0`, with the same multipliers as [`Flow::run`].
    pub fn linear(&self, w: &WienerGrid, s: GridIndex, t1: GridIndex, x0: &[f64]) -> Result<Vec<Vec<f64>>, FlowError> {
        self.check(w, s, t1, x0)?;
        let d = self.spec.d;
        let dt = self.clock.dt;
        let mut x = x0.to_vec();
        let mut next = vec![0.0; d];
        let mut mul = vec![0.0; d];
        let mut dw = vec![0.0; self.step.noise_dim()];
        let mut out = vec![x.clone()];
        for n in s..t1 {
            for (k, v) in dw.iter_mut().enumerate() {
                *v = w.increment(k, n);
            }
            self.step.multipliers(&dw, dt, &mut mul);
            self.step.homogeneous(&x, &mul, dt, &mut next);
            std::mem::swap(&mut x, &mut next);
            out.push(x.clone());
        }
        Ok(out)
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (p, q)| m.max((p - q).abs()))
}

/// Trajectory from `x0` at `s` to `t1` on `w`.
pub fn evolve(spec: &SystemSpec, w: &WienerGrid, s: GridIndex, t1: GridIndex, x0: &[f64], opts: FlowOptions) -> Result<Trajectory, FlowError> {
    Flow::new(spec, w.dt(), opts)?.evolve(w, s, t1, x0)
}

/// max over [r, t] of |phi(., s) x0 - phi(., r) phi(r, s) x0|.
pub fn verify_flow_property(spec: &SystemSpec, w: &WienerGrid, s: GridIndex, r: GridIndex, t: GridIndex, x0: &[f64], opts: FlowOptions) -> Result<f64, FlowError> {
    let flow = Flow::new(spec, w.dt(), opts)?;
    let direct = flow.evolve(w, s, t, x0)?;
    let mid = flow.terminal(w, s, r, x0)?;
    let second = flow.evolve(w, r, t, &mid)?;
    Ok((r..=t).fold(0.0, |m, i| m.max(max_abs_diff(direct.at(i), second.at(i)))))
}

/// max over the grid of |phi(. + T, s + T, omega) x0 - phi(., s, theta_T omega) x0| on [s, t].
pub fn verify_period_shift(spec: &SystemSpec, w: &WienerGrid, s: GridIndex, t: GridIndex, x0: &[f64], opts: FlowOptions) -> Result<f64, FlowError> {
    let flow = Flow::new(spec, w.dt(), opts)?;
    let p = flow.clock.steps_per_period;
    let a = flow.evolve(w, s + p, t + p, x0)?;
    let shifted = w.shift(p)?;
    let b = flow.evolve(&shifted, s, t, x0)?;
    Ok((s..=t).fold(0.0, |m, i| m.max(max_abs_diff(a.at(i + p), b.at(i)))))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MildResidual {
    /// max over grid times in [s, t]
    pub max: f64,
    /// at the final time t
    pub at_end: f64,
}

/// Compares the flow with Phi(t-s, theta_s omega) x0 plus the left-endpoint
/// quadrature of Psi(t) Psi(r)^{-1} h(r, X_r) dr.
pub fn mild_form_residual(spec: &SystemSpec, w: &WienerGrid, s: GridIndex, t: GridIndex, x0: &[f64], opts: FlowOptions) -> Result<MildResidual, FlowError> {
    let flow = Flow::new(spec, w.dt(), opts)?;
    let traj = flow.evolve(w, s, t, x0)?;
    let lin = flow.linear(w, s, t, x0)?;
    let psi = integrate_propagator(spec, w, s, t, opts.scheme)?;
    let d = spec.d;
    let dt = flow.clock.dt;
    let mut q = DVector::<f64>::zeros(d);
    let mut h = vec![0.0; d];
    let mut worst = 0.0f64;
    let mut last = 0.0;
    for n in s..=t {
        let k = (n - s) as usize;
        let mild = DVector::from_column_slice(&lin[k]) + psi.at(n) * &q;
        last = max_abs_diff(traj.at(n), mild.as_slice());
        worst = worst.max(last);
        if n < t {
            spec.feedback
                .eval(flow.time_arg(n), traj.at(n), &mut h)
                .map_err(|source| FlowError::Feedback { index: n, source })?;
            if h.iter().any(|v| *v != 0.0) {
                q += psi.solve_at(n, &DVector::from_column_slice(&h))? * dt;
            }
        }
    }
    Ok(MildResidual { max: worst, at_end: last })
}

/// CSV with columns t, x1..xd.
pub fn write_trajectory_csv<W: Write>(mut out: W, traj: &Trajectory, clock: &Clock) -> io::Result<()> {
    let mut header = String::from("t");
    for i in 1..=traj.d {
        header.push_str(&format!(",x{i}"));
    }
    writeln!(out, "{header}")?;
    for (i, x) in traj.iter() {
        let mut line = fmt_f64(clock.time(i));
        for v in x {
            line.push(',');
            line.push_str(&fmt_f64(*v));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}
