//! Pull-back experiments: phi(t, t - alpha - nT, omega) x0 for growing n on a
//! fixed path, the inf/sup envelopes of the feedback along them, and the
//! identities a realised random periodic solution must satisfy.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::io::fmt_f64;
use crate::operators::{GainContext, StateProcess};
use crate::sdeflow::{Flow, FlowError, FlowOptions};
use crate::specparse::{EvalError, SystemSpec};
use crate::stats;
use crate::wiener::{Ensemble, GridIndex};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PullbackError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("feedback evaluation failed: {0}")]
    Feedback(#[from] EvalError),
    #[error("invalid pull-back request: {0}")]
    Request(String),
    #[error("fan and process were computed on different paths")]
    PathMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PullbackRequest {
    /// observation time as a grid index
    pub t: GridIndex,
    /// offset alpha in grid cells, 0 <= alpha < steps per period
    pub alpha: GridIndex,
    pub n_min: usize,
    pub n_max: usize,
    pub x0: Vec<Vec<f64>>,
}

impl PullbackRequest {
    pub fn ns(&self) -> std::ops::RangeInclusive<usize> {
        self.n_min..=self.n_max
    }

    fn validate(&self, steps: GridIndex, d: usize) -> Result<(), PullbackError> {
        if self.n_min > self.n_max {
            return Err(PullbackError::Request(format!("empty n range {}..{}", self.n_min, self.n_max)));
        }
        if !(0..steps).contains(&self.alpha) {
            return Err(PullbackError::Request(format!("alpha = {} cells is outside [0, {steps})", self.alpha)));
        }
        if self.x0.is_empty() || self.x0.iter().any(|x| x.len() != d) {
            return Err(PullbackError::Request(format!("initial states must be nonempty {d}-vectors")));
        }
        Ok(())
    }

    fn start(&self, n: usize, steps: GridIndex) -> GridIndex {
        self.t - self.alpha - n as GridIndex * steps
    }
}

/// Terminal states indexed by (path, n, x0).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PullbackFan {
    pub request: PullbackRequest,
    pub d: usize,
    pub seeds: Vec<u64>,
    #[serde(skip)]
    terminal: Vec<f64>,
}

impl PullbackFan {
    fn n_count(&self) -> usize {
        self.request.n_max - self.request.n_min + 1
    }

    pub fn terminal(&self, path: usize, n: usize, x: usize) -> &[f64] {
        let (d, nx) = (self.d, self.request.x0.len());
        let k = (path * self.n_count() + (n - self.request.n_min)) * nx + x;
        &self.terminal[k * d..(k + 1) * d]
    }

    pub fn paths(&self) -> usize {
        self.seeds.len()
    }

    /// Per path, the largest max-norm distance between terminal states of
    /// different initial states.
    pub fn diameters(&self, n: usize) -> Vec<f64> {
        let nx = self.request.x0.len();
        (0..self.paths())
            .map(|p| {
                let mut m = 0.0f64;
                for a in 0..nx {
                    for b in a + 1..nx {
                        m = m.max(max_abs_diff(self.terminal(p, n, a), self.terminal(p, n, b)));
                    }
                }
                m
            })
            .collect()
    }

    /// Per path, max over x0 of |phi_{n+1} - phi_n|.
    pub fn cauchy_increments(&self, n: usize) -> Vec<f64> {
        let nx = self.request.x0.len();
        (0..self.paths())
            .map(|p| (0..nx).fold(0.0f64, |m, x| m.max(max_abs_diff(self.terminal(p, n + 1, x), self.terminal(p, n, x)))))
            .collect()
    }

    pub fn all_nonnegative(&self) -> bool {
        self.terminal.iter().all(|v| *v >= 0.0)
    }

    pub fn summary(&self, lambda: f64, period: f64) -> FanSummary {
        let ns: Vec<usize> = self.request.ns().collect();
        let rows: Vec<FanRow> = ns
            .iter()
            .map(|&n| {
                let (dm, dse) = stats::mean_se(&self.diameters(n));
                let cauchy = if n < self.request.n_max { Some(stats::mean_se(&self.cauchy_increments(n))) } else { None };
                FanRow { n, diameter: dm, diameter_se: dse, cauchy: cauchy.map(|c| c.0), cauchy_se: cauchy.map(|c| c.1) }
            })
            .collect();
        let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.diameter > 0.0).map(|r| (r.n as f64, r.diameter.ln())).collect();
        let fit = if pts.len() >= 2 {
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            stats::linear_fit(&x, &y).map(|(slope, _)| RateFit {
                slope,
                band: (-1.5 * lambda * period, -0.5 * lambda * period),
                within_band: slope >= -1.5 * lambda * period && slope <= -0.5 * lambda * period,
            })
        } else {
            None
        };
        FanSummary { rows, rate_fit: fit }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FanRow {
    pub n: usize,
    pub diameter: f64,
    pub diameter_se: f64,
    pub cauchy: Option<f64>,
    pub cauchy_se: Option<f64>,
}

/// Slope of ln(mean diameter) against n, compared with the heuristic band
/// [-1.5 lambda T, -0.5 lambda T] suggested by the linear envelope.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub band: (f64, f64),
    pub within_band: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FanSummary {
    pub rows: Vec<FanRow>,
    /// None when fewer than two positive diameters are available.
    pub rate_fit: Option<RateFit>,
}

impl FanSummary {
    /// True when each mean diameter is at most its predecessor plus
    /// `z` combined standard errors.
    pub fn diameters_nonincreasing(&self, z: f64) -> bool {
        self.rows.windows(2).all(|w| {
            let se = (w[0].diameter_se.powi(2) + w[1].diameter_se.powi(2)).sqrt();
            w[1].diameter <= w[0].diameter + z * se
        })
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()))
}

/// Runs phi(t, t - alpha - nT, omega) x0 for every path, n and x0.
pub fn run_pullback(spec: &SystemSpec, ens: &Ensemble, req: &PullbackRequest, opts: FlowOptions) -> Result<PullbackFan, PullbackError> {
    let flow = Flow::new(spec, ens.dt(), opts)?;
    let steps = flow.clock.steps_per_period;
    req.validate(steps, spec.d)?;
    let per_path: Vec<Vec<f64>> = ens
        .paths
        .par_iter()
        .map(|w| {
            let mut out = Vec::new();
            for n in req.ns() {
                for x0 in &req.x0 {
                    out.extend(flow.terminal(w, req.start(n, steps), req.t, x0)?);
                }
            }
            Ok(out)
        })
        .collect::<Result<_, FlowError>>()?;
    Ok(PullbackFan { request: req.clone(), d: spec.d, seeds: ens.seeds(), terminal: per_path.concat() })
}

/// Inf and sup of h(t, phi(t, t - alpha - mT) x) over m in [n, n_max], per
/// path and component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeDiagnostics {
    pub n_min: usize,
    pub n_max: usize,
    pub d: usize,
    /// lower[path][n - n_min][i]
    #[serde(skip)]
    pub lower: Vec<Vec<Vec<f64>>>,
    #[serde(skip)]
    pub upper: Vec<Vec<Vec<f64>>>,
    /// h(t, phi(t, t - alpha - nT) x) itself, same layout
    #[serde(skip)]
    pub values: Vec<Vec<Vec<f64>>>,
}

impl EnvelopeDiagnostics {
    /// Ensemble mean of b_n - a_n for each n and component.
    pub fn mean_gaps(&self) -> Vec<Vec<f64>> {
        let paths = self.lower.len() as f64;
        (0..=self.n_max - self.n_min)
            .map(|k| {
                (0..self.d)
                    .map(|i| self.lower.iter().zip(&self.upper).map(|(a, b)| b[k][i] - a[k][i]).sum::<f64>() / paths)
                    .collect()
            })
            .collect()
    }

    /// Ensemble mean of max_i (b_n - a_n)_i for each n.
    pub fn mean_max_gap(&self) -> Vec<f64> {
        let paths = self.lower.len() as f64;
        (0..=self.n_max - self.n_min)
            .map(|k| {
                self.lower
                    .iter()
                    .zip(&self.upper)
                    .map(|(a, b)| (0..self.d).fold(0.0f64, |m, i| m.max(b[k][i] - a[k][i])))
                    .sum::<f64>()
                    / paths
            })
            .collect()
    }

    /// a_n nondecreasing, b_n nonincreasing and a_n <= h_n <= b_n on every path.
    pub fn invariants_hold(&self) -> bool {
        self.lower.iter().zip(&self.upper).zip(&self.values).all(|((a, b), v)| {
            let ordered = (0..a.len()).all(|k| (0..self.d).all(|i| a[k][i] <= v[k][i] && v[k][i] <= b[k][i]));
            let mono = a.windows(2).zip(b.windows(2)).all(|(aw, bw)| (0..self.d).all(|i| aw[0][i] <= aw[1][i] && bw[1][i] <= bw[0][i]));
            ordered && mono
        })
    }
}

#[allow(clippy::too_many_arguments)]
pub fn envelope_diagnostics(spec: &SystemSpec, ens: &Ensemble, t: GridIndex, alpha: GridIndex, n_min: usize, n_max: usize, x0: &[f64], opts: FlowOptions) -> Result<EnvelopeDiagnostics, PullbackError> {
    let req = PullbackRequest { t, alpha, n_min, n_max, x0: vec![x0.to_vec()] };
    let fan = run_pullback(spec, ens, &req, opts)?;
    let flow = Flow::new(spec, ens.dt(), opts)?;
    let time = flow.time_arg(t);
    let d = spec.d;
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    let mut values = Vec::new();
    for p in 0..fan.paths() {
        let hs: Vec<Vec<f64>> = req
            .ns()
            .map(|n| {
                let mut h = vec![0.0; d];
                spec.feedback.eval(time, fan.terminal(p, n, 0), &mut h).map(|_| h)
            })
            .collect::<Result<_, _>>()?;
        let mut a = hs.clone();
        let mut b = hs.clone();
        for k in (0..hs.len().saturating_sub(1)).rev() {
            for i in 0..d {
                a[k][i] = a[k][i].min(a[k + 1][i]);
                b[k][i] = b[k][i].max(b[k + 1][i]);
            }
        }
        lower.push(a);
        upper.push(b);
        values.push(hs);
    }
    Ok(EnvelopeDiagnostics { n_min, n_max, d, lower, upper, values })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceResiduals {
    /// per window (s, t): median, mean and max over paths of
    /// |phi(t, s) Y(s) - Y(t)|
    pub windows: Vec<WindowResidual>,
    /// max |Y(r + T, omega) - Y(r, theta_T omega)|
    pub shift_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowResidual {
    pub s: GridIndex,
    pub t: GridIndex,
    pub median: f64,
    pub mean: f64,
    pub max: f64,
}

/// Checks phi(t, s) Y(s) = Y(t) and the shift identity of Y. Windows must lie
/// in the stored range [-K T, T).
pub fn verify_rps_invariance(ctx: &GainContext, y: &StateProcess, windows: &[(GridIndex, GridIndex)], opts: FlowOptions) -> Result<InvarianceResiduals, PullbackError> {
    let lay = ctx.layout;
    let steps = lay.clock.steps_per_period;
    let flow = Flow::new(ctx.spec, lay.clock.dt, opts)?;
    let paths = y.data.paths();
    if y.data.seeds != ctx.ens.seeds() {
        return Err(PullbackError::PathMismatch);
    }
    let mut out = Vec::new();
    for &(s, t) in windows {
        if s < lay.start() || t >= steps || s > t {
            return Err(PullbackError::Request(format!("window ({s}, {t}) outside [{}, {steps})", lay.start())));
        }
        let res: Vec<f64> = (0..paths)
            .into_par_iter()
            .map(|p| {
                let x = flow.terminal(&ctx.ens.paths[p], s, t, y.data.value(p, s))?;
                Ok(max_abs_diff(&x, y.data.value(p, t)))
            })
            .collect::<Result<_, FlowError>>()?;
        out.push(WindowResidual {
            s,
            t,
            median: stats::median(&res),
            mean: stats::mean_se(&res).0,
            max: res.iter().cloned().fold(0.0, f64::max),
        });
    }
    // Y(r, theta_{-T} omega) is stored one period earlier on omega's window
    let mut shift = 0.0f64;
    for p in 0..paths {
        for r in (lay.start() + steps)..steps {
            shift = shift.max(max_abs_diff(y.data.value(p, r - steps), y.data.shifted_value(p, 1, r)));
        }
    }
    Ok(InvarianceResiduals { windows: out, shift_residual: shift })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Agreement {
    pub n: usize,
    /// median over paths of max over x0 of |phi(t, t - alpha - nT) x0 - Y(t)|
    pub median: f64,
    pub mean: f64,
}

/// Distance between the pull-back terminal states and Y(t) for every n in the
/// fan. The observation time must lie in [0, T).
pub fn crosscheck_pullback_vs_fixpoint(fan: &PullbackFan, y: &StateProcess) -> Result<Vec<Agreement>, PullbackError> {
    if fan.seeds != y.data.seeds {
        return Err(PullbackError::PathMismatch);
    }
    let t = fan.request.t;
    if !(0..y.data.layout.clock.steps_per_period).contains(&t) {
        return Err(PullbackError::Request(format!("observation index {t} is outside the stored period")));
    }
    Ok(fan
        .request
        .ns()
        .map(|n| {
            let dist: Vec<f64> = (0..fan.paths())
                .map(|p| (0..fan.request.x0.len()).fold(0.0f64, |m, x| m.max(max_abs_diff(fan.terminal(p, n, x), y.data.value(p, t)))))
                .collect();
            Agreement { n, median: stats::median(&dist), mean: stats::mean_se(&dist).0 }
        })
        .collect())
}

/// CSV with columns n, diameter, diameter_se, cauchy, cauchy_se, gap. Cells
/// without a value are left empty.
pub fn write_fan_csv<W: Write>(mut out: W, summary: &FanSummary, gaps: Option<&[f64]>) -> io::Result<()> {
    writeln!(out, "n,diameter,diameter_se,cauchy,cauchy_se,gap")?;
    for (k, r) in summary.rows.iter().enumerate() {
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.n,
            fmt_f64(r.diameter),
            fmt_f64(r.diameter_se),
            opt(r.cauchy),
            opt(r.cauchy_se),
            opt(gaps.and_then(|g| g.get(k).copied()))
        )?;
    }
    Ok(())
}
