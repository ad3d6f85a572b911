//! System descriptions: the spec-file format, the expression language for
//! feedback components, and the validated [`SystemSpec`].

pub mod expr;
pub mod feedback;
mod file;

pub use expr::{eval_expr, parse_expr, EvalError, ExprError, FeedbackExpr};
pub use feedback::{FeedbackError, FeedbackKind, FeedbackSpec, LipschitzMode, Provenance};
pub use file::{parse_system, SpecError};

use nalgebra::DMatrix;

use crate::linearflow::{BoundRule, RateRule};

/// Optional envelope settings carried by a spec file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnvelopeHints {
    pub lambda: Option<f64>,
    pub bound_rule: Option<BoundRule>,
    pub rate_rule: Option<RateRule>,
    /// A user-supplied sup_t E R(t) bound for systems without a closed form.
    pub sup_er: Option<f64>,
}

/// dX = (A X + h(t, X)) dt + sum_k sigma_k X dW^k.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub d: usize,
    pub drift: DMatrix<f64>,
    /// `noise[k][i]` is the i-th diagonal entry of sigma_k. There is one entry
    /// per Brownian component.
    pub noise: Vec<Vec<f64>>,
    pub feedback: FeedbackSpec,
    pub period: f64,
    pub envelope: EnvelopeHints,
}

impl SystemSpec {
    /// Checks the structural invariants and assembles a spec.
    pub fn new(drift: DMatrix<f64>, noise: Vec<Vec<f64>>, feedback: FeedbackSpec, period: f64) -> Result<Self, SpecError> {
        let d = drift.nrows();
        if drift.ncols() != d || d == 0 {
            return Err(SpecError::DimensionMismatch(format!(
                "drift is {}x{}, expected a nonempty square matrix",
                drift.nrows(),
                drift.ncols()
            )));
        }
        if let Some(k) = noise.iter().position(|n| n.len() != d) {
            return Err(SpecError::DimensionMismatch(format!(
                "noise {} has {} diagonal entries, expected {d}",
                k + 1,
                noise[k].len()
            )));
        }
        if feedback.d != d {
            return Err(SpecError::DimensionMismatch(format!(
                "feedback has {} components, expected {d}",
                feedback.d
            )));
        }
        if !(period > 0.0) || !period.is_finite() {
            return Err(SpecError::NonPositivePeriod(period));
        }
        for i in 0..d {
            for j in 0..d {
                if i != j && drift[(i, j)] < 0.0 {
                    return Err(SpecError::NonCooperative { i: i + 1, j: j + 1, value: drift[(i, j)] });
                }
            }
        }
        if drift.iter().chain(noise.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(SpecError::Invalid("non-finite coefficient".into()));
        }
        let noise = if noise.is_empty() { vec![vec![0.0; d]] } else { noise };
        Ok(SystemSpec { d, drift, noise, feedback, period, envelope: EnvelopeHints::default() })
    }

    /// Number of Brownian components driving the system.
    pub fn noise_dim(&self) -> usize {
        self.noise.len()
    }

    /// sum_k (sigma_k^i)^2 for each i.
    pub fn noise_power(&self) -> Vec<f64> {
        (0..self.d).map(|i| self.noise.iter().map(|s| s[i] * s[i]).sum()).collect()
    }

    /// Replaces the feedback, keeping the linear part.
    pub fn with_feedback(&self, feedback: FeedbackSpec) -> Result<Self, SpecError> {
        let mut s = SystemSpec::new(self.drift.clone(), self.noise.clone(), feedback, self.period)?;
        s.envelope = self.envelope.clone();
        Ok(s)
    }
}
