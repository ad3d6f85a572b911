//! Random periodic solutions of periodically forced stochastic feedback
//! systems with linear multiplicative noise,
//!
//! ```text
//! dX = (A X + h(t, X)) dt + sum_k sigma_k X dW^k,
//! ```
//!
//! with A cooperative, sigma_k diagonal and h bounded, Lipschitz and
//! T-periodic in t. The crate simulates the stochastic flow on seeded,
//! shift-consistent Brownian paths, evaluates the small-gain certificate,
//! computes the fixed point of the gain operator, and runs pull-back
//! experiments against it.

// NaN must fail the positivity checks, hence the negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conditions;
pub mod io;
pub mod linearflow;
pub mod operators;
pub mod presets;
pub mod pullback;
pub mod sdeflow;
pub mod specparse;
pub mod stats;
pub mod wiener;

pub use conditions::{assemble_report, SmallGainReport, Verdict};
pub use linearflow::{DecayEnvelope, Propagator, Scheme};
pub use operators::{GainConfig, GainContext, PeriodicProcess, StateProcess};
pub use pullback::{PullbackFan, PullbackRequest};
pub use sdeflow::{FlowOptions, TimeConvention, Trajectory};
pub use specparse::{parse_system, FeedbackSpec, SystemSpec};
pub use wiener::{Clock, Ensemble, GridIndex, GridSpec, WienerGrid};
