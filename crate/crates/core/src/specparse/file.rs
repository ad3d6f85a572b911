//! Line-oriented spec files.
//!
//! ```text
//! [system] d=3 T=2pi
//! [drift]
//! row = -8, 0, 0
//! ...
//! [noise k=1]
//! diag = 0.5, 0, 0
//! [feedback]
//! kind = othmer_tyson
//! k0 = 1/12
//! ```
//!
//! A body line with a single `=` is `key = rest of line`; with several it is
//! a whitespace separated list of `key=value` tokens. Numeric values may be
//! closed constant expressions (`1/3`, `2.5e-3`). Optional sections:
//! `[envelope]` (lambda, bound, rates, sup_er).

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use thiserror::Error;

use super::expr::{eval_constant, parse_expr, ExprError};
use super::feedback::{FeedbackError, FeedbackSpec, LipschitzMode};
use super::{EnvelopeHints, SystemSpec};
use crate::linearflow::{BoundRule, RateRule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("line {line}, column {col}: syntax error: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("line {line}, column {col}: unknown key `{key}` in [{section}]")]
    UnknownKey { line: usize, col: usize, section: String, key: String },
    #[error("line {line}: missing key `{key}` in [{section}]")]
    MissingKey { line: usize, section: String, key: String },
    #[error("line {line}, column {col}: in expression: {source}")]
    Expr { line: usize, col: usize, source: ExprError },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("drift is not cooperative: a_{i}{j} = {value} < 0")]
    NonCooperative { i: usize, j: usize, value: f64 },
    #[error("noise matrix {k} is not diagonal: entry ({i},{j}) = {value}")]
    NonDiagonalNoise { k: usize, i: usize, j: usize, value: f64 },
    #[error("period must be positive, got {0}")]
    NonPositivePeriod(f64),
    #[error("feedback: {0}")]
    Feedback(#[from] FeedbackError),
    #[error("invalid system: {0}")]
    Invalid(String),
}

struct Entry {
    key: String,
    value: String,
    line: usize,
    col: usize,
}

struct Section {
    name: String,
    line: usize,
    entries: Vec<Entry>,
}

impl Section {
    fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().rev().find(|e| e.key == key)
    }

    fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| e.key == key)
    }

    fn require(&self, key: &str) -> Result<&Entry, SpecError> {
        self.get(key).ok_or_else(|| SpecError::MissingKey {
            line: self.line,
            section: self.name.clone(),
            key: key.to_string(),
        })
    }

    fn check_keys(&self, allowed: impl Fn(&str) -> bool) -> Result<(), SpecError> {
        match self.entries.iter().find(|e| !allowed(&e.key)) {
            Some(e) => Err(SpecError::UnknownKey {
                line: e.line,
                col: e.col,
                section: self.name.clone(),
                key: e.key.clone(),
            }),
            None => Ok(()),
        }
    }
}

fn split_pairs(text: &str, line: usize, base_col: usize, out: &mut Vec<Entry>) -> Result<(), SpecError> {
    let eqs = text.matches('=').count();
    if eqs == 0 {
        let col = base_col + text.len() - text.trim_start().len();
        return Err(SpecError::Syntax { line, col, msg: format!("expected key=value, found `{}`", text.trim()) });
    }
    if eqs == 1 {
        let (k, v) = text.split_once('=').unwrap();
        let col = base_col + text.len() - text.trim_start().len();
        let key = k.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(SpecError::Syntax { line, col, msg: format!("malformed key `{key}`") });
        }
        out.push(Entry { key: key.into(), value: v.trim().into(), line, col });
        return Ok(());
    }
    let mut offset = 0;
    for tok in text.split_whitespace() {
        let pos = text[offset..].find(tok).unwrap() + offset;
        offset = pos + tok.len();
        let col = base_col + pos;
        match tok.split_once('=') {
            Some((k, v)) if !k.is_empty() && !v.contains('=') => {
                out.push(Entry { key: k.into(), value: v.into(), line, col })
            }
            _ => return Err(SpecError::Syntax { line, col, msg: format!("malformed token `{tok}`") }),
        }
    }
    Ok(())
}

fn sections(text: &str) -> Result<Vec<Section>, SpecError> {
    let mut out: Vec<Section> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("");
        if body.trim().is_empty() {
            continue;
        }
        let lead = body.len() - body.trim_start().len();
        let trimmed = body.trim();
        if let Some(rest) = trimmed.strip_prefix('[') {
            let close = rest.find(']').ok_or(SpecError::Syntax {
                line,
                col: lead + 1,
                msg: "unterminated section header".into(),
            })?;
            let inside = &rest[..close];
            let mut words = inside.split_whitespace();
            let name = words.next().ok_or(SpecError::Syntax {
                line,
                col: lead + 1,
                msg: "empty section name".into(),
            })?;
            let mut sec = Section { name: name.to_string(), line, entries: Vec::new() };
            let attr_start = inside.find(name).unwrap() + name.len();
            let attrs = &inside[attr_start..];
            if !attrs.trim().is_empty() {
                split_pairs(attrs, line, lead + 2 + attr_start, &mut sec.entries)?;
            }
            let after = &rest[close + 1..];
            if !after.trim().is_empty() {
                split_pairs(after, line, lead + close + 3, &mut sec.entries)?;
            }
            out.push(sec);
        } else {
            let sec = out.last_mut().ok_or(SpecError::Syntax {
                line,
                col: lead + 1,
                msg: "key outside of any section".into(),
            })?;
            split_pairs(body, line, 1, &mut sec.entries)?;
        }
    }
    Ok(out)
}

fn real(e: &Entry) -> Result<f64, SpecError> {
    eval_constant(&e.value).map_err(|msg| SpecError::Syntax {
        line: e.line,
        col: e.col,
        msg: format!("`{}`: expected a real number ({msg})", e.key),
    })
}

fn int(e: &Entry) -> Result<usize, SpecError> {
    e.value.parse().map_err(|_| SpecError::Syntax {
        line: e.line,
        col: e.col,
        msg: format!("`{}`: expected a nonnegative integer, found `{}`", e.key, e.value),
    })
}

fn reals(e: &Entry) -> Result<Vec<f64>, SpecError> {
    e.value
        .split(',')
        .map(|s| {
            eval_constant(s.trim()).map_err(|msg| SpecError::Syntax {
                line: e.line,
                col: e.col,
                msg: format!("`{}`: bad entry `{}` ({msg})", e.key, s.trim()),
            })
        })
        .collect()
}

/// `T` accepts a real, `pi`, or a real multiple such as `2pi`.
fn period(e: &Entry) -> Result<f64, SpecError> {
    let v = e.value.trim();
    if let Some(mult) = v.strip_suffix("pi") {
        let mult = mult.trim().trim_end_matches('*').trim();
        let m = if mult.is_empty() {
            1.0
        } else {
            eval_constant(mult).map_err(|msg| SpecError::Syntax { line: e.line, col: e.col, msg })?
        };
        return Ok(m * PI);
    }
    real(e)
}

fn matrix_rows(sec: &Section, d: usize, what: &str) -> Result<Vec<Vec<f64>>, SpecError> {
    let rows: Vec<Vec<f64>> = sec.all("row").map(reals).collect::<Result<_, _>>()?;
    if rows.len() != d {
        return Err(SpecError::DimensionMismatch(format!("{what} has {} rows, expected {d}", rows.len())));
    }
    if let Some(r) = rows.iter().position(|r| r.len() != d) {
        return Err(SpecError::DimensionMismatch(format!(
            "{what} row {} has {} entries, expected {d}",
            r + 1,
            rows[r].len()
        )));
    }
    Ok(rows)
}

/// Parses and validates a spec file.
pub fn parse_system(text: &str) -> Result<SystemSpec, SpecError> {
    let secs = sections(text)?;
    let mut by_name: BTreeMap<&str, Vec<&Section>> = BTreeMap::new();
    for s in &secs {
        match s.name.as_str() {
            "system" | "drift" | "noise" | "feedback" | "envelope" => {}
            other => {
                return Err(SpecError::Syntax { line: s.line, col: 2, msg: format!("unknown section [{other}]") })
            }
        }
        by_name.entry(s.name.as_str()).or_default().push(s);
    }
    for name in ["system", "drift", "feedback", "envelope"] {
        if let Some(v) = by_name.get(name) {
            if v.len() > 1 {
                return Err(SpecError::Syntax { line: v[1].line, col: 2, msg: format!("duplicate section [{name}]") });
            }
        }
    }
    let missing = |name: &str| SpecError::MissingKey { line: 0, section: name.into(), key: "(section)".into() };
    let system = by_name.get("system").map(|v| v[0]).ok_or_else(|| missing("system"))?;
    system.check_keys(|k| k == "d" || k == "T")?;
    let d = int(system.require("d")?)?;
    if d == 0 {
        return Err(SpecError::DimensionMismatch("d must be at least 1".into()));
    }
    let t_entry = system.require("T")?;
    let t_period = period(t_entry)?;
    if !(t_period > 0.0) {
        return Err(SpecError::NonPositivePeriod(t_period));
    }

    let drift_sec = by_name.get("drift").map(|v| v[0]).ok_or_else(|| missing("drift"))?;
    drift_sec.check_keys(|k| k == "row")?;
    let rows = matrix_rows(drift_sec, d, "drift")?;
    let drift = DMatrix::from_fn(d, d, |i, j| rows[i][j]);

    let mut noise_map: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for sec in by_name.get("noise").cloned().unwrap_or_default() {
        sec.check_keys(|k| k == "k" || k == "diag" || k == "row")?;
        let k_entry = sec.require("k")?;
        let k = int(k_entry)?;
        if k == 0 {
            return Err(SpecError::Syntax { line: k_entry.line, col: k_entry.col, msg: "noise index starts at 1".into() });
        }
        let diag = match (sec.get("diag"), sec.get("row")) {
            (Some(_), Some(r)) => {
                return Err(SpecError::Syntax { line: r.line, col: r.col, msg: "use either diag= or row=, not both".into() })
            }
            (Some(e), None) => {
                let v = reals(e)?;
                if v.len() != d {
                    return Err(SpecError::DimensionMismatch(format!(
                        "noise {k} diag has {} entries, expected {d}",
                        v.len()
                    )));
                }
                v
            }
            (None, Some(_)) => {
                let rows = matrix_rows(sec, d, &format!("noise {k}"))?;
                for (i, row) in rows.iter().enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        if i != j && v != 0.0 {
                            return Err(SpecError::NonDiagonalNoise { k, i: i + 1, j: j + 1, value: v });
                        }
                    }
                }
                (0..d).map(|i| rows[i][i]).collect()
            }
            (None, None) => {
                return Err(SpecError::MissingKey { line: sec.line, section: "noise".into(), key: "diag".into() })
            }
        };
        if noise_map.insert(k, diag).is_some() {
            return Err(SpecError::Syntax { line: sec.line, col: 2, msg: format!("duplicate noise k={k}") });
        }
    }
    let r = noise_map.keys().last().copied().unwrap_or(0).max(d);
    let noise: Vec<Vec<f64>> = (1..=r).map(|k| noise_map.remove(&k).unwrap_or_else(|| vec![0.0; d])).collect();

    let fb = by_name.get("feedback").map(|v| v[0]).ok_or_else(|| missing("feedback"))?;
    let kind = fb.require("kind")?;
    let mode = match fb.get("lipschitz") {
        None => LipschitzMode::ClosedForm,
        Some(e) => match e.value.as_str() {
            "closed_form" => LipschitzMode::ClosedForm,
            "exact" => LipschitzMode::Exact,
            other => {
                return Err(SpecError::Syntax {
                    line: e.line,
                    col: e.col,
                    msg: format!("lipschitz must be closed_form or exact, found `{other}`"),
                })
            }
        },
    };
    let feedback = match kind.value.as_str() {
        "goodwin" => {
            fb.check_keys(|k| matches!(k, "kind" | "V" | "K" | "m" | "lipschitz"))?;
            FeedbackSpec::goodwin(d, t_period, real(fb.require("V")?)?, real(fb.require("K")?)?, real(fb.require("m")?)?, mode)?
        }
        "othmer_tyson" => {
            fb.check_keys(|k| matches!(k, "kind" | "k0" | "K" | "m" | "lipschitz"))?;
            FeedbackSpec::othmer_tyson(d, t_period, real(fb.require("k0")?)?, real(fb.require("K")?)?, real(fb.require("m")?)?, mode)?
        }
        "competitive" => {
            let is_k = |k: &str| k.strip_prefix('K').and_then(|n| n.parse::<usize>().ok()).is_some_and(|n| n >= 1 && n <= d);
            fb.check_keys(|k| matches!(k, "kind" | "m" | "lipschitz") || is_k(k))?;
            let ks = (1..=d).map(|i| real(fb.require(&format!("K{i}"))?)).collect::<Result<Vec<_>, _>>()?;
            FeedbackSpec::competitive(d, t_period, ks, real(fb.require("m")?)?, mode)?
        }
        "custom" => {
            let is_e = |k: &str| k.strip_prefix("expr").and_then(|n| n.parse::<usize>().ok()).is_some_and(|n| n >= 1 && n <= d);
            fb.check_keys(|k| k == "kind" || is_e(k))?;
            let exprs = (1..=d)
                .map(|i| {
                    let e = fb.require(&format!("expr{i}"))?;
                    parse_expr(&e.value, d).map_err(|source| SpecError::Expr { line: e.line, col: e.col, source })
                })
                .collect::<Result<Vec<_>, _>>()?;
            FeedbackSpec::custom(exprs, t_period)?
        }
        other => {
            return Err(SpecError::Syntax {
                line: kind.line,
                col: kind.col,
                msg: format!("unknown feedback kind `{other}`"),
            })
        }
    };

    let mut hints = EnvelopeHints::default();
    if let Some(env) = by_name.get("envelope").map(|v| v[0]) {
        env.check_keys(|k| matches!(k, "lambda" | "bound" | "rates" | "sup_er"))?;
        if let Some(e) = env.get("lambda") {
            hints.lambda = Some(real(e)?);
        }
        if let Some(e) = env.get("sup_er") {
            hints.sup_er = Some(real(e)?);
        }
        if let Some(e) = env.get("bound") {
            hints.bound_rule = Some(match e.value.as_str() {
                "full" => BoundRule::Full,
                "last_row" => BoundRule::LastRow,
                other => {
                    return Err(SpecError::Syntax { line: e.line, col: e.col, msg: format!("bound must be full or last_row, found `{other}`") })
                }
            });
        }
        if let Some(e) = env.get("rates") {
            hints.rate_rule = Some(match e.value.as_str() {
                "uniform" => RateRule::Uniform,
                "sharp" => RateRule::Sharp,
                other => {
                    return Err(SpecError::Syntax { line: e.line, col: e.col, msg: format!("rates must be uniform or sharp, found `{other}`") })
                }
            });
        }
    }

    let mut spec = SystemSpec::new(drift, noise, feedback, t_period)?;
    spec.envelope = hints;
    Ok(spec)
}
