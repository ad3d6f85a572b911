//! Two-sided Brownian paths on a uniform grid.
//!
//! Each Gaussian draw is a pure function of `(seed, component, absolute cell
//! index)`, so growing the grid in either direction never changes a stored
//! increment. Increments are rounded to multiples of 2^-40; all partial sums
//! are then exact in binary64 and the cumulative values, their differences and
//! every shifted view agree to the last bit.

use std::io::{self, Read, Write};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

/// Signed grid index; time is `index * dt`.
pub type GridIndex = i64;

const QUANTUM: f64 = 1.0 / (1u64 << 40) as f64;
/// Partial sums stay exact below 2^(53-40).
const VALUE_LIMIT: f64 = 4096.0;
pub const DEFAULT_BUDGET_BYTES: usize = 1 << 31;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WienerError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid of {cells} cells x {d} components needs {bytes} bytes, over the budget of {budget}")]
    TooLarge { cells: usize, d: usize, bytes: usize, budget: usize },
    #[error("time {0} is not a multiple of dt = {1}")]
    OffGrid(f64, f64),
    #[error("interval [{a}, {b}) outside of the stored window [{lo}, {hi}]")]
    OutOfRange { a: GridIndex, b: GridIndex, lo: GridIndex, hi: GridIndex },
    #[error("empty interval [{0}, {0})")]
    Empty(GridIndex),
    #[error("path value left the exactly representable range")]
    Overflow,
    #[error("corrupt path dump: {0}")]
    Corrupt(String),
}

/// Period and step size, with the period an integer number of steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clock {
    pub period: f64,
    pub steps_per_period: i64,
    pub dt: f64,
}

impl Clock {
    pub fn new(period: f64, steps_per_period: i64) -> Result<Self, WienerError> {
        if !(period > 0.0) || steps_per_period <= 0 {
            return Err(WienerError::InvalidGrid(format!(
                "period {period} with {steps_per_period} steps"
            )));
        }
        Ok(Clock { period, steps_per_period, dt: period / steps_per_period as f64 })
    }

    /// Step count from a requested dt; T/dt must be an integer.
    pub fn from_dt(period: f64, dt: f64) -> Result<Self, WienerError> {
        if !(dt > 0.0) {
            return Err(WienerError::InvalidGrid(format!("dt = {dt}")));
        }
        let ratio = period / dt;
        let steps = ratio.round();
        if steps < 1.0 || (ratio - steps).abs() > 1e-9 * ratio {
            return Err(WienerError::InvalidGrid(format!("period {period} is not a multiple of dt = {dt}")));
        }
        Clock::new(period, steps as i64)
    }

    pub fn time(&self, i: GridIndex) -> f64 {
        i as f64 * self.dt
    }

    /// Time reduced into [0, T) on the grid, so periodic functions of time see
    /// identical arguments at `i` and `i + steps_per_period`.
    pub fn phase(&self, i: GridIndex) -> f64 {
        i.rem_euclid(self.steps_per_period) as f64 * self.dt
    }

    pub fn index_of(&self, t: f64) -> Result<GridIndex, WienerError> {
        let r = t / self.dt;
        let i = r.round();
        if (r - i).abs() > 1e-9 * r.abs().max(1.0) {
            return Err(WienerError::OffGrid(t, self.dt));
        }
        Ok(i as GridIndex)
    }
}

/// Grid geometry: cells `[i_min, i_max)` of width `dt`, `d` components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub dt: f64,
    pub i_min: GridIndex,
    pub i_max: GridIndex,
    pub d: usize,
}

impl GridSpec {
    pub fn new(dt: f64, i_min: GridIndex, i_max: GridIndex, d: usize) -> Result<Self, WienerError> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(WienerError::InvalidGrid(format!("dt = {dt}")));
        }
        if !(i_min < 0 && i_max >= 0) {
            return Err(WienerError::InvalidGrid(format!("need t_min < 0 <= t_max, got cells [{i_min}, {i_max})")));
        }
        if d == 0 {
            return Err(WienerError::InvalidGrid("zero components".into()));
        }
        Ok(GridSpec { dt, i_min, i_max, d })
    }

    /// From endpoint times, which must be multiples of `dt`.
    pub fn from_times(dt: f64, t_min: f64, t_max: f64, d: usize) -> Result<Self, WienerError> {
        let idx = |t: f64| {
            let r = t / dt;
            let i = r.round();
            if (r - i).abs() > 1e-9 * r.abs().max(1.0) {
                Err(WienerError::OffGrid(t, dt))
            } else {
                Ok(i as GridIndex)
            }
        };
        GridSpec::new(dt, idx(t_min)?, idx(t_max)?, d)
    }

    pub fn t_min(&self) -> f64 {
        self.i_min as f64 * self.dt
    }

    pub fn t_max(&self) -> f64 {
        self.i_max as f64 * self.dt
    }

    pub fn cells(&self) -> usize {
        (self.i_max - self.i_min) as usize
    }
}

#[derive(Debug)]
struct PathStore {
    spec: GridSpec,
    seed: u64,
    /// `inc[k][c]` for absolute cell `spec.i_min + c`.
    inc: Vec<Vec<f64>>,
    /// `cum[k][c]` is W at absolute index `spec.i_min + c`, c in 0..=cells.
    cum: Vec<Vec<f64>>,
}

/// A view of a stored path shifted by `offset` cells: the view's W(i) is
/// `W(i + offset) - W(offset)` of the stored path.
#[derive(Debug, Clone)]
pub struct WienerGrid {
    store: Arc<PathStore>,
    offset: GridIndex,
}

fn gaussian_pair_to_one(a: u64, b: u64) -> f64 {
    let u1 = ((a >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Standard normals for cells `[from, to)` of component `k`.
pub fn raw_normals(seed: u64, k: usize, from: GridIndex, to: GridIndex) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    let key = (from as u64) ^ (1u64 << 63);
    rng.set_word_pos(key as u128 * 4);
    (from..to)
        .map(|_| {
            let a = rng.next_u64();
            let b = rng.next_u64();
            gaussian_pair_to_one(a, b)
        })
        .collect()
}

/// Draws the path for `(spec, seed)` with the default memory budget.
pub fn sample_path(spec: GridSpec, seed: u64) -> Result<WienerGrid, WienerError> {
    sample_path_with_budget(spec, seed, DEFAULT_BUDGET_BYTES)
}

pub fn sample_path_with_budget(spec: GridSpec, seed: u64, budget: usize) -> Result<WienerGrid, WienerError> {
    let cells = spec.cells();
    let bytes = cells.saturating_add(1).saturating_mul(spec.d).saturating_mul(16);
    if bytes > budget {
        return Err(WienerError::TooLarge { cells, d: spec.d, bytes, budget });
    }
    let sq = spec.dt.sqrt();
    let mut inc = Vec::with_capacity(spec.d);
    for k in 0..spec.d {
        let g = raw_normals(seed, k, spec.i_min, spec.i_max);
        inc.push(g.into_iter().map(|z| (z * sq / QUANTUM).round() * QUANTUM).collect::<Vec<f64>>());
    }
    build(spec, seed, inc)
}

fn build(spec: GridSpec, seed: u64, inc: Vec<Vec<f64>>) -> Result<WienerGrid, WienerError> {
    let zero = (-spec.i_min) as usize;
    let mut cum = Vec::with_capacity(spec.d);
    for row in &inc {
        let mut c = vec![0.0; row.len() + 1];
        for j in zero..row.len() {
            c[j + 1] = c[j] + row[j];
        }
        for j in (0..zero).rev() {
            c[j] = c[j + 1] - row[j];
        }
        if c.iter().any(|v| !(v.abs() < VALUE_LIMIT)) {
            return Err(WienerError::Overflow);
        }
        cum.push(c);
    }
    Ok(WienerGrid { store: Arc::new(PathStore { spec, seed, inc, cum }), offset: 0 })
}

impl WienerGrid {
    pub fn seed(&self) -> u64 {
        self.store.seed
    }

    pub fn dim(&self) -> usize {
        self.store.spec.d
    }

    pub fn dt(&self) -> f64 {
        self.store.spec.dt
    }

    /// Shift applied to the underlying stored path, in cells.
    pub fn offset(&self) -> GridIndex {
        self.offset
    }

    /// Geometry of the stored path as seen from this view.
    pub fn spec(&self) -> GridSpec {
        let s = self.store.spec;
        GridSpec { i_min: s.i_min - self.offset, i_max: s.i_max - self.offset, ..s }
    }

    /// Readable grid indices `[lo, hi]` of this view.
    pub fn index_range(&self) -> (GridIndex, GridIndex) {
        let s = self.spec();
        (s.i_min, s.i_max)
    }

    pub fn covers(&self, a: GridIndex, b: GridIndex) -> bool {
        let (lo, hi) = self.index_range();
        lo <= a && a <= b && b <= hi
    }

    #[inline]
    fn slot(&self, i: GridIndex) -> usize {
        (i + self.offset - self.store.spec.i_min) as usize
    }

    /// W^k at grid index `i`.
    pub fn value(&self, k: usize, i: GridIndex) -> f64 {
        let c = &self.store.cum[k];
        c[self.slot(i)] - c[self.slot(0)]
    }

    pub fn increment(&self, k: usize, i: GridIndex) -> f64 {
        self.store.inc[k][self.slot(i)]
    }

    /// Stored increments of every component for cells `[a, b)`.
    pub fn increments_on(&self, a: GridIndex, b: GridIndex) -> Result<Vec<&[f64]>, WienerError> {
        if a >= b {
            return Err(WienerError::Empty(a));
        }
        let (lo, hi) = self.index_range();
        if a < lo || b > hi {
            return Err(WienerError::OutOfRange { a, b, lo, hi });
        }
        let (s, e) = (self.slot(a), self.slot(b));
        Ok(self.store.inc.iter().map(|row| &row[s..e]).collect())
    }

    /// theta_s in cells.
    pub fn shift(&self, s: GridIndex) -> Result<WienerGrid, WienerError> {
        let (lo, hi) = self.index_range();
        if s < lo || s > hi {
            return Err(WienerError::OutOfRange { a: s, b: s, lo, hi });
        }
        Ok(WienerGrid { store: Arc::clone(&self.store), offset: self.offset + s })
    }

    /// theta_s for a time that must be a multiple of dt.
    pub fn shift_time(&self, s: f64) -> Result<WienerGrid, WienerError> {
        let dt = self.dt();
        let r = s / dt;
        let i = r.round();
        if (r - i).abs() > 1e-9 * r.abs().max(1.0) {
            return Err(WienerError::OffGrid(s, dt));
        }
        self.shift(i as GridIndex)
    }

    /// A copy whose stored increment for cell `i` of component `k` is moved by
    /// `delta`. For experiments that need a path differing in one cell.
    pub fn perturbed(&self, k: usize, i: GridIndex, delta: f64) -> Result<WienerGrid, WienerError> {
        let mut inc = self.store.inc.clone();
        let slot = self.slot(i);
        inc[k][slot] = ((inc[k][slot] + delta) / QUANTUM).round() * QUANTUM;
        let g = build(self.store.spec, self.store.seed, inc)?;
        Ok(WienerGrid { store: g.store, offset: self.offset })
    }

    /// The same path on the grid with step `factor * dt`: each coarse
    /// increment is the exact sum of `factor` fine ones. The stored range
    /// must be divisible by `factor` on both sides of 0.
    pub fn coarsen(&self, factor: usize) -> Result<WienerGrid, WienerError> {
        let s = self.store.spec;
        let f = factor as GridIndex;
        if factor == 0 || s.i_min % f != 0 || s.i_max % f != 0 {
            return Err(WienerError::InvalidGrid(format!(
                "cannot coarsen [{}, {}] by {factor}",
                s.i_min, s.i_max
            )));
        }
        let spec = GridSpec::new(s.dt * factor as f64, s.i_min / f, s.i_max / f, s.d)?;
        let inc = self.store.inc.iter().map(|row| row.chunks(factor).map(|c| c.iter().sum()).collect()).collect();
        let g = build(spec, self.store.seed, inc)?;
        if self.offset % f != 0 {
            return Err(WienerError::InvalidGrid(format!("view offset {} is not a multiple of {factor}", self.offset)));
        }
        Ok(WienerGrid { store: g.store, offset: self.offset / f })
    }

    /// Binary dump of the stored path: dt, t_min, t_max as f64, d and seed as
    /// u64, then the increments component by component, all little endian.
    pub fn dump<W: Write>(&self, mut out: W) -> io::Result<()> {
        let s = self.store.spec;
        out.write_all(&s.dt.to_le_bytes())?;
        out.write_all(&s.t_min().to_le_bytes())?;
        out.write_all(&s.t_max().to_le_bytes())?;
        out.write_all(&(s.d as u64).to_le_bytes())?;
        out.write_all(&self.store.seed.to_le_bytes())?;
        for row in &self.store.inc {
            for v in row {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(mut input: R) -> Result<WienerGrid, WienerError> {
        let mut word = [0u8; 8];
        let mut next = |input: &mut R| -> Result<[u8; 8], WienerError> {
            input.read_exact(&mut word).map_err(|e| WienerError::Corrupt(e.to_string()))?;
            Ok(word)
        };
        let dt = f64::from_le_bytes(next(&mut input)?);
        let t_min = f64::from_le_bytes(next(&mut input)?);
        let t_max = f64::from_le_bytes(next(&mut input)?);
        let d = u64::from_le_bytes(next(&mut input)?) as usize;
        let seed = u64::from_le_bytes(next(&mut input)?);
        let spec = GridSpec::from_times(dt, t_min, t_max, d)?;
        let mut inc = vec![vec![0.0; spec.cells()]; d];
        for row in inc.iter_mut() {
            for v in row.iter_mut() {
                *v = f64::from_le_bytes(next(&mut input)?);
                if (*v / QUANTUM).fract() != 0.0 {
                    return Err(WienerError::Corrupt("increment off the quantisation lattice".into()));
                }
            }
        }
        build(spec, seed, inc)
    }
}

/// SplitMix64 finaliser, used to derive independent per-path seeds.
pub fn mix_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Paths sharing one grid, indexed by position.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub master_seed: u64,
    pub paths: Vec<WienerGrid>,
}

impl Ensemble {
    pub fn generate(spec: GridSpec, master_seed: u64, n_paths: usize) -> Result<Self, WienerError> {
        let per_path = (spec.cells() + 1) * spec.d * 16;
        let budget = DEFAULT_BUDGET_BYTES;
        if per_path.saturating_mul(n_paths) > budget {
            return Err(WienerError::TooLarge {
                cells: spec.cells() * n_paths,
                d: spec.d,
                bytes: per_path.saturating_mul(n_paths),
                budget,
            });
        }
        let paths = (0..n_paths)
            .into_par_iter()
            .map(|i| sample_path(spec, mix_seed(master_seed, i as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Ensemble { master_seed, paths })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.paths.iter().map(|p| p.seed()).collect()
    }

    pub fn dt(&self) -> f64 {
        self.paths.first().map(|p| p.dt()).unwrap_or(0.0)
    }

    pub fn index_range(&self) -> (GridIndex, GridIndex) {
        self.paths.first().map(|p| p.index_range()).unwrap_or((0, 0))
    }
}
