//! Sampling time grids.
//!
//! A grid stores `N+1` strictly decreasing times `t_N > … > t_0 ≥ 0` and is
//! addressed by grid index: index `i` maps to time `t_i`, with sampling
//! running from `N` down to `0`. Grids are never re-sorted downstream.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Uniform,
    PowerLaw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    /// Times in descending order: `times[0] = t_N`, `times[N] = t_0`.
    times: Vec<f64>,
}

impl TimeGrid {
    /// Builds a grid from descending times. Requires at least two entries,
    /// strict monotonicity, and `t_0 ≥ 0`.
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 times, got {}",
                times.len()
            )));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidGrid("non-finite time".into()));
        }
        if !times.windows(2).all(|w| w[0] > w[1]) {
            return Err(Error::InvalidGrid("times must be strictly decreasing".into()));
        }
        if *times.last().unwrap() < 0.0 {
            return Err(Error::InvalidGrid("t_0 must be >= 0".into()));
        }
        Ok(Self { times })
    }

    /// Number of steps `N` (one less than the number of grid times).
    pub fn n(&self) -> usize {
        self.times.len() - 1
    }

    /// Time at grid index `i` (`0 ≤ i ≤ N`). Panics out of range.
    pub fn t(&self, i: usize) -> f64 {
        self.times[self.n() - i]
    }

    /// All times in descending order, `t_N` first.
    pub fn times_desc(&self) -> &[f64] {
        &self.times
    }
}

/// Constructs a grid of `n` steps on `[t_min, t_max]`.
///
/// * `Uniform` — equally spaced times.
/// * `PowerLaw` — `t_j = (t_max^{1/ρ} + (1 − j/N)(t_min^{1/ρ} − t_max^{1/ρ}))^ρ`,
///   which concentrates points near `t_min` for `ρ > 1`. `ρ = 1` recovers the
///   uniform grid.
///
/// Endpoints are assigned exactly; `rho` is ignored for uniform grids.
pub fn make_time_grid(
    kind: GridKind,
    n: usize,
    t_min: f64,
    t_max: f64,
    rho: f64,
) -> Result<TimeGrid> {
    if n < 2 {
        return Err(Error::InvalidGrid(format!("n must be >= 2, got {n}")));
    }
    if !(t_min.is_finite() && t_max.is_finite()) || t_min < 0.0 || t_max <= t_min {
        return Err(Error::InvalidGrid(format!(
            "need t_max > t_min >= 0, got t_min = {t_min}, t_max = {t_max}"
        )));
    }
    if kind == GridKind::PowerLaw && !(rho.is_finite() && rho > 0.0) {
        return Err(Error::InvalidGrid(format!("rho must be > 0, got {rho}")));
    }

    let nf = n as f64;
    let mut times = Vec::with_capacity(n + 1);
    for j in (0..=n).rev() {
        let t = match kind {
            _ if j == n => t_max,
            _ if j == 0 => t_min,
            GridKind::Uniform => t_min + (j as f64 / nf) * (t_max - t_min),
            GridKind::PowerLaw => {
                let hi = t_max.powf(1.0 / rho);
                let lo = t_min.powf(1.0 / rho);
                (hi + (1.0 - j as f64 / nf) * (lo - hi)).powf(rho)
            }
        };
        times.push(t);
    }
    TimeGrid::from_times(times)
}
