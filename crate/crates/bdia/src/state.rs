//! Diffusion state container and small dense-vector helpers.
//!
//! States are plain `Vec<f64>` payloads tagged with the grid index they sit
//! at. All arithmetic is 64-bit; the dimensions in play are small enough
//! that a linear-algebra crate would be overkill.

use crate::error::{Error, Result};

/// A d-dimensional diffusion state `z_i` at grid index `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub z: Vec<f64>,
    pub index: usize,
}

impl State {
    pub fn new(z: Vec<f64>, index: usize) -> Self {
        Self { z, index }
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }

    pub fn is_finite(&self) -> bool {
        self.z.iter().all(|v| v.is_finite())
    }

    /// Every solver step checks its output through this; a NaN/Inf anywhere
    /// is reported as a numeric failure rather than silently propagated.
    pub fn ensure_finite(self, context: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }
}

/// `c1*a + c2*b` elementwise.
pub(crate) fn lincomb2(c1: f64, a: &[f64], c2: f64, b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| c1 * x + c2 * y).collect()
}

pub(crate) fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub(crate) fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub(crate) fn scale(c: f64, a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| c * x).collect()
}

pub(crate) fn axpy(acc: &mut [f64], c: f64, v: &[f64]) {
    debug_assert_eq!(acc.len(), v.len());
    for (a, x) in acc.iter_mut().zip(v) {
        *a += c * x;
    }
}

/// Largest absolute entrywise difference.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub(crate) fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
