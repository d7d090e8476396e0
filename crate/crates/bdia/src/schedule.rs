//! Noise schedules `(α_t, σ_t)` and the DDIM step coefficients.
//!
//! Two closed-form schedules are provided:
//!
//! * `Vp` — variance preserving, `α(t) = √(1−t)`, `σ(t) = √t` on `t ∈ [0, 1)`.
//!   Satisfies `α² + σ² = 1` exactly, so no trained β-schedule is needed.
//! * `Edm` — `α(t) = 1`, `σ(t) = t` on `t ≥ 0`, the reparameterization where
//!   the probability-flow gradient reduces to the noise prediction itself.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseSchedule {
    Vp,
    Edm,
}

impl NoiseSchedule {
    /// Dimensionless scale `α(t)`.
    pub fn alpha(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::Vp => (1.0 - t).sqrt(),
            NoiseSchedule::Edm => 1.0,
        }
    }

    /// Noise standard deviation `σ(t)`.
    pub fn sigma(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::Vp => t.sqrt(),
            NoiseSchedule::Edm => t,
        }
    }

    /// `σ̃(t) = σ(t)/α(t)`, the noise level of the rescaled process.
    pub fn sigma_tilde(&self, t: f64) -> f64 {
        self.sigma(t) / self.alpha(t)
    }

    /// Log signal-to-noise ratio `λ(t) = ln(α(t)/σ(t))`; requires `σ(t) > 0`.
    pub fn log_snr(&self, t: f64) -> Result<f64> {
        let sigma = self.sigma(t);
        if sigma <= 0.0 {
            return Err(Error::ZeroSigma(t));
        }
        Ok((self.alpha(t) / sigma).ln())
    }

    /// Drift coefficient `f(t) = d ln α/dt` of the probability-flow ODE.
    pub fn drift_coeff(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::Vp => -0.5 / (1.0 - t),
            NoiseSchedule::Edm => 0.0,
        }
    }

    /// Squared diffusion coefficient `g²(t) = dσ²/dt − 2 f(t) σ²`.
    pub fn g_squared(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::Vp => 1.0 / (1.0 - t),
            NoiseSchedule::Edm => 2.0 * t,
        }
    }

    /// Checks that `t` lies in the schedule's domain with `α(t) > 0`.
    pub fn check_time(&self, t: f64) -> Result<()> {
        let ok = match self {
            NoiseSchedule::Vp => (0.0..1.0).contains(&t),
            NoiseSchedule::Edm => t >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::OutOfDomain(t))
        }
    }

    /// Validates a grid against the schedule domain: `α > 0` and `σ ≥ 0`
    /// everywhere, `σ = 0` permitted only at the terminal grid point.
    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        for (k, &t) in grid.times_desc().iter().enumerate() {
            self.check_time(t)?;
            let terminal = k == grid.times_desc().len() - 1;
            if self.sigma(t) <= 0.0 && !terminal {
                return Err(Error::InvalidGrid(format!(
                    "sigma(t) = 0 at non-terminal grid time t = {t}"
                )));
            }
        }
        Ok(())
    }
}

/// The linear DDIM step coefficients over one time slot,
/// `z_{i-1} = a_i z_i + b_i ε̂(z_i, i)` with
/// `a_i = α_{i-1}/α_i` and `b_i = σ_{i-1} − σ_i α_{i-1}/α_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimCoeffs {
    pub a: f64,
    pub b: f64,
}

/// Coefficients for the move from `t_from` down (or up) to `t_to`.
pub fn coeffs_between(schedule: NoiseSchedule, t_from: f64, t_to: f64) -> DdimCoeffs {
    let a = schedule.alpha(t_to) / schedule.alpha(t_from);
    let b = schedule.sigma(t_to) - schedule.sigma(t_from) * a;
    DdimCoeffs { a, b }
}

/// Coefficients `(a_i, b_i)` of the sampling step from `t_i` to `t_{i-1}`.
/// Valid for `1 ≤ i ≤ N`.
pub fn ddim_coeffs(schedule: NoiseSchedule, grid: &TimeGrid, i: usize) -> Result<DdimCoeffs> {
    if i < 1 || i > grid.n() {
        return Err(Error::IndexOutOfRange {
            index: i,
            min: 1,
            max: grid.n(),
        });
    }
    Ok(coeffs_between(schedule, grid.t(i), grid.t(i - 1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_time_grid, GridKind};

    #[test]
    fn edm_schedule_is_identity_scale() {
        let s = NoiseSchedule::Edm;
        for &t in &[0.0, 0.3, 1.0, 7.5] {
            assert_eq!(s.alpha(t), 1.0);
            assert_eq!(s.sigma(t), t);
            if t > 0.0 {
                assert_eq!(s.sigma_tilde(t), t);
            }
        }
    }

    #[test]
    fn vp_preserves_variance() {
        let s = NoiseSchedule::Vp;
        for k in 0..100 {
            let t = k as f64 / 101.0;
            let (a, sg) = (s.alpha(t), s.sigma(t));
            assert!((a * a + sg * sg - 1.0).abs() <= 1e-12, "t={t}");
        }
    }

    #[test]
    fn edm_coeffs_match_hand_values() {
        // t_i = 1.0, t_{i-1} = 0.5 on the EDM schedule: a = 1, b = 0.5 - 1.0 = -0.5.
        let c = coeffs_between(NoiseSchedule::Edm, 1.0, 0.5);
        assert_eq!(c.a, 1.0);
        assert_eq!(c.b, -0.5);
    }

    #[test]
    fn zero_width_slot_is_identity() {
        for s in [NoiseSchedule::Vp, NoiseSchedule::Edm] {
            let c = coeffs_between(s, 0.4, 0.4);
            assert_eq!(c.a, 1.0);
            assert_eq!(c.b, 0.0);
        }
    }

    #[test]
    fn vp_coeffs_match_hand_values() {
        // alpha_i = 0.8, sigma_i = 0.6 <=> t_i = 0.36; alpha_{i-1} = 0.9 <=> t_{i-1} = 0.19.
        let c = coeffs_between(NoiseSchedule::Vp, 0.36, 0.19);
        assert!((c.a - 1.125).abs() <= 1e-12);
        assert!((c.b - (0.19f64.sqrt() - 0.675)).abs() <= 1e-12);
    }

    #[test]
    fn index_bounds_checked() {
        let grid = make_time_grid(GridKind::Uniform, 4, 0.25, 1.0, 1.0).unwrap();
        assert!(ddim_coeffs(NoiseSchedule::Edm, &grid, 0).is_err());
        assert!(ddim_coeffs(NoiseSchedule::Edm, &grid, 5).is_err());
        assert!(ddim_coeffs(NoiseSchedule::Edm, &grid, 4).is_ok());
    }

    #[test]
    fn two_coefficient_forms_agree() {
        // a_i z + b_i eps must reproduce alpha_{i-1} (z - sigma_i eps)/alpha_i + sigma_{i-1} eps.
        let grid = make_time_grid(GridKind::Uniform, 8, 0.05, 0.9, 1.0).unwrap();
        for s in [NoiseSchedule::Vp, NoiseSchedule::Edm] {
            for i in 1..=grid.n() {
                let c = ddim_coeffs(s, &grid, i).unwrap();
                let (ti, tp) = (grid.t(i), grid.t(i - 1));
                let (z, eps) = (0.7321, -0.4567);
                let lhs = c.a * z + c.b * eps;
                let rhs = s.alpha(tp) * (z - s.sigma(ti) * eps) / s.alpha(ti) + s.sigma(tp) * eps;
                assert!((lhs - rhs).abs() <= 1e-15, "schedule {s:?} slot {i}");
            }
        }
    }
}
