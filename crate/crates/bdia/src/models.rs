//! Analytic noise predictors backed by isotropic Gaussian mixtures.
//!
//! For mixture data the marginal of the forward process at noise level
//! `(α_t, σ_t)` stays a Gaussian mixture in closed form, so the score — and
//! with it the noise prediction `ε̂(z, t) = −σ_t ∇_z log q_t(z)` — is exact.
//! That gives every solver in this crate a ground truth to be checked
//! against, including a closed-form ODE trajectory in the single-Gaussian
//! case.
//!
//! Component responsibilities are evaluated in log space with
//! max-subtraction so the predictors stay accurate far out in the tails,
//! where inversion tests probe.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::state::{scale, State};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// One isotropic mixture component: weight, mean and scalar variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub w: f64,
    pub mu: Vec<f64>,
    pub s2: f64,
}

/// A Gaussian mixture standing in for the data distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GaussianMixture {
    components: Vec<MixtureComponent>,
}

impl GaussianMixture {
    /// Weights must sum to 1 within 1e-12, variances must be positive, and
    /// all means must share one dimension.
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidModel("mixture needs at least one component".into()));
        }
        let dim = components[0].mu.len();
        if dim == 0 {
            return Err(Error::InvalidModel("component means must be non-empty".into()));
        }
        let mut wsum = 0.0;
        for c in &components {
            if c.mu.len() != dim {
                return Err(Error::InvalidModel("component means differ in dimension".into()));
            }
            if !(c.s2 > 0.0) {
                return Err(Error::InvalidModel(format!("variance must be > 0, got {}", c.s2)));
            }
            if !(c.w >= 0.0) {
                return Err(Error::InvalidModel(format!("weight must be >= 0, got {}", c.w)));
            }
            wsum += c.w;
        }
        if (wsum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidModel(format!("weights sum to {wsum}, expected 1")));
        }
        Ok(Self { components })
    }

    pub fn single(mu: Vec<f64>, s2: f64) -> Result<Self> {
        Self::new(vec![MixtureComponent { w: 1.0, mu, s2 }])
    }

    /// The symmetric two-component benchmark mixture: weights 1/2, means
    /// `±2·e` in every coordinate, variance `s2 = 0.25`.
    pub fn symmetric_pair(dim: usize) -> Self {
        Self::new(vec![
            MixtureComponent { w: 0.5, mu: vec![2.0; dim], s2: 0.25 },
            MixtureComponent { w: 0.5, mu: vec![-2.0; dim], s2: 0.25 },
        ])
        .expect("valid by construction")
    }

    pub fn dim(&self) -> usize {
        self.components[0].mu.len()
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    /// Editing analog: the same mixture with every component mean shifted
    /// by `delta`. Swapping predictors between inversion and regeneration
    /// mimics a prompt-swap round trip.
    pub fn shifted(&self, delta: &[f64]) -> Result<Self> {
        if delta.len() != self.dim() {
            return Err(Error::DimMismatch(format!(
                "shift has dim {}, mixture has dim {}",
                delta.len(),
                self.dim()
            )));
        }
        let components = self
            .components
            .iter()
            .map(|c| MixtureComponent {
                w: c.w,
                mu: c.mu.iter().zip(delta).map(|(m, d)| m + d).collect(),
                s2: c.s2,
            })
            .collect();
        Ok(Self { components })
    }
}

/// The marginal of `z_t` under the forward process: each component mean is
/// scaled by `α_t` and each variance maps to `α_t² s² + σ_t²`.
#[derive(Debug, Clone)]
pub struct MixtureMarginal {
    /// `(weight, mean, total variance)` per component.
    components: Vec<(f64, Vec<f64>, f64)>,
}

pub fn mixture_marginal(model: &GaussianMixture, schedule: NoiseSchedule, t: f64) -> MixtureMarginal {
    let alpha = schedule.alpha(t);
    let sigma = schedule.sigma(t);
    let components = model
        .components()
        .iter()
        .map(|c| (c.w, scale(alpha, &c.mu), alpha * alpha * c.s2 + sigma * sigma))
        .collect();
    MixtureMarginal { components }
}

impl MixtureMarginal {
    pub fn components(&self) -> &[(f64, Vec<f64>, f64)] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].1.len()
    }

    /// Per-component `ln w_k + ln N(z; m_k, v_k I)`.
    fn log_terms(&self, z: &[f64]) -> Vec<f64> {
        let d = z.len() as f64;
        self.components
            .iter()
            .map(|(w, m, v)| {
                let sq: f64 = z.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                w.ln() - 0.5 * d * (TWO_PI * v).ln() - 0.5 * sq / v
            })
            .collect()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let terms = self.log_terms(z);
        log_sum_exp(&terms)
    }

    /// `∇_z log q(z)` via log-space responsibilities.
    pub fn score(&self, z: &[f64]) -> Vec<f64> {
        let terms = self.log_terms(z);
        let lse = log_sum_exp(&terms);
        let mut out = vec![0.0; z.len()];
        for ((_, m, v), lt) in self.components.iter().zip(&terms) {
            let resp = (lt - lse).exp();
            for (o, (zi, mi)) in out.iter_mut().zip(z.iter().zip(m)) {
                *o += resp * (mi - zi) / v;
            }
        }
        out
    }

    /// One draw; components picked by weight, then an isotropic Gaussian.
    fn sample_into(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, (w, _, _)) in self.components.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = k;
                break;
            }
        }
        let (_, mean, var) = &self.components[pick];
        let sd = var.sqrt();
        mean.iter().map(|m| m + sd * standard_normal(rng)).collect()
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Box-Muller standard normal; two fresh uniforms per draw keep the stream
/// independent of call history.
pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (TWO_PI * u2).cos()
}

/// Exact noise prediction `ε̂(z, t) = −σ_t ∇_z log q_t(z)` for mixture data.
/// Requires `σ(t) > 0`.
pub fn epsilon_hat_analytic(
    model: &GaussianMixture,
    schedule: NoiseSchedule,
    z: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let sigma = schedule.sigma(t);
    if sigma <= 0.0 {
        return Err(Error::ZeroSigma(t));
    }
    let marginal = mixture_marginal(model, schedule, t);
    Ok(scale(-sigma, &marginal.score(z)))
}

/// Probability-flow gradient `d(z, t)` under the EDM schedule (`α ≡ 1`,
/// `σ = t`): with `f(t) = 0` and `g²(t) = 2t` the gradient reduces to the
/// noise prediction exactly. Requires `t > 0`.
pub fn edm_gradient(model: &GaussianMixture, z: &[f64], t: f64) -> Result<Vec<f64>> {
    if t <= 0.0 {
        return Err(Error::OutOfDomain(t));
    }
    epsilon_hat_analytic(model, NoiseSchedule::Edm, z, t)
}

/// `n` i.i.d. draws from the marginal at time `t`, deterministic in `seed`.
pub fn exact_sample(
    model: &GaussianMixture,
    schedule: NoiseSchedule,
    t: f64,
    seed: u64,
    n: usize,
) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::EmptyInput("exact_sample requires n >= 1"));
    }
    schedule.check_time(t)?;
    let marginal = mixture_marginal(model, schedule, t);
    let mut rng = crate::rng::substream(seed, crate::rng::STREAM_DATA);
    Ok((0..n).map(|_| marginal.sample_into(&mut rng)).collect())
}

/// Closed-form probability-flow trajectory for a single zero-mean Gaussian
/// `N(0, s² I)` under the EDM schedule: the ODE is `dz/dt = t·z/(s² + t²)`,
/// solved exactly by `z(t_to) = z(t_from) · √((s² + t_to²)/(s² + t_from²))`.
pub fn analytic_ode_solution(s2: f64, z_from: &[f64], t_from: f64, t_to: f64) -> Vec<f64> {
    let factor = ((s2 + t_to * t_to) / (s2 + t_from * t_from)).sqrt();
    scale(factor, z_from)
}

/// Probability-flow gradient for an arbitrary schedule,
/// `d(z, t) = f(t) z − ½ g²(t) ∇_z log q_t(z)`, evaluated through the
/// analytic score so it stays finite at `σ(t) = 0`.
pub fn flow_gradient(
    model: &GaussianMixture,
    schedule: NoiseSchedule,
    z: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    schedule.check_time(t)?;
    let f = schedule.drift_coeff(t);
    let half_g2 = 0.5 * schedule.g_squared(t);
    let score = mixture_marginal(model, schedule, t).score(z);
    Ok(z.iter()
        .zip(&score)
        .map(|(zi, s)| f * zi - half_g2 * s)
        .collect())
}

/// The noise-predictor contract. `epsilon_hat` must be a pure function of
/// `(z, t)`: identical inputs give bit-identical outputs. `gradient` is the
/// probability-flow field in the EDM parameterization, where it coincides
/// with the noise prediction; predictors for other fields can override it.
pub trait NoisePredictor: Sync {
    fn dim(&self) -> usize;

    fn epsilon_hat(&self, z: &[f64], t: f64) -> Vec<f64>;

    fn gradient(&self, z: &[f64], t: f64) -> Vec<f64> {
        self.epsilon_hat(z, t)
    }
}

/// Exact mixture predictor for a fixed schedule.
#[derive(Debug, Clone)]
pub struct AnalyticPredictor {
    model: GaussianMixture,
    schedule: NoiseSchedule,
}

impl AnalyticPredictor {
    pub fn new(model: GaussianMixture, schedule: NoiseSchedule) -> Self {
        Self { model, schedule }
    }

    pub fn model(&self) -> &GaussianMixture {
        &self.model
    }

    pub fn schedule(&self) -> NoiseSchedule {
        self.schedule
    }
}

impl NoisePredictor for AnalyticPredictor {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn epsilon_hat(&self, z: &[f64], t: f64) -> Vec<f64> {
        epsilon_hat_analytic(&self.model, self.schedule, z, t)
            .expect("epsilon_hat evaluated at sigma(t) = 0")
    }
}

/// Counts predictor evaluations so traces can report NFE without trusting
/// the solver's own bookkeeping. Thread-safe; shared read-only.
pub struct CallCounter<'a> {
    inner: &'a dyn NoisePredictor,
    calls: AtomicUsize,
}

impl<'a> CallCounter<'a> {
    pub fn new(inner: &'a dyn NoisePredictor) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl NoisePredictor for CallCounter<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn epsilon_hat(&self, z: &[f64], t: f64) -> Vec<f64> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.epsilon_hat(z, t)
    }

    fn gradient(&self, z: &[f64], t: f64) -> Vec<f64> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.gradient(z, t)
    }
}

/// Simple closed-form predictors used by verifiers and tests.
pub mod synthetic {
    use super::*;

    /// `ε̂ ≡ 0`; the degenerate case where every solver reduces to a pure
    /// rescaling.
    #[derive(Debug, Clone)]
    pub struct ZeroPredictor {
        pub dim: usize,
    }

    impl NoisePredictor for ZeroPredictor {
        fn dim(&self) -> usize {
            self.dim
        }

        fn epsilon_hat(&self, z: &[f64], _t: f64) -> Vec<f64> {
            vec![0.0; z.len()]
        }
    }

    /// `ε̂(z, t) = c·z`, time-independent and linear.
    #[derive(Debug, Clone)]
    pub struct LinearPredictor {
        pub coeff: f64,
        pub dim: usize,
    }

    impl NoisePredictor for LinearPredictor {
        fn dim(&self) -> usize {
            self.dim
        }

        fn epsilon_hat(&self, z: &[f64], _t: f64) -> Vec<f64> {
            scale(self.coeff, z)
        }
    }

    /// Predictor whose implied clean-image estimate is the constant `x0`:
    /// `ε̂(z, t) = (z − α_t x0)/σ_t`.
    #[derive(Debug, Clone)]
    pub struct ConstantCleanPredictor {
        pub x0: Vec<f64>,
        pub schedule: NoiseSchedule,
    }

    impl NoisePredictor for ConstantCleanPredictor {
        fn dim(&self) -> usize {
            self.x0.len()
        }

        fn epsilon_hat(&self, z: &[f64], t: f64) -> Vec<f64> {
            let alpha = self.schedule.alpha(t);
            let sigma = self.schedule.sigma(t);
            assert!(sigma > 0.0, "epsilon_hat evaluated at sigma(t) = 0");
            z.iter()
                .zip(&self.x0)
                .map(|(zi, xi)| (zi - alpha * xi) / sigma)
                .collect()
        }
    }
}

/// Draws an initial solver state from the exact marginal at the top grid
/// time; the standard way the experiment drivers seed trajectories.
pub fn draw_initial_states(
    model: &GaussianMixture,
    schedule: NoiseSchedule,
    t_top: f64,
    top_index: usize,
    seed: u64,
    n: usize,
) -> Result<Vec<State>> {
    let draws = exact_sample(model, schedule, t_top, seed, n)?;
    Ok(draws.into_iter().map(|z| State::new(z, top_index)).collect())
}

/// Max-abs distance between two flat sample batches; helper for tests.
pub fn batch_max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| crate::state::max_abs_diff(x, y))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::max_abs_diff;

    fn two_component_1d() -> GaussianMixture {
        GaussianMixture::new(vec![
            MixtureComponent { w: 0.5, mu: vec![2.0], s2: 0.25 },
            MixtureComponent { w: 0.5, mu: vec![-2.0], s2: 0.25 },
        ])
        .unwrap()
    }

    #[test]
    fn marginal_single_component_edm() {
        let m = GaussianMixture::single(vec![0.0], 1.0).unwrap();
        let marg = mixture_marginal(&m, NoiseSchedule::Edm, 1.0);
        let (w, mean, var) = &marg.components()[0];
        assert_eq!(*w, 1.0);
        assert_eq!(mean, &vec![0.0]);
        assert!((var - 2.0).abs() <= 1e-15);
    }

    #[test]
    fn marginal_at_zero_noise_is_data() {
        // EDM at t = 0: alpha = 1, sigma = 0.
        let m = two_component_1d();
        let marg = mixture_marginal(&m, NoiseSchedule::Edm, 0.0);
        for ((w, mean, var), c) in marg.components().iter().zip(m.components()) {
            assert_eq!(*w, c.w);
            assert_eq!(mean, &c.mu);
            assert_eq!(*var, c.s2);
        }
    }

    #[test]
    fn marginal_two_component_matches_monte_carlo_forward() {
        // Oracle: simulate z = alpha x + sigma eps directly and match the
        // first two moments of the analytic marginal within 4 standard errors.
        let model = two_component_1d();
        let (schedule, t) = (NoiseSchedule::Edm, 0.5);
        let marg = mixture_marginal(&model, schedule, t);
        for (_, mean, var) in marg.components() {
            assert!((mean[0].abs() - 2.0).abs() <= 1e-15);
            assert!((var - 0.5).abs() <= 1e-15);
        }

        let n = 1_000_000usize;
        let mut rng = crate::rng::substream(42, 9);
        let (alpha, sigma) = (schedule.alpha(t), schedule.sigma(t));
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let pick: f64 = rng.gen();
            let mu = if pick < 0.5 { 2.0 } else { -2.0 };
            let x = mu + 0.5 * standard_normal(&mut rng);
            let z = alpha * x + sigma * standard_normal(&mut rng);
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let second = sumsq / n as f64;
        // Analytic: E z = 0, E z^2 = alpha^2 (4 + 0.25) + sigma^2.
        let exact_second = alpha * alpha * 4.25 + sigma * sigma;
        let se_mean = (exact_second / n as f64).sqrt();
        assert!(mean.abs() <= 4.0 * se_mean, "mean {mean} vs se {se_mean}");
        // Var of z^2 for a bimodal mixture is O(E z^4); bound it crudely.
        let se_second = (3.0 * exact_second * exact_second / n as f64).sqrt() * 2.0;
        assert!((second - exact_second).abs() <= 4.0 * se_second);
    }

    #[test]
    fn epsilon_hat_single_gaussian_closed_form() {
        // N(0, s^2), EDM: eps_hat = t z / (s^2 + t^2).
        let m = GaussianMixture::single(vec![0.0], 1.0).unwrap();
        let eps = epsilon_hat_analytic(&m, NoiseSchedule::Edm, &[2.0], 1.0).unwrap();
        assert!((eps[0] - 1.0).abs() <= 1e-14);
        let eps = epsilon_hat_analytic(&m, NoiseSchedule::Edm, &[-3.0], 0.5).unwrap();
        assert!((eps[0] - 0.5 * (-3.0) / 1.25).abs() <= 1e-14);
    }

    #[test]
    fn epsilon_hat_zero_at_symmetry_point() {
        let m = two_component_1d();
        let eps = epsilon_hat_analytic(&m, NoiseSchedule::Edm, &[0.0], 0.7).unwrap();
        assert_eq!(eps[0], 0.0);
    }

    #[test]
    fn epsilon_hat_rejects_zero_sigma() {
        let m = two_component_1d();
        assert!(matches!(
            epsilon_hat_analytic(&m, NoiseSchedule::Edm, &[0.1], 0.0),
            Err(Error::ZeroSigma(_))
        ));
    }

    #[test]
    fn single_component_degenerates_to_linear_score() {
        // Mixture of one component must equal the linear Gaussian score exactly.
        let m = GaussianMixture::single(vec![0.7, -0.3], 0.8).unwrap();
        for schedule in [NoiseSchedule::Edm, NoiseSchedule::Vp] {
            let t = 0.6;
            let (alpha, sigma) = (schedule.alpha(t), schedule.sigma(t));
            let v = alpha * alpha * 0.8 + sigma * sigma;
            let z = [1.3, -2.1];
            let eps = epsilon_hat_analytic(&m, schedule, &z, t).unwrap();
            let expected: Vec<f64> = z
                .iter()
                .zip(&[0.7, -0.3])
                .map(|(zi, mi)| sigma * (zi - alpha * mi) / v)
                .collect();
            assert!(max_abs_diff(&eps, &expected) <= 1e-14);
        }
    }

    #[test]
    fn score_matches_finite_differences() {
        // Central differences of the log-density, h = 1e-5, relative 1e-5.
        let m = two_component_1d();
        let mut rng = crate::rng::substream(7, 11);
        for schedule in [NoiseSchedule::Edm, NoiseSchedule::Vp] {
            for _ in 0..50 {
                let t = 0.05 + 0.8 * rng.gen::<f64>();
                let z = [6.0 * rng.gen::<f64>() - 3.0];
                let marg = mixture_marginal(&m, schedule, t);
                let h = 1e-5;
                let fd = (marg.log_density(&[z[0] + h]) - marg.log_density(&[z[0] - h])) / (2.0 * h);
                let eps = epsilon_hat_analytic(&m, schedule, &z, t).unwrap();
                let expected = -schedule.sigma(t) * fd;
                let scale = expected.abs().max(1e-3);
                assert!(
                    (eps[0] - expected).abs() / scale <= 1e-5,
                    "schedule {schedule:?} t {t} z {z:?}: {} vs {}",
                    eps[0],
                    expected
                );
            }
        }
    }

    #[test]
    fn edm_gradient_examples() {
        let m = GaussianMixture::single(vec![0.0], 1.0).unwrap();
        assert!((edm_gradient(&m, &[2.0], 1.0).unwrap()[0] - 1.0).abs() <= 1e-14);
        assert_eq!(edm_gradient(&m, &[0.0], 0.3).unwrap()[0], 0.0);
        assert!((edm_gradient(&m, &[1.0], 0.5).unwrap()[0] - 0.4).abs() <= 1e-14);
        assert!(edm_gradient(&m, &[1.0], 0.0).is_err());
    }

    #[test]
    fn exact_sample_is_deterministic_and_unbiased() {
        let m = GaussianMixture::single(vec![0.0], 1.0).unwrap();
        assert!(exact_sample(&m, NoiseSchedule::Edm, 1.0, 3, 0).is_err());

        let a = exact_sample(&m, NoiseSchedule::Edm, 1.0, 3, 500).unwrap();
        let b = exact_sample(&m, NoiseSchedule::Edm, 1.0, 3, 500).unwrap();
        assert_eq!(a, b);

        let n = 20_000usize;
        let draws = exact_sample(&m, NoiseSchedule::Edm, 1.0, 11, n).unwrap();
        let mean: f64 = draws.iter().map(|v| v[0]).sum::<f64>() / n as f64;
        let v = 2.0; // total variance at t = 1
        assert!(mean.abs() <= 4.0 * (v / n as f64).sqrt());
    }

    #[test]
    fn analytic_solution_identity_and_round_trip() {
        let z = vec![2.0, -1.0];
        assert_eq!(analytic_ode_solution(1.0, &z, 0.8, 0.8), z);

        let down = analytic_ode_solution(1.0, &z, 1.0, 0.5);
        let back = analytic_ode_solution(1.0, &down, 0.5, 1.0);
        assert!(max_abs_diff(&back, &z) <= 1e-12);

        let terminal = analytic_ode_solution(1.0, &[2.0], 1.0, 0.0);
        assert!((terminal[0] - 2.0f64.sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn flow_gradient_reduces_to_noise_prediction_under_edm() {
        let m = two_component_1d();
        let mut rng = crate::rng::substream(21, 13);
        for _ in 0..50 {
            let t = 0.05 + rng.gen::<f64>();
            let z = [5.0 * rng.gen::<f64>() - 2.5];
            let flow = flow_gradient(&m, NoiseSchedule::Edm, &z, t).unwrap();
            let eps = epsilon_hat_analytic(&m, NoiseSchedule::Edm, &z, t).unwrap();
            assert!(max_abs_diff(&flow, &eps) <= 1e-14);
        }
        // Finite at sigma = 0, where the noise-prediction form is not.
        assert!(flow_gradient(&m, NoiseSchedule::Edm, &[0.4], 0.0).is_ok());
        assert!(flow_gradient(&m, NoiseSchedule::Vp, &[0.4], 0.0).is_ok());
    }

    #[test]
    fn shifted_mixture_moves_means_only() {
        let m = two_component_1d();
        let s = m.shifted(&[1.0]).unwrap();
        assert_eq!(s.components()[0].mu, vec![3.0]);
        assert_eq!(s.components()[1].mu, vec![-1.0]);
        assert_eq!(s.components()[0].s2, 0.25);
        assert!(m.shifted(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn predictor_is_pure() {
        let m = two_component_1d();
        let p = AnalyticPredictor::new(m, NoiseSchedule::Edm);
        let a = p.epsilon_hat(&[0.123456], 0.4);
        let b = p.epsilon_hat(&[0.123456], 0.4);
        assert_eq!(a, b); // bit-identical
    }

    #[test]
    fn call_counter_counts_both_entry_points() {
        let m = two_component_1d();
        let p = AnalyticPredictor::new(m, NoiseSchedule::Edm);
        let c = CallCounter::new(&p);
        let _ = c.epsilon_hat(&[0.5], 0.3);
        let _ = c.gradient(&[0.5], 0.3);
        assert_eq!(c.calls(), 2);
    }

    #[test]
    fn invalid_mixtures_rejected() {
        assert!(GaussianMixture::new(vec![]).is_err());
        assert!(GaussianMixture::new(vec![MixtureComponent { w: 0.9, mu: vec![0.0], s2: 1.0 }]).is_err());
        assert!(GaussianMixture::new(vec![MixtureComponent { w: 1.0, mu: vec![0.0], s2: 0.0 }]).is_err());
        assert!(GaussianMixture::new(vec![
            MixtureComponent { w: 0.5, mu: vec![0.0], s2: 1.0 },
            MixtureComponent { w: 0.5, mu: vec![0.0, 1.0], s2: 1.0 },
        ])
        .is_err());
    }
}
