//! EDICT coupled-state sampling/inversion and the coupled BDIA family.
//!
//! EDICT carries an auxiliary state `y` alongside `z` and updates the pair
//! in an alternating fashion with a mixing weight `p`, which makes the
//! whole step algebraically invertible at the cost of two predictor calls
//! per timestep. CBDIA keeps the coupled structure but replaces the two
//! forward updates with one forward and one backward integration
//! approximation, mixed through `(γ₁, γ₂)`; the choice `(0, 1)` collapses
//! onto the single-state BDIA recursion at `γ = 1`.

use crate::ddim::{backward_delta, forward_delta, SolverTrace};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::models::{CallCounter, NoisePredictor};
use crate::schedule::{ddim_coeffs, NoiseSchedule};
use crate::state::{add, axpy, lincomb2, max_abs_diff, sub};

/// Mixing weight recommended for EDICT round trips.
pub const EDICT_RECOMMENDED_P: f64 = 0.93;

/// The coupled pair `(z_i, y_i)` at one grid index. Chains start from
/// `z_N = y_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledState {
    pub z: Vec<f64>,
    pub y: Vec<f64>,
    pub index: usize,
}

impl CoupledState {
    pub fn new(z: Vec<f64>, y: Vec<f64>, index: usize) -> Self {
        Self { z, y, index }
    }

    /// Initialization with `y = z`.
    pub fn from_single(z: Vec<f64>, index: usize) -> Self {
        let y = z.clone();
        Self { z, y, index }
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }

    pub fn is_finite(&self) -> bool {
        self.z.iter().chain(&self.y).all(|v| v.is_finite())
    }

    fn ensure_finite(self, context: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }
}

/// CBDIA mixing weights; the 2×2 unmixing is singular when they coincide.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CbdiaConfig {
    gamma1: f64,
    gamma2: f64,
}

impl CbdiaConfig {
    pub fn new(gamma1: f64, gamma2: f64) -> Result<Self> {
        for g in [gamma1, gamma2] {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::InvalidParameter(format!(
                    "cbdia weights must be in [0, 1], got {g}"
                )));
            }
        }
        if gamma1 == gamma2 {
            return Err(Error::SingularMixing(gamma1));
        }
        Ok(Self { gamma1, gamma2 })
    }

    /// `(0, 1)`: the configuration that reduces to BDIA with `γ = 1`.
    pub fn bdia_equivalent() -> Self {
        Self { gamma1: 0.0, gamma2: 1.0 }
    }

    pub fn gamma1(&self) -> f64 {
        self.gamma1
    }

    pub fn gamma2(&self) -> f64 {
        self.gamma2
    }
}

/// Internals of one coupled step, kept for oracle verification:
/// `(z_inter, y_inter)` for EDICT, `(w, v)` plus the two deltas for CBDIA.
#[derive(Debug, Clone)]
pub struct CoupledStepRecord {
    /// Slot index `i`: the step moved from `t_i` to `t_{i-1}`.
    pub slot: usize,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub delta_fwd: Option<Vec<f64>>,
    pub delta_bwd: Option<Vec<f64>>,
}

/// Trace of a coupled chain: both sub-sequences plus per-step internals.
#[derive(Debug, Clone)]
pub struct CoupledTrace {
    states: Vec<CoupledState>,
    records: Vec<CoupledStepRecord>,
    epsilon_calls: usize,
}

impl CoupledTrace {
    pub fn states(&self) -> &[CoupledState] {
        &self.states
    }

    pub fn initial(&self) -> &CoupledState {
        &self.states[0]
    }

    pub fn terminal(&self) -> &CoupledState {
        &self.states[self.states.len() - 1]
    }

    pub fn top_index(&self) -> usize {
        self.states[0].index
    }

    pub fn state(&self, i: usize) -> Option<&CoupledState> {
        let top = self.top_index();
        if i > top {
            return None;
        }
        self.states.get(top - i)
    }

    /// Record of the step over slot `j` (from `t_j` to `t_{j-1}`).
    pub fn record(&self, j: usize) -> Option<&CoupledStepRecord> {
        self.records.iter().find(|r| r.slot == j)
    }

    pub fn records(&self) -> &[CoupledStepRecord] {
        &self.records
    }

    pub fn epsilon_calls(&self) -> usize {
        self.epsilon_calls
    }

    /// Trace dump with both sub-sequences.
    pub fn write_csv<W: std::io::Write>(&self, grid: &TimeGrid, mut w: W) -> std::io::Result<()> {
        let d = self.states[0].dim();
        let cols = |prefix: &str| -> String {
            (0..d).map(|k| format!(",{prefix}{k}")).collect::<String>()
        };
        writeln!(w, "index,time{}{}", cols("z"), cols("y"))?;
        for s in &self.states {
            let mut row = format!("{},{}", s.index, grid.t(s.index));
            for v in s.z.iter().chain(&s.y) {
                row.push_str(&format!(",{v}"));
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }
}

fn check_slot(grid: &TimeGrid, i: usize) -> Result<()> {
    if i < 1 || i > grid.n() {
        return Err(Error::IndexOutOfRange { index: i, min: 1, max: grid.n() });
    }
    Ok(())
}

fn check_p(p: f64) -> Result<()> {
    if p == 0.0 {
        return Err(Error::ZeroMixWeight);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("p must be in (0, 1], got {p}")));
    }
    Ok(())
}

/// One EDICT sampling step over slot `i = s.index`:
///
/// ```text
/// z⁺ = a_i z + b_i ε̂(y, i)        y⁺ = a_i y + b_i ε̂(z⁺, i)
/// z' = p z⁺ + (1−p) y⁺            y' = p y⁺ + (1−p) z'
/// ```
///
/// Two predictor calls, both at `t_i`.
pub fn edict_step(
    s: &CoupledState,
    predictor: &dyn NoisePredictor,
    p: f64,
    schedule: NoiseSchedule,
    grid: &TimeGrid,
) -> Result<(CoupledState, CoupledStepRecord)> {
    check_p(p)?;
    let i = s.index;
    check_slot(grid, i)?;
    let c = ddim_coeffs(schedule, grid, i)?;
    let t_i = grid.t(i);

    let eps_y = predictor.epsilon_hat(&s.y, t_i);
    let z_inter = lincomb2(c.a, &s.z, c.b, &eps_y);
    let eps_zi = predictor.epsilon_hat(&z_inter, t_i);
    let y_inter = lincomb2(c.a, &s.y, c.b, &eps_zi);
    let z_next = lincomb2(p, &z_inter, 1.0 - p, &y_inter);
    let y_next = lincomb2(p, &y_inter, 1.0 - p, &z_next);

    let record = CoupledStepRecord {
        slot: i,
        first: z_inter,
        second: y_inter,
        delta_fwd: None,
        delta_bwd: None,
    };
    let out = CoupledState::new(z_next, y_next, i - 1).ensure_finite("edict_step")?;
    Ok((out, record))
}

/// Exact algebraic inverse of [`edict_step`]: unmix `(y⁺, z⁺)`, then undo
/// the two alternating updates. Input sits at index `i−1`, output at `i`.
pub fn edict_invert_step(
    s: &CoupledState,
    predictor: &dyn NoisePredictor,
    p: f64,
    schedule: NoiseSchedule,
    grid: &TimeGrid,
) -> Result<CoupledState> {
    check_p(p)?;
    let i = s.index + 1;
    check_slot(grid, i)?;
    let c = ddim_coeffs(schedule, grid, i)?;
    let t_i = grid.t(i);

    let y_inter: Vec<f64> = s.y.iter().zip(&s.z).map(|(y, z)| (y - (1.0 - p) * z) / p).collect();
    let z_inter: Vec<f64> = s
        .z
        .iter()
        .zip(&y_inter)
        .map(|(z, yi)| (z - (1.0 - p) * yi) / p)
        .collect();
    let eps_zi = predictor.epsilon_hat(&z_inter, t_i);
    let y: Vec<f64> = y_inter
        .iter()
        .zip(&eps_zi)
        .map(|(yi, e)| (yi - c.b * e) / c.a)
        .collect();
    let eps_y = predictor.epsilon_hat(&y, t_i);
    let z: Vec<f64> = z_inter
        .iter()
        .zip(&eps_y)
        .map(|(zi, e)| (zi - c.b * e) / c.a)
        .collect();

    CoupledState::new(z, y, i).ensure_finite("edict_invert_step")
}

/// One CBDIA step over slot `i = s.index`:
///
/// ```text
/// w = z + Δ(t_i → t_{i-1} | y)      v = y − Δ(t_{i-1} → t_i | w)
/// z' = γ₁ w + (1−γ₁) v              y' = γ₂ w + (1−γ₂) v
/// ```
///
/// Two predictor calls: at `(y, t_i)` and at `(w, t_{i-1})`; the latter
/// needs `σ(t_{i-1}) > 0`.
pub fn cbdia_step(
    s: &CoupledState,
    predictor: &dyn NoisePredictor,
    cfg: CbdiaConfig,
    schedule: NoiseSchedule,
    grid: &TimeGrid,
) -> Result<(CoupledState, CoupledStepRecord)> {
    let i = s.index;
    check_slot(grid, i)?;
    let (t_i, t_prev) = (grid.t(i), grid.t(i - 1));
    if schedule.sigma(t_prev) <= 0.0 {
        return Err(Error::ZeroSigma(t_prev));
    }

    let eps_y = predictor.epsilon_hat(&s.y, t_i);
    let d_fwd = forward_delta(schedule, t_i, t_prev, &s.y, &eps_y);
    let w = add(&s.z, &d_fwd);
    let eps_w = predictor.epsilon_hat(&w, t_prev);
    let d_bwd = backward_delta(schedule, t_i, t_prev, &w, &eps_w);
    let v = sub(&s.y, &d_bwd);
    let z_next = lincomb2(cfg.gamma1, &w, 1.0 - cfg.gamma1, &v);
    let y_next = lincomb2(cfg.gamma2, &w, 1.0 - cfg.gamma2, &v);

    let record = CoupledStepRecord {
        slot: i,
        first: w,
        second: v,
        delta_fwd: Some(d_fwd),
        delta_bwd: Some(d_bwd),
    };
    let out = CoupledState::new(z_next, y_next, i - 1).ensure_finite("cbdia_step")?;
    Ok((out, record))
}

/// Exact inverse of [`cbdia_step`]: recover `(w, v)` by the 2×2 unmixing
///
/// ```text
/// v = (γ₁ y' − γ₂ z')/(γ₁ − γ₂)    w = ((1−γ₁) y' − (1−γ₂) z')/(γ₂ − γ₁)
/// ```
///
/// then `y = v + Δ(t_{i-1} → t_i | w)` and `z = w − Δ(t_i → t_{i-1} | y)`.
pub fn cbdia_invert_step(
    s: &CoupledState,
    predictor: &dyn NoisePredictor,
    cfg: CbdiaConfig,
    schedule: NoiseSchedule,
    grid: &TimeGrid,
) -> Result<CoupledState> {
    let i = s.index + 1;
    check_slot(grid, i)?;
    let (t_i, t_prev) = (grid.t(i), grid.t(i - 1));
    if schedule.sigma(t_prev) <= 0.0 {
        return Err(Error::ZeroSigma(t_prev));
    }
    let (g1, g2) = (cfg.gamma1, cfg.gamma2);

    let v = lincomb2(g1 / (g1 - g2), &s.y, -g2 / (g1 - g2), &s.z);
    let w = lincomb2((1.0 - g1) / (g2 - g1), &s.y, -(1.0 - g2) / (g2 - g1), &s.z);
    let eps_w = predictor.epsilon_hat(&w, t_prev);
    let d_bwd = backward_delta(schedule, t_i, t_prev, &w, &eps_w);
    let y = add(&v, &d_bwd);
    let eps_y = predictor.epsilon_hat(&y, t_i);
    let d_fwd = forward_delta(schedule, t_i, t_prev, &y, &eps_y);
    let z = sub(&w, &d_fwd);

    CoupledState::new(z, y, i).ensure_finite("cbdia_invert_step")
}

// Chains thread a CallCounter through every step so the recorded NFE is
// what actually happened, not what the driver assumed.

fn run_chain<F>(s_n: CoupledState, grid: &TimeGrid, calls: &CallCounter, mut step: F) -> Result<CoupledTrace>
where
    F: FnMut(&CoupledState) -> Result<(CoupledState, CoupledStepRecord)>,
{
    let n = grid.n();
    if s_n.index != n {
        return Err(Error::InvalidParameter(format!(
            "chain must start at index {n}, got {}",
            s_n.index
        )));
    }
    let mut states = vec![s_n];
    let mut records = Vec::with_capacity(n);
    for k in 0..n {
        let (next, record) = step(&states[k])?;
        states.push(next);
        records.push(record);
    }
    Ok(CoupledTrace { states, records, epsilon_calls: calls.calls() })
}

fn run_invert_chain<F>(
    s_0: CoupledState,
    grid: &TimeGrid,
    calls: &CallCounter,
    mut step: F,
) -> Result<CoupledTrace>
where
    F: FnMut(&CoupledState) -> Result<CoupledState>,
{
    let n = grid.n();
    if s_0.index != 0 {
        return Err(Error::InvalidParameter(format!(
            "inversion must start at index 0, got {}",
            s_0.index
        )));
    }
    let mut ascending = vec![s_0];
    for k in 0..n {
        let next = step(&ascending[k])?;
        ascending.push(next);
    }
    ascending.reverse();
    Ok(CoupledTrace { states: ascending, records: Vec::new(), epsilon_calls: calls.calls() })
}

/// Full descending EDICT chain; `2N` predictor calls.
pub fn edict_sample(
    s_n: CoupledState,
    predictor: &dyn NoisePredictor,
    p: f64,
    schedule: NoiseSchedule,
    grid: &TimeGrid,
) -> Result<CoupledTrace> {
    let counter = CallCounter::new(predictor);
    run_chain(s_n, grid, &counter, |s| edict_step(s, &counter, p, schedule, grid))
}

/// Full ascending EDICT chain from data space; `2N` predictor calls.
pub fn edict_invert_chain(
    s_0: CoupledState,
    predictor: &dyn NoisePredictor,
    p: f64,
    schedule: NoiseSchedule,
    grid: &TimeGrid,
) -> Result<CoupledTrace> {
    let counter = CallCounter::new(predictor);
    run_invert_chain(s_0, grid, &counter, |s| edict_invert_step(s, &counter, p, schedule, grid))
}

/// Full descending CBDIA chain; `2N` predictor calls.
pub fn cbdia_sample(
    s_n: CoupledState,
    predictor: &dyn NoisePredictor,
    cfg: CbdiaConfig,
    schedule: NoiseSchedule,
    grid: &TimeGrid,
) -> Result<CoupledTrace> {
    let counter = CallCounter::new(predictor);
    run_chain(s_n, grid, &counter, |s| cbdia_step(s, &counter, cfg, schedule, grid))
}

/// Full ascending CBDIA chain; `2N` predictor calls.
pub fn cbdia_invert_chain(
    s_0: CoupledState,
    predictor: &dyn NoisePredictor,
    cfg: CbdiaConfig,
    schedule: NoiseSchedule,
    grid: &TimeGrid,
) -> Result<CoupledTrace> {
    let counter = CallCounter::new(predictor);
    run_invert_chain(s_0, grid, &counter, |s| cbdia_invert_step(s, &counter, cfg, schedule, grid))
}

/// Maximum discrepancy between the CBDIA `y`-sequence run at `(γ₁, γ₂) =
/// (0, 1)` and a BDIA trace run at `γ = 1` from the same start; the two
/// recursions coincide.
pub fn cbdia_bdia_equivalence(cbdia: &CoupledTrace, bdia: &SolverTrace) -> Result<f64> {
    if cbdia.top_index() != bdia.top_index() || cbdia.states().len() != bdia.states().len() {
        return Err(Error::TraceMismatch(format!(
            "cbdia covers {}..{}, bdia covers {}..{}",
            cbdia.terminal().index,
            cbdia.top_index(),
            bdia.final_index(),
            bdia.top_index()
        )));
    }
    let mut worst = 0.0f64;
    for (c, b) in cbdia.states().iter().zip(bdia.states()) {
        worst = worst.max(max_abs_diff(&c.y, &b.z));
    }
    Ok(worst)
}

/// Residuals of the interlaced closed forms for a `(0, 1)` CBDIA trace:
/// both sub-sequences reconstructed from `y_N` and the recorded deltas
/// alone, compared against the iterated states. Returns `(max |y residual|,
/// max |z residual|)`.
pub fn lemma1_residuals(trace: &CoupledTrace) -> Result<(f64, f64)> {
    let n = trace.top_index();
    let need = |j: usize| trace.record(j).ok_or(Error::MissingDelta(j));
    let mut worst_y = 0.0f64;
    let mut worst_z = 0.0f64;

    for i in 0..n {
        // y_i = y_N + Δ(t_N→t_{N-1}|y_N)·mod(N−i, 2)
        //       + Σ_{j=i+1}^{N-1} (−Δ(t_j→t_{j+1}|y_j) + Δ(t_j→t_{j-1}|y_j))·mod(j−i, 2)
        let mut y = trace.initial().y.clone();
        if (n - i) % 2 == 1 {
            axpy(&mut y, 1.0, need(n)?.delta_fwd.as_ref().ok_or(Error::MissingDelta(n))?);
        }
        for j in i + 1..=n - 1 {
            if (j - i) % 2 == 1 {
                let bwd = need(j + 1)?.delta_bwd.as_ref().ok_or(Error::MissingDelta(j + 1))?;
                let fwd = need(j)?.delta_fwd.as_ref().ok_or(Error::MissingDelta(j))?;
                axpy(&mut y, -1.0, bwd);
                axpy(&mut y, 1.0, fwd);
            }
        }
        let it = trace.state(i).ok_or(Error::TraceMismatch(format!("missing state {i}")))?;
        worst_y = worst_y.max(max_abs_diff(&y, &it.y));

        // z_i mirrors the pattern shifted by one slot, closed by the
        // backward delta over the slot just above i — the directions are
        // opposite those entering y_i.
        let mut z = trace.initial().y.clone();
        if (n - i - 1) % 2 == 1 {
            axpy(&mut z, 1.0, need(n)?.delta_fwd.as_ref().ok_or(Error::MissingDelta(n))?);
        }
        for j in i + 2..=n.saturating_sub(1) {
            if (j - i - 1) % 2 == 1 {
                let bwd = need(j + 1)?.delta_bwd.as_ref().ok_or(Error::MissingDelta(j + 1))?;
                let fwd = need(j)?.delta_fwd.as_ref().ok_or(Error::MissingDelta(j))?;
                axpy(&mut z, -1.0, bwd);
                axpy(&mut z, 1.0, fwd);
            }
        }
        axpy(&mut z, -1.0, need(i + 1)?.delta_bwd.as_ref().ok_or(Error::MissingDelta(i + 1))?);
        worst_z = worst_z.max(max_abs_diff(&z, &it.z));
    }
    Ok((worst_y, worst_z))
}

/// Residuals of the one-directional closed forms for a `(1, 0)` CBDIA
/// trace: `y_i = y_N − Σ_{j=i}^{N-1} Δ(t_j→t_{j+1}|z_j)` and
/// `z_i = z_N + Σ_{j=i+1}^{N} Δ(t_j→t_{j-1}|y_j)`.
pub fn lemma2_residuals(trace: &CoupledTrace) -> Result<(f64, f64)> {
    let n = trace.top_index();
    let need = |j: usize| trace.record(j).ok_or(Error::MissingDelta(j));
    let mut worst_y = 0.0f64;
    let mut worst_z = 0.0f64;
    for i in 0..n {
        let mut y = trace.initial().y.clone();
        for j in i..=n - 1 {
            axpy(&mut y, -1.0, need(j + 1)?.delta_bwd.as_ref().ok_or(Error::MissingDelta(j + 1))?);
        }
        let mut z = trace.initial().z.clone();
        for j in i + 1..=n {
            axpy(&mut z, 1.0, need(j)?.delta_fwd.as_ref().ok_or(Error::MissingDelta(j))?);
        }
        let it = trace.state(i).ok_or(Error::TraceMismatch(format!("missing state {i}")))?;
        worst_y = worst_y.max(max_abs_diff(&y, &it.y));
        worst_z = worst_z.max(max_abs_diff(&z, &it.z));
    }
    Ok((worst_y, worst_z))
}
