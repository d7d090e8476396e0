//! DDIM sampling, naive DDIM inversion, and the bi-directional integration
//! approximation (BDIA) solver with its exact inverse.
//!
//! A DDIM step approximates the probability-flow integral over one time
//! slot with a forward update conditioned on the slot's upper state. BDIA
//! additionally refines the *previous* slot with a backward update from the
//! same predictor call, which makes each output a linear combination of
//! `(z_{i+1}, z_i, ε̂(z_i, i))` — and therefore exactly invertible, at one
//! predictor evaluation per step.
//!
//! Conventions: grids are descending, sampling runs `N → 0`, and
//! `Δ(t_a → t_b | z)` denotes the DDIM-realized move of `z` from `t_a` to
//! `t_b`, expressed as a delta.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::models::{CallCounter, NoisePredictor};
use crate::schedule::{coeffs_between, ddim_coeffs, DdimCoeffs, NoiseSchedule};
use crate::state::{add, axpy, lincomb2, sub, State};

/// BDIA blend weight `γ ∈ [0, 1]` between the earlier forward approximation
/// of the previous slot and its backward refinement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BdiaConfig {
    gamma: f64,
}

impl BdiaConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidParameter(format!(
                "gamma must be in [0, 1], got {gamma}"
            )));
        }
        Ok(Self { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// Forward DDIM delta over the slot `[t_hi, t_lo]`:
/// `Δ(t_hi → t_lo | z) = a z + b ε − z` with `(a, b)` the slot coefficients.
pub fn forward_delta(
    schedule: NoiseSchedule,
    t_hi: f64,
    t_lo: f64,
    z: &[f64],
    eps: &[f64],
) -> Vec<f64> {
    let DdimCoeffs { a, b } = coeffs_between(schedule, t_hi, t_lo);
    z.iter()
        .zip(eps)
        .map(|(zi, ei)| a * zi + b * ei - zi)
        .collect()
}

/// Backward DDIM delta over the same slot, conditioned on the lower state:
/// `Δ(t_lo → t_hi | z) = z/a − (b/a) ε − z`.
pub fn backward_delta(
    schedule: NoiseSchedule,
    t_hi: f64,
    t_lo: f64,
    z: &[f64],
    eps: &[f64],
) -> Vec<f64> {
    let DdimCoeffs { a, b } = coeffs_between(schedule, t_hi, t_lo);
    z.iter()
        .zip(eps)
        .map(|(zi, ei)| zi / a - (b / a) * ei - zi)
        .collect()
}

/// One DDIM sampling step `z_{i-1} = a_i z_i + b_i ε̂`.
pub fn ddim_step(z_i: &State, eps: &[f64], coeffs: DdimCoeffs) -> State {
    let z = lincomb2(coeffs.a, &z_i.z, coeffs.b, eps);
    State::new(z, z_i.index - 1)
}

/// Naive DDIM inversion of one slot: the unknown `z_i` in the exact
/// relation is replaced by the known `z_{i-1}`, so the predictor is
/// evaluated at `(z_{i-1}, t_{i-1})`. This is the approximation that makes
/// plain DDIM round trips inconsistent. Requires `σ(t_{i-1}) > 0`.
pub fn ddim_invert_step_naive(
    z_prev: &State,
    predictor: &dyn NoisePredictor,
    schedule: NoiseSchedule,
    grid: &TimeGrid,
    i: usize,
) -> Result<State> {
    check_slot(grid, i)?;
    check_index(z_prev, i - 1)?;
    let (t_i, t_prev) = (grid.t(i), grid.t(i - 1));
    if schedule.sigma(t_prev) <= 0.0 {
        return Err(Error::ZeroSigma(t_prev));
    }
    let eps = predictor.epsilon_hat(&z_prev.z, t_prev);
    let (a_i, a_prev) = (schedule.alpha(t_i), schedule.alpha(t_prev));
    let (s_i, s_prev) = (schedule.sigma(t_i), schedule.sigma(t_prev));
    let z = z_prev
        .z
        .iter()
        .zip(&eps)
        .map(|(zp, e)| a_i * (zp - s_prev * e) / a_prev + s_i * e)
        .collect();
    State::new(z, i).ensure_finite("ddim_invert_step_naive")
}

/// Boundary step of a BDIA chain: plain forward DDIM at index `N`.
pub fn bdia_init_step(
    z_n: &State,
    predictor: &dyn NoisePredictor,
    schedule: NoiseSchedule,
    grid: &TimeGrid,
) -> Result<State> {
    let n = grid.n();
    check_index(z_n, n)?;
    let eps = predictor.epsilon_hat(&z_n.z, grid.t(n));
    Ok(ddim_step(z_n, &eps, ddim_coeffs(schedule, grid, n)?))
}

/// BDIA update on an explicit time triple `(t_up, t_i, t_dn)`:
///
/// `out = anchor − (1−γ)(anchor − z_i) − γ Δ(t_i → t_up | z_i) + Δ(t_i → t_dn | z_i)`.
///
/// The grid-indexed step uses `(t_{i+1}, t_i, t_{i-1})` with the state at
/// `i+1` as anchor. Swapping `t_up` and `t_dn` at `γ = 1` yields the inverse
/// update — the solver's time symmetry.
pub fn bdia_step_at_times(
    anchor: &[f64],
    z_i: &[f64],
    eps_i: &[f64],
    gamma: f64,
    t_up: f64,
    t_i: f64,
    t_dn: f64,
    schedule: NoiseSchedule,
) -> Vec<f64> {
    let bwd = backward_delta(schedule, t_up, t_i, z_i, eps_i);
    let fwd = forward_delta(schedule, t_i, t_dn, z_i, eps_i);
    let mut out = anchor.to_vec();
    axpy(&mut out, -(1.0 - gamma), &sub(anchor, z_i));
    axpy(&mut out, -gamma, &bwd);
    axpy(&mut out, 1.0, &fwd);
    out
}

fn bdia_invert_at_times(
    z_dn: &[f64],
    z_i: &[f64],
    eps_i: &[f64],
    gamma: f64,
    t_up: f64,
    t_i: f64,
    t_dn: f64,
    schedule: NoiseSchedule,
) -> Result<Vec<f64>> {
    if gamma == 0.0 {
        return Err(Error::NonInvertible);
    }
    let dn = coeffs_between(schedule, t_i, t_dn);
    let up = coeffs_between(schedule, t_up, t_i);
    let out = z_dn
        .iter()
        .zip(z_i)
        .zip(eps_i)
        .map(|((zd, zi), e)| {
            zd / gamma - (dn.a * zi + dn.b * e) / gamma + (zi / up.a - (up.b / up.a) * e)
        })
        .collect();
    Ok(out)
}

/// BDIA sampling step: `z_{i-1}` from `(z_{i+1}, z_i, ε̂(z_i, t_i))`,
/// valid for `1 ≤ i ≤ N−1`. At `γ = 0` the update collapses to the forward
/// DDIM step and is computed in that form.
pub fn bdia_step(
    z_ip1: &State,
    z_i: &State,
    eps_i: &[f64],
    cfg: BdiaConfig,
    schedule: NoiseSchedule,
    grid: &TimeGrid,
) -> Result<State> {
    let i = z_i.index;
    check_slot(grid, i)?;
    check_index(z_ip1, i + 1)?;
    if i + 1 > grid.n() {
        return Err(Error::IndexOutOfRange { index: i, min: 1, max: grid.n() - 1 });
    }
    if cfg.gamma() == 0.0 {
        return Ok(ddim_step(z_i, eps_i, ddim_coeffs(schedule, grid, i)?));
    }
    let z = bdia_step_at_times(
        &z_ip1.z,
        &z_i.z,
        eps_i,
        cfg.gamma(),
        grid.t(i + 1),
        grid.t(i),
        grid.t(i - 1),
        schedule,
    );
    State::new(z, i - 1).ensure_finite("bdia_step")
}

/// Exact algebraic inverse of `bdia_step`:
///
/// `z_{i+1} = z_{i-1}/γ − (a_i z_i + b_i ε̂)/γ + (z_i/a_{i+1} − (b_{i+1}/a_{i+1}) ε̂)`.
///
/// Rejects `γ = 0`, which is plain DDIM with no exact inverse. Note the
/// `1/γ` factor: ascending chains amplify pre-existing error by `1/γ` per
/// step, so long inversions want `γ` near 1.
pub fn bdia_invert_step(
    z_im1: &State,
    z_i: &State,
    eps_i: &[f64],
    cfg: BdiaConfig,
    schedule: NoiseSchedule,
    grid: &TimeGrid,
) -> Result<State> {
    let i = z_i.index;
    check_slot(grid, i)?;
    check_index(z_im1, i - 1)?;
    if i + 1 > grid.n() {
        return Err(Error::IndexOutOfRange { index: i, min: 1, max: grid.n() - 1 });
    }
    let z = bdia_invert_at_times(
        &z_im1.z,
        &z_i.z,
        eps_i,
        cfg.gamma(),
        grid.t(i + 1),
        grid.t(i),
        grid.t(i - 1),
        schedule,
    )?;
    State::new(z, i + 1).ensure_finite("bdia_invert_step")
}

/// Ordered record of one solver run: all states plus the per-slot forward
/// and backward deltas, for verifiers and metrics.
#[derive(Debug, Clone)]
pub struct SolverTrace {
    top: usize,
    /// States by descending index, `z_N` first.
    states: Vec<State>,
    /// `deltas_fwd[k]` is `Δ(t_j → t_{j-1} | z_j)` for slot `j = N − k`.
    deltas_fwd: Vec<Option<Vec<f64>>>,
    /// `deltas_bwd[k]` is `Δ(t_{j-1} → t_j | z_{j-1})` for slot `j = N − k`.
    deltas_bwd: Vec<Option<Vec<f64>>>,
    epsilon_calls: usize,
}

impl SolverTrace {
    pub(crate) fn new(top_index: usize) -> Self {
        Self {
            top: top_index,
            states: Vec::with_capacity(top_index + 1),
            deltas_fwd: vec![None; top_index],
            deltas_bwd: vec![None; top_index],
            epsilon_calls: 0,
        }
    }

    pub(crate) fn push_state(&mut self, s: State) {
        self.states.push(s);
    }

    pub(crate) fn set_epsilon_calls(&mut self, calls: usize) {
        self.epsilon_calls = calls;
    }

    /// Index of the first (noisiest) recorded state.
    pub fn top_index(&self) -> usize {
        self.top
    }

    /// Index of the last recorded state.
    pub fn final_index(&self) -> usize {
        self.states[self.states.len() - 1].index
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn initial(&self) -> &State {
        &self.states[0]
    }

    pub fn terminal(&self) -> &State {
        &self.states[self.states.len() - 1]
    }

    /// State at grid index `i`, if recorded.
    pub fn state(&self, i: usize) -> Option<&State> {
        let top = self.top_index();
        if i > top || i < self.final_index() {
            return None;
        }
        self.states.get(top - i)
    }

    fn slot_pos(&self, j: usize) -> Option<usize> {
        let top = self.top_index();
        if j >= 1 && j <= top {
            Some(top - j)
        } else {
            None
        }
    }

    /// `Δ(t_j → t_{j-1} | z_j)`, if recorded.
    pub fn delta_fwd(&self, j: usize) -> Option<&[f64]> {
        self.deltas_fwd[self.slot_pos(j)?].as_deref()
    }

    /// `Δ(t_{j-1} → t_j | z_{j-1})`, if recorded.
    pub fn delta_bwd(&self, j: usize) -> Option<&[f64]> {
        self.deltas_bwd[self.slot_pos(j)?].as_deref()
    }

    pub fn epsilon_calls(&self) -> usize {
        self.epsilon_calls
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn record_fwd(&mut self, j: usize, d: Vec<f64>) {
        let pos = self.slot_pos(j).expect("slot in range");
        self.deltas_fwd[pos] = Some(d);
    }

    fn record_bwd(&mut self, j: usize, d: Vec<f64>) {
        let pos = self.slot_pos(j).expect("slot in range");
        self.deltas_bwd[pos] = Some(d);
    }

    /// Re-derives every recorded delta from its recorded state and a fresh
    /// predictor call and returns the largest residual. The defining
    /// formulas must be reproducible from the trace alone.
    pub fn max_delta_residual(
        &self,
        predictor: &dyn NoisePredictor,
        schedule: NoiseSchedule,
        grid: &TimeGrid,
    ) -> f64 {
        let mut worst = 0.0f64;
        for j in 1..=self.top_index() {
            if let (Some(d), Some(z_j)) = (self.delta_fwd(j), self.state(j)) {
                let eps = predictor.epsilon_hat(&z_j.z, grid.t(j));
                let again = forward_delta(schedule, grid.t(j), grid.t(j - 1), &z_j.z, &eps);
                worst = worst.max(crate::state::max_abs_diff(d, &again));
            }
            if let (Some(d), Some(z_jm1)) = (self.delta_bwd(j), self.state(j - 1)) {
                let eps = predictor.epsilon_hat(&z_jm1.z, grid.t(j - 1));
                let again = backward_delta(schedule, grid.t(j), grid.t(j - 1), &z_jm1.z, &eps);
                worst = worst.max(crate::state::max_abs_diff(d, &again));
            }
        }
        worst
    }

    /// Trace dump: one row per state with the deltas conditioned on it
    /// (forward over its lower slot, backward over its upper slot).
    pub fn write_csv<W: std::io::Write>(&self, grid: &TimeGrid, mut w: W) -> std::io::Result<()> {
        let d = self.states[0].dim();
        let cols = |prefix: &str| -> String {
            (0..d).map(|k| format!(",{prefix}{k}")).collect::<String>()
        };
        writeln!(w, "index,time{}{}{}", cols("z"), cols("delta_fwd"), cols("delta_bwd"))?;
        for s in &self.states {
            let i = s.index;
            let mut row = format!("{},{}", i, grid.t(i));
            for v in &s.z {
                row.push_str(&format!(",{v}"));
            }
            let fwd = if i >= 1 { self.delta_fwd(i) } else { None };
            let bwd = self.delta_bwd(i + 1);
            for slot in [fwd, bwd] {
                match slot {
                    Some(vals) => {
                        for v in vals {
                            row.push_str(&format!(",{v}"));
                        }
                    }
                    None => row.push_str(&",".repeat(d)),
                }
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }
}

/// Plain DDIM sampling from `z_N` down to `z_0`; `N` predictor calls.
pub fn ddim_sample(
    z_n: State,
    predictor: &dyn NoisePredictor,
    schedule: NoiseSchedule,
    grid: &TimeGrid,
) -> Result<SolverTrace> {
    let n = grid.n();
    check_index(&z_n, n)?;
    let counter = CallCounter::new(predictor);
    let mut trace = SolverTrace::new(n);
    let mut current = z_n;
    for i in (1..=n).rev() {
        let eps = counter.epsilon_hat(&current.z, grid.t(i));
        trace.record_fwd(i, forward_delta(schedule, grid.t(i), grid.t(i - 1), &current.z, &eps));
        let next = ddim_step(&current, &eps, ddim_coeffs(schedule, grid, i)?)
            .ensure_finite("ddim_sample")?;
        trace.states.push(current);
        current = next;
    }
    trace.states.push(current);
    trace.epsilon_calls = counter.calls();
    Ok(trace)
}

/// BDIA sampling: boundary DDIM step, then the two-state recursion.
/// Exactly one predictor call per timestep, shared by both deltas.
pub fn bdia_sample(
    z_n: State,
    predictor: &dyn NoisePredictor,
    cfg: BdiaConfig,
    schedule: NoiseSchedule,
    grid: &TimeGrid,
) -> Result<SolverTrace> {
    let n = grid.n();
    check_index(&z_n, n)?;
    let counter = CallCounter::new(predictor);
    let mut trace = SolverTrace::new(n);

    let eps_n = counter.epsilon_hat(&z_n.z, grid.t(n));
    trace.record_fwd(n, forward_delta(schedule, grid.t(n), grid.t(n - 1), &z_n.z, &eps_n));
    let mut z_i = ddim_step(&z_n, &eps_n, ddim_coeffs(schedule, grid, n)?)
        .ensure_finite("bdia_sample init")?;
    let mut z_ip1 = z_n;

    for i in (1..=n - 1).rev() {
        let eps_i = counter.epsilon_hat(&z_i.z, grid.t(i));
        trace.record_fwd(i, forward_delta(schedule, grid.t(i), grid.t(i - 1), &z_i.z, &eps_i));
        trace.record_bwd(i + 1, backward_delta(schedule, grid.t(i + 1), grid.t(i), &z_i.z, &eps_i));
        let z_im1 = bdia_step(&z_ip1, &z_i, &eps_i, cfg, schedule, grid)?;
        trace.states.push(z_ip1);
        z_ip1 = z_i;
        z_i = z_im1;
    }
    trace.states.push(z_ip1);
    trace.states.push(z_i);
    trace.epsilon_calls = counter.calls();
    Ok(trace)
}

/// Exact BDIA inversion anchored on the adjacent pair `(z_0, z_1)`:
/// ascends to `z_N` by inverting each step, recording states and deltas.
/// The canonical round-trip protocol seeds `z_1` with one naive DDIM
/// inversion step and later descends from the stored top pair
/// `(z_N, z_{N-1})` rather than re-deriving the boundary step.
/// `N − 1` predictor calls.
pub fn bdia_invert_chain(
    z_0: State,
    z_1: State,
    predictor: &dyn NoisePredictor,
    cfg: BdiaConfig,
    schedule: NoiseSchedule,
    grid: &TimeGrid,
) -> Result<SolverTrace> {
    if cfg.gamma() == 0.0 {
        return Err(Error::NonInvertible);
    }
    let n = grid.n();
    check_index(&z_0, 0)?;
    check_index(&z_1, 1)?;
    let counter = CallCounter::new(predictor);
    let mut trace = SolverTrace::new(n);

    let mut ascending = vec![z_0, z_1];
    for i in 1..=n - 1 {
        let z_i = &ascending[i];
        let eps_i = counter.epsilon_hat(&z_i.z, grid.t(i));
        trace.record_fwd(i, forward_delta(schedule, grid.t(i), grid.t(i - 1), &z_i.z, &eps_i));
        trace.record_bwd(i + 1, backward_delta(schedule, grid.t(i + 1), grid.t(i), &z_i.z, &eps_i));
        let z_ip1 = bdia_invert_step(&ascending[i - 1], z_i, &eps_i, cfg, schedule, grid)?;
        ascending.push(z_ip1);
    }
    ascending.reverse();
    trace.states = ascending;
    trace.epsilon_calls = counter.calls();
    Ok(trace)
}

/// Descends with BDIA from a stored adjacent top pair `(z_N, z_{N-1})`,
/// skipping the boundary DDIM step. Completes the exact round trip started
/// by [`bdia_invert_chain`].
pub fn bdia_sample_from_pair(
    z_n: State,
    z_nm1: State,
    predictor: &dyn NoisePredictor,
    cfg: BdiaConfig,
    schedule: NoiseSchedule,
    grid: &TimeGrid,
) -> Result<SolverTrace> {
    let n = grid.n();
    check_index(&z_n, n)?;
    check_index(&z_nm1, n - 1)?;
    let counter = CallCounter::new(predictor);
    let mut trace = SolverTrace::new(n);
    let mut z_ip1 = z_n;
    let mut z_i = z_nm1;
    for i in (1..=n - 1).rev() {
        let eps_i = counter.epsilon_hat(&z_i.z, grid.t(i));
        trace.record_fwd(i, forward_delta(schedule, grid.t(i), grid.t(i - 1), &z_i.z, &eps_i));
        trace.record_bwd(i + 1, backward_delta(schedule, grid.t(i + 1), grid.t(i), &z_i.z, &eps_i));
        let z_im1 = bdia_step(&z_ip1, &z_i, &eps_i, cfg, schedule, grid)?;
        trace.states.push(z_ip1);
        z_ip1 = z_i;
        z_i = z_im1;
    }
    trace.states.push(z_ip1);
    trace.states.push(z_i);
    trace.epsilon_calls = counter.calls();
    Ok(trace)
}

/// Naive DDIM inversion chain from data space up to `z_N`, one predictor
/// call per slot; the baseline whose round-trip error BDIA eliminates.
pub fn ddim_invert_chain_naive(
    z_0: State,
    predictor: &dyn NoisePredictor,
    schedule: NoiseSchedule,
    grid: &TimeGrid,
) -> Result<SolverTrace> {
    let n = grid.n();
    check_index(&z_0, 0)?;
    let counter = CallCounter::new(predictor);
    let mut ascending = vec![z_0];
    for i in 1..=n {
        let next = ddim_invert_step_naive(&ascending[i - 1], &counter, schedule, grid, i)?;
        ascending.push(next);
    }
    ascending.reverse();
    let mut trace = SolverTrace::new(n);
    trace.states = ascending;
    trace.epsilon_calls = counter.calls();
    Ok(trace)
}

/// Coefficient pair of the historical expansion for offset `k = j − i`:
/// `((1 − (−γ)^k)/(1 + γ), (γ + (−γ)^k)/(1 + γ))`. The pair sums to 1 —
/// each slot ends up with an averaged forward and backward update.
pub fn expansion_coeffs(gamma: f64, k: usize) -> (f64, f64) {
    let p = (-gamma).powi(k as i32);
    ((1.0 - p) / (1.0 + gamma), (gamma + p) / (1.0 + gamma))
}

/// Evaluates the closed-form expansion of `z_i` from `z_N` and the recorded
/// deltas, independently of the recursion that produced the trace:
///
/// `z_i = z_N + Σ_{j=i+2}^{N} [c_f(j−i) Δ(t_j→t_{j-1}|z_j) − c_b(j−i) Δ(t_{j-1}→t_j|z_{j-1})] + Δ(t_{i+1}→t_i|z_{i+1})`.
///
/// Valid for `i ≤ N − 2`. At `γ = 1` the mod-2 form is evaluated as well
/// and a disagreement beyond 1e-12 is reported as an error.
pub fn prop1_expansion(trace: &SolverTrace, cfg: BdiaConfig, i: usize) -> Result<Vec<f64>> {
    let n = trace.top_index();
    if i + 2 > n {
        return Err(Error::IndexOutOfRange { index: i, min: 0, max: n - 2 });
    }
    let gamma = cfg.gamma();
    let mut acc = trace.initial().z.clone();
    for j in i + 2..=n {
        let (c_f, c_b) = expansion_coeffs(gamma, j - i);
        let fwd = trace.delta_fwd(j).ok_or(Error::MissingDelta(j))?;
        let bwd = trace.delta_bwd(j).ok_or(Error::MissingDelta(j))?;
        axpy(&mut acc, c_f, fwd);
        axpy(&mut acc, -c_b, bwd);
    }
    let last = trace.delta_fwd(i + 1).ok_or(Error::MissingDelta(i + 1))?;
    axpy(&mut acc, 1.0, last);

    if gamma == 1.0 {
        let mod2 = prop1_expansion_mod2(trace, i)?;
        let gap = crate::state::max_abs_diff(&acc, &mod2);
        if gap > 1e-12 {
            return Err(Error::TraceMismatch(format!(
                "general and mod-2 expansions disagree by {gap:e} at i = {i}"
            )));
        }
    }
    Ok(acc)
}

/// The `γ = 1` closed form: interlaced forward/backward updates surviving
/// a mod-2 pattern,
///
/// `z_i = z_N + Δ(t_N→t_{N-1}|z_N)·((N−i) mod 2) + Σ_{j=i+1}^{N-1} (−Δ(t_j→t_{j+1}|z_j) + Δ(t_j→t_{j-1}|z_j))·((j−i) mod 2)`.
pub fn prop1_expansion_mod2(trace: &SolverTrace, i: usize) -> Result<Vec<f64>> {
    let n = trace.top_index();
    if i + 2 > n {
        return Err(Error::IndexOutOfRange { index: i, min: 0, max: n - 2 });
    }
    let mut acc = trace.initial().z.clone();
    if (n - i) % 2 == 1 {
        let top = trace.delta_fwd(n).ok_or(Error::MissingDelta(n))?;
        acc = add(&acc, top);
    }
    for j in i + 1..=n - 1 {
        if (j - i) % 2 == 1 {
            // Δ(t_j → t_{j+1} | z_j) is the backward delta of slot j+1.
            let bwd = trace.delta_bwd(j + 1).ok_or(Error::MissingDelta(j + 1))?;
            let fwd = trace.delta_fwd(j).ok_or(Error::MissingDelta(j))?;
            axpy(&mut acc, -1.0, bwd);
            axpy(&mut acc, 1.0, fwd);
        }
    }
    Ok(acc)
}

fn check_index(state: &State, expected: usize) -> Result<()> {
    if state.index != expected {
        return Err(Error::InvalidParameter(format!(
            "state carries index {}, expected {}",
            state.index, expected
        )));
    }
    Ok(())
}

fn check_slot(grid: &TimeGrid, i: usize) -> Result<()> {
    if i < 1 || i > grid.n() {
        return Err(Error::IndexOutOfRange { index: i, min: 1, max: grid.n() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_time_grid, GridKind};
    use crate::models::synthetic::{LinearPredictor, ZeroPredictor};
    use crate::models::{AnalyticPredictor, GaussianMixture};
    use crate::state::max_abs_diff;
    use rand::Rng;

    fn edm_grid(n: usize, t_min: f64, t_max: f64) -> TimeGrid {
        make_time_grid(GridKind::Uniform, n, t_min, t_max, 1.0).unwrap()
    }

    fn pair_predictor(schedule: NoiseSchedule) -> AnalyticPredictor {
        AnalyticPredictor::new(GaussianMixture::symmetric_pair(1), schedule)
    }

    #[test]
    fn ddim_step_identity_and_hand_values() {
        // eps = 0 and a = 1 leave the state unchanged.
        let z = State::new(vec![0.4, -1.1], 3);
        let out = ddim_step(&z, &[0.0, 0.0], DdimCoeffs { a: 1.0, b: -0.7 });
        assert_eq!(out.z, z.z);
        assert_eq!(out.index, 2);

        // EDM slot [1.0, 0.5]: 1*2 + (-0.5)*1 = 1.5.
        let c = coeffs_between(NoiseSchedule::Edm, 1.0, 0.5);
        let out = ddim_step(&State::new(vec![2.0], 5), &[1.0], c);
        assert_eq!(out.z, vec![1.5]);

        // VP slot with alpha_i = 0.8 -> t = 0.36, alpha_{i-1} = 0.9 -> t = 0.19.
        let c = coeffs_between(NoiseSchedule::Vp, 0.36, 0.19);
        let out = ddim_step(&State::new(vec![1.0], 5), &[0.5], c);
        let eq6 = 0.9 * (1.0 - 0.6 * 0.5) / 0.8 + 0.19f64.sqrt() * 0.5;
        assert!((out.z[0] - eq6).abs() <= 1e-6);
        assert!((out.z[0] - 1.0054449).abs() <= 1e-6);
    }

    #[test]
    fn naive_inversion_is_identity_for_zero_score() {
        let grid = edm_grid(4, 0.1, 0.9);
        let p = ZeroPredictor { dim: 2 };
        let z0 = State::new(vec![0.3, -0.6], 0);
        let z1 = ddim_invert_step_naive(&z0, &p, NoiseSchedule::Edm, &grid, 1).unwrap();
        assert_eq!(z1.z, z0.z); // alpha = 1 and eps = 0
    }

    #[test]
    fn naive_round_trip_has_nonzero_error_on_mixture() {
        let schedule = NoiseSchedule::Edm;
        let grid = edm_grid(8, 0.05, 1.0);
        let p = pair_predictor(schedule);
        let z1 = State::new(vec![1.7], 1);
        let coeffs = ddim_coeffs(schedule, &grid, 1).unwrap();
        let eps = p.epsilon_hat(&z1.z, grid.t(1));
        let z0 = ddim_step(&z1, &eps, coeffs);
        let back = ddim_invert_step_naive(&z0, &p, schedule, &grid, 1).unwrap();
        assert!(max_abs_diff(&back.z, &z1.z) > 0.0);
    }

    #[test]
    fn naive_round_trip_error_shrinks_first_order_for_linear_predictor() {
        // With eps = c z the one-slot round-trip defect decreases ~ O(h).
        let schedule = NoiseSchedule::Edm;
        let p = LinearPredictor { coeff: 0.4, dim: 1 };
        let mut errs = Vec::new();
        for &n in &[8usize, 16, 32, 64] {
            let grid = edm_grid(n, 0.1, 1.0);
            let trace = ddim_sample(State::new(vec![1.3], n), &p, schedule, &grid).unwrap();
            let back = ddim_invert_chain_naive(trace.terminal().clone(), &p, schedule, &grid).unwrap();
            let err = max_abs_diff(&back.initial().z, &trace.initial().z);
            errs.push(((grid.t(n) - grid.t(0)) / n as f64, err));
        }
        let order = crate::analysis::convergence_order(&errs).unwrap();
        assert!((0.6..=1.4).contains(&order), "observed order {order}");
    }

    #[test]
    fn bdia_step_hand_example_and_round_trip() {
        // EDM times (1.0, 0.5, 0.25), gamma = 1: delta_bwd = 0.5, delta_fwd
        // = -0.25, z_{i-1} = 2 - 0.5 - 0.25 = 1.25.
        let schedule = NoiseSchedule::Edm;
        let grid = TimeGrid::from_times(vec![1.0, 0.5, 0.25]).unwrap();
        let cfg = BdiaConfig::new(1.0).unwrap();
        let z_ip1 = State::new(vec![2.0], 2);
        let z_i = State::new(vec![1.5], 1);
        let eps = vec![1.0];

        let bwd = backward_delta(schedule, 1.0, 0.5, &z_i.z, &eps);
        let fwd = forward_delta(schedule, 0.5, 0.25, &z_i.z, &eps);
        assert!((bwd[0] - 0.5).abs() <= 1e-15);
        assert!((fwd[0] + 0.25).abs() <= 1e-15);

        let z_im1 = bdia_step(&z_ip1, &z_i, &eps, cfg, schedule, &grid).unwrap();
        assert!((z_im1.z[0] - 1.25).abs() <= 1e-15);

        let back = bdia_invert_step(&z_im1, &z_i, &eps, cfg, schedule, &grid).unwrap();
        assert!((back.z[0] - 2.0).abs() <= 1e-13);
    }

    #[test]
    fn bdia_step_matches_term_by_term_oracle() {
        // Independent re-implementation of the definition, term by term.
        let schedule = NoiseSchedule::Edm;
        let grid = TimeGrid::from_times(vec![1.0, 0.5, 0.25]).unwrap();
        let mut rng = crate::rng::substream(3, 1);
        for _ in 0..200 {
            let gamma: f64 = rng.gen();
            let cfg = BdiaConfig::new(gamma).unwrap();
            let z_ip1 = State::new(vec![rng.gen::<f64>() * 4.0 - 2.0], 2);
            let z_i = State::new(vec![rng.gen::<f64>() * 4.0 - 2.0], 1);
            let eps = vec![rng.gen::<f64>() * 2.0 - 1.0];
            let got = bdia_step(&z_ip1, &z_i, &eps, cfg, schedule, &grid).unwrap();

            let (a_i, b_i) = {
                let c = coeffs_between(schedule, 0.5, 0.25);
                (c.a, c.b)
            };
            let (a_ip1, b_ip1) = {
                let c = coeffs_between(schedule, 1.0, 0.5);
                (c.a, c.b)
            };
            let oracle = gamma * (z_ip1.z[0] - z_i.z[0])
                - gamma * (z_i.z[0] / a_ip1 - b_ip1 / a_ip1 * eps[0] - z_i.z[0])
                + (a_i * z_i.z[0] + b_i * eps[0]);
            assert!((got.z[0] - oracle).abs() <= 1e-13, "gamma {gamma}");
        }
    }

    #[test]
    fn gamma_zero_step_equals_ddim_bitwise() {
        let schedule = NoiseSchedule::Vp;
        let grid = make_time_grid(GridKind::Uniform, 6, 0.05, 0.9, 1.0).unwrap();
        let cfg = BdiaConfig::new(0.0).unwrap();
        let z_ip1 = State::new(vec![0.21, -0.8], 4);
        let z_i = State::new(vec![1.4, 0.33], 3);
        let eps = vec![0.2, -0.9];
        let got = bdia_step(&z_ip1, &z_i, &eps, cfg, schedule, &grid).unwrap();
        let ddim = ddim_step(&z_i, &eps, ddim_coeffs(schedule, &grid, 3).unwrap());
        assert_eq!(got.z, ddim.z);
    }

    #[test]
    fn gamma_one_zero_noise_unit_scale_skips_two_back() {
        let schedule = NoiseSchedule::Edm;
        let grid = TimeGrid::from_times(vec![0.9, 0.6, 0.3]).unwrap();
        let cfg = BdiaConfig::new(1.0).unwrap();
        let z_ip1 = State::new(vec![0.77], 2);
        let z_i = State::new(vec![-0.4], 1);
        let got = bdia_step(&z_ip1, &z_i, &[0.0], cfg, schedule, &grid).unwrap();
        assert_eq!(got.z, z_ip1.z);
    }

    #[test]
    fn invert_step_rejects_gamma_zero() {
        let schedule = NoiseSchedule::Edm;
        let grid = TimeGrid::from_times(vec![1.0, 0.5, 0.25]).unwrap();
        let cfg = BdiaConfig::new(0.0).unwrap();
        let err = bdia_invert_step(
            &State::new(vec![1.0], 0),
            &State::new(vec![1.0], 1),
            &[0.0],
            cfg,
            schedule,
            &grid,
        );
        assert!(matches!(err, Err(Error::NonInvertible)));
    }

    #[test]
    fn invert_after_step_is_identity_for_random_draws() {
        let grid = TimeGrid::from_times(vec![0.9, 0.55, 0.2]).unwrap();
        let mut rng = crate::rng::substream(11, 2);
        for schedule in [NoiseSchedule::Edm, NoiseSchedule::Vp] {
            for _ in 0..500 {
                let gamma = 0.05 + 0.95 * rng.gen::<f64>();
                let cfg = BdiaConfig::new(gamma).unwrap();
                let z_ip1 = State::new(vec![rng.gen::<f64>() * 6.0 - 3.0, rng.gen()], 2);
                let z_i = State::new(vec![rng.gen::<f64>() * 6.0 - 3.0, rng.gen()], 1);
                let eps = vec![rng.gen::<f64>() * 2.0 - 1.0, rng.gen()];
                let down = bdia_step(&z_ip1, &z_i, &eps, cfg, schedule, &grid).unwrap();
                let up = bdia_invert_step(&down, &z_i, &eps, cfg, schedule, &grid).unwrap();
                assert!(max_abs_diff(&up.z, &z_ip1.z) <= 1e-13);

                // And the other direction.
                let down2 = bdia_step(&up, &z_i, &eps, cfg, schedule, &grid).unwrap();
                assert!(max_abs_diff(&down2.z, &down.z) <= 1e-13);
            }
        }
    }

    #[test]
    fn time_symmetry_swapped_step_equals_inverse() {
        let schedule = NoiseSchedule::Edm;
        let (t_up, t_i, t_dn) = (1.0, 0.6, 0.15);
        let mut rng = crate::rng::substream(13, 3);
        for _ in 0..500 {
            let z_im1 = vec![rng.gen::<f64>() * 4.0 - 2.0];
            let z_i = vec![rng.gen::<f64>() * 4.0 - 2.0];
            let eps = vec![rng.gen::<f64>() * 2.0 - 1.0];
            let swapped = bdia_step_at_times(&z_im1, &z_i, &eps, 1.0, t_dn, t_i, t_up, schedule);
            let inverse =
                bdia_invert_at_times(&z_im1, &z_i, &eps, 1.0, t_up, t_i, t_dn, schedule).unwrap();
            assert!(max_abs_diff(&swapped, &inverse) <= 1e-13);
        }
    }

    #[test]
    fn single_step_chain_is_one_ddim_step() {
        let schedule = NoiseSchedule::Edm;
        let grid = TimeGrid::from_times(vec![1.0, 0.2]).unwrap();
        let p = pair_predictor(schedule);
        let cfg = BdiaConfig::new(1.0).unwrap();
        let trace = bdia_sample(State::new(vec![0.9], 1), &p, cfg, schedule, &grid).unwrap();
        assert_eq!(trace.len(), 2);
        assert_eq!(trace.epsilon_calls(), 1);
        let boundary = bdia_init_step(&State::new(vec![0.9], 1), &p, schedule, &grid).unwrap();
        assert_eq!(trace.terminal().z, boundary.z);
    }

    #[test]
    fn gamma_zero_trace_equals_ddim_trace() {
        let schedule = NoiseSchedule::Edm;
        let grid = edm_grid(12, 0.05, 1.0);
        let p = pair_predictor(schedule);
        let start = State::new(vec![1.9], 12);
        let ddim = ddim_sample(start.clone(), &p, schedule, &grid).unwrap();
        let bdia = bdia_sample(start, &p, BdiaConfig::new(0.0).unwrap(), schedule, &grid).unwrap();
        for (a, b) in ddim.states().iter().zip(bdia.states()) {
            assert!(max_abs_diff(&a.z, &b.z) <= 1e-14);
        }
        assert_eq!(ddim.epsilon_calls(), 12);
        assert_eq!(bdia.epsilon_calls(), 12);
    }

    #[test]
    fn sample_then_invert_recovers_all_states() {
        let schedule = NoiseSchedule::Edm;
        let grid = edm_grid(20, 0.05, 1.0);
        let p = pair_predictor(schedule);
        for gamma in [0.92, 1.0] {
            let cfg = BdiaConfig::new(gamma).unwrap();
            let trace = bdia_sample(State::new(vec![2.2], 20), &p, cfg, schedule, &grid).unwrap();
            let z0 = trace.terminal().clone();
            let z1 = trace.state(1).unwrap().clone();
            let up = bdia_invert_chain(z0, z1, &p, cfg, schedule, &grid).unwrap();
            for i in 0..=20 {
                let a = trace.state(i).unwrap();
                let b = up.state(i).unwrap();
                assert!(max_abs_diff(&a.z, &b.z) <= 1e-10, "gamma {gamma} index {i}");
            }
            assert_eq!(up.epsilon_calls(), 19);
        }
    }

    #[test]
    fn ascents_with_different_gamma_diverge() {
        let schedule = NoiseSchedule::Edm;
        let grid = edm_grid(10, 0.05, 1.0);
        let p = pair_predictor(schedule);
        let z0 = State::new(vec![1.71], 0);
        let z1 = State::new(vec![1.83], 1);
        let up92 = bdia_invert_chain(
            z0.clone(),
            z1.clone(),
            &p,
            BdiaConfig::new(0.92).unwrap(),
            schedule,
            &grid,
        )
        .unwrap();
        let up100 =
            bdia_invert_chain(z0, z1, &p, BdiaConfig::new(1.0).unwrap(), schedule, &grid).unwrap();
        assert!(max_abs_diff(&up92.initial().z, &up100.initial().z) > 1e-6);
    }

    #[test]
    fn expansion_coefficients_sum_to_one() {
        for gamma in [0.0, 0.25, 0.5, 0.92, 1.0] {
            for k in 2..=40 {
                let (c_f, c_b) = expansion_coeffs(gamma, k);
                assert!((c_f + c_b - 1.0).abs() <= 1e-15, "gamma {gamma} k {k}");
            }
        }
    }

    #[test]
    fn prop1_expansion_matches_iterated_states() {
        let schedule = NoiseSchedule::Edm;
        let grid = edm_grid(20, 0.05, 1.0);
        let p = pair_predictor(schedule);
        for gamma in [0.5, 0.92, 1.0] {
            let cfg = BdiaConfig::new(gamma).unwrap();
            let trace = bdia_sample(State::new(vec![1.3], 20), &p, cfg, schedule, &grid).unwrap();
            for i in 0..=18 {
                let expanded = prop1_expansion(&trace, cfg, i).unwrap();
                let iterated = &trace.state(i).unwrap().z;
                assert!(
                    max_abs_diff(&expanded, iterated) <= 1e-10,
                    "gamma {gamma} i {i}"
                );
            }
        }
    }

    #[test]
    fn prop1_two_forms_agree_at_gamma_one() {
        let schedule = NoiseSchedule::Edm;
        let grid = edm_grid(20, 0.05, 1.0);
        let p = pair_predictor(schedule);
        let cfg = BdiaConfig::new(1.0).unwrap();
        let trace = bdia_sample(State::new(vec![-0.7], 20), &p, cfg, schedule, &grid).unwrap();
        for i in 0..=18 {
            let general = prop1_expansion(&trace, cfg, i).unwrap();
            let mod2 = prop1_expansion_mod2(&trace, i).unwrap();
            assert!(max_abs_diff(&general, &mod2) <= 1e-12);
        }
    }

    #[test]
    fn prop1_first_step_reduces_to_hand_expansion() {
        // i = N-2: z_{N-2} = z_N + (1-gamma) Δf(N) - gamma Δb(N) + Δf(N-1).
        let schedule = NoiseSchedule::Edm;
        let grid = edm_grid(6, 0.1, 1.0);
        let p = pair_predictor(schedule);
        let gamma = 0.37;
        let cfg = BdiaConfig::new(gamma).unwrap();
        let trace = bdia_sample(State::new(vec![0.9], 6), &p, cfg, schedule, &grid).unwrap();
        let i = 4;
        let mut hand = trace.initial().z.clone();
        axpy(&mut hand, 1.0 - gamma, trace.delta_fwd(6).unwrap());
        axpy(&mut hand, -gamma, trace.delta_bwd(6).unwrap());
        axpy(&mut hand, 1.0, trace.delta_fwd(5).unwrap());
        let expansion = prop1_expansion(&trace, cfg, i).unwrap();
        assert!(max_abs_diff(&hand, &expansion) <= 1e-15);
    }

    #[test]
    fn trace_deltas_reproduce_their_formulas() {
        let schedule = NoiseSchedule::Edm;
        let grid = edm_grid(15, 0.05, 1.0);
        let p = pair_predictor(schedule);
        let cfg = BdiaConfig::new(0.92).unwrap();
        let trace = bdia_sample(State::new(vec![1.1], 15), &p, cfg, schedule, &grid).unwrap();
        assert!(trace.max_delta_residual(&p, schedule, &grid) <= 1e-13);
        assert_eq!(trace.epsilon_calls(), 15);
    }

    #[test]
    fn prop1_rejects_missing_deltas_and_bad_index() {
        let schedule = NoiseSchedule::Edm;
        let grid = edm_grid(8, 0.05, 1.0);
        let p = pair_predictor(schedule);
        // DDIM traces carry no backward deltas.
        let trace = ddim_sample(State::new(vec![0.4], 8), &p, schedule, &grid).unwrap();
        let cfg = BdiaConfig::new(0.5).unwrap();
        assert!(matches!(prop1_expansion(&trace, cfg, 3), Err(Error::MissingDelta(_))));
        let bdia = bdia_sample(State::new(vec![0.4], 8), &p, cfg, schedule, &grid).unwrap();
        assert!(prop1_expansion(&bdia, cfg, 7).is_err());
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let schedule = NoiseSchedule::Edm;
        let grid = edm_grid(4, 0.1, 1.0);
        let p = pair_predictor(schedule);
        let cfg = BdiaConfig::new(1.0).unwrap();
        let trace = bdia_sample(State::new(vec![0.5], 4), &p, cfg, schedule, &grid).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&grid, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "index,time,z0,delta_fwd0,delta_bwd0");
        assert_eq!(text.lines().count(), 6);
    }
}
