//! Heun sampler on the EDM parameterization, its BDIA refinement, and a
//! high-resolution classical reference integrator.
//!
//! All operations here assume the EDM schedule (`α ≡ 1`, `σ = t`), where
//! the probability-flow field is the predictor's `gradient` output. Each
//! Heun step averages the gradients at both slot ends; the BDIA variant
//! additionally refines the incoming state with the previous slot's pair of
//! gradients before stepping, reusing `d_{i+1}` so the gradient-evaluation
//! count stays identical to plain Heun. BDIA-EDM targets sampling quality,
//! not inversion, so no inverse is provided.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::models::{CallCounter, NoisePredictor};
use crate::state::{axpy, lincomb2, max_abs_diff, State};

/// Everything one trace row needs to reproduce its own update lines:
/// the incoming state, the refined estimate, the Euler predictor and the
/// two gradients. `d_prime` is absent exactly when `σ(t_{i-1}) = 0`.
#[derive(Debug, Clone)]
pub struct EdmTraceEntry {
    pub index: usize,
    pub t: f64,
    pub z: Vec<f64>,
    pub z_hat: Vec<f64>,
    pub z_tilde: Vec<f64>,
    pub d: Vec<f64>,
    pub d_prime: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct EdmTrace {
    entries: Vec<EdmTraceEntry>,
    final_state: State,
    gradient_calls: usize,
}

impl EdmTrace {
    pub fn entries(&self) -> &[EdmTraceEntry] {
        &self.entries
    }

    pub fn terminal(&self) -> &State {
        &self.final_state
    }

    pub fn gradient_calls(&self) -> usize {
        self.gradient_calls
    }

    /// State entering the step at grid index `i`, or the terminal state.
    pub fn state(&self, i: usize) -> Option<Vec<f64>> {
        if i == self.final_state.index {
            return Some(self.final_state.z.clone());
        }
        self.entries.iter().find(|e| e.index == i).map(|e| e.z.clone())
    }

    /// Largest residual when every recorded row is replayed through its
    /// own defining lines, using only trace fields.
    pub fn max_line_residual(&self, gamma: f64, grid: &TimeGrid) -> f64 {
        let mut worst = 0.0f64;
        for (k, e) in self.entries.iter().enumerate() {
            let i = e.index;
            let h = grid.t(i - 1) - grid.t(i);
            // Refinement line (first entry has z_hat = z by definition).
            if k == 0 {
                worst = worst.max(max_abs_diff(&e.z_hat, &e.z));
            } else {
                let prev = &self.entries[k - 1];
                let h_up = grid.t(i) - grid.t(i + 1);
                let mut zhat = lincomb2(gamma, &prev.z, 1.0 - gamma, &e.z);
                axpy(&mut zhat, gamma * h_up * 0.5, &prev.d);
                axpy(&mut zhat, gamma * h_up * 0.5, &e.d);
                worst = worst.max(max_abs_diff(&zhat, &e.z_hat));
            }
            // Euler predictor line.
            let mut ztilde = e.z_hat.clone();
            axpy(&mut ztilde, h, &e.d);
            worst = worst.max(max_abs_diff(&ztilde, &e.z_tilde));
            // Output line.
            let out = match &e.d_prime {
                Some(dp) => {
                    let mut z = e.z_hat.clone();
                    axpy(&mut z, 0.5 * h, &e.d);
                    axpy(&mut z, 0.5 * h, dp);
                    z
                }
                None => e.z_tilde.clone(),
            };
            let next = match self.entries.get(k + 1) {
                Some(n) => &n.z,
                None => &self.final_state.z,
            };
            worst = worst.max(max_abs_diff(&out, next));
        }
        worst
    }

    /// Trace dump: index, time, state, refined estimate, Euler predictor,
    /// both gradients.
    pub fn write_csv<W: std::io::Write>(&self, grid: &TimeGrid, mut w: W) -> std::io::Result<()> {
        let d = self.final_state.dim();
        let cols = |prefix: &str| -> String {
            (0..d).map(|k| format!(",{prefix}{k}")).collect::<String>()
        };
        writeln!(
            w,
            "index,t{}{}{}{}{}",
            cols("z"),
            cols("z_hat"),
            cols("z_tilde"),
            cols("d"),
            cols("d_prime")
        )?;
        for e in &self.entries {
            let mut row = format!("{},{}", e.index, e.t);
            for block in [&e.z, &e.z_hat, &e.z_tilde, &e.d] {
                for v in block.iter() {
                    row.push_str(&format!(",{v}"));
                }
            }
            match &e.d_prime {
                Some(dp) => {
                    for v in dp {
                        row.push_str(&format!(",{v}"));
                    }
                }
                None => row.push_str(&",".repeat(d)),
            }
            writeln!(w, "{row}")?;
        }
        let term = &self.final_state;
        let mut row = format!("{},{}", term.index, grid.t(term.index));
        for v in &term.z {
            row.push_str(&format!(",{v}"));
        }
        row.push_str(&",".repeat(4 * d));
        writeln!(w, "{row}")
    }
}

/// One Heun step from `t_i` to `t_{i-1}`:
/// `z̃ = z + h d(z, t_i)`, then `z' = z + h (d + d(z̃, t_{i-1}))/2`,
/// falling back to the Euler predictor when `σ(t_{i-1}) = 0`.
pub fn edm_heun_step(
    z_i: &State,
    predictor: &dyn NoisePredictor,
    grid: &TimeGrid,
    i: usize,
) -> Result<(State, EdmTraceEntry)> {
    let entry = heun_core(&z_i.z, &z_i.z, predictor, grid, i)?;
    let out = step_output(&entry, grid, i);
    Ok((State::new(out, i - 1).ensure_finite("edm_heun_step")?, entry))
}

/// Runs the Heun body at index `i` with a possibly refined base estimate.
/// `d` is always evaluated at the un-refined `z`, the base only shifts the
/// integration origin.
fn heun_core(
    z: &[f64],
    base: &[f64],
    predictor: &dyn NoisePredictor,
    grid: &TimeGrid,
    i: usize,
) -> Result<EdmTraceEntry> {
    if i < 1 || i > grid.n() {
        return Err(Error::IndexOutOfRange { index: i, min: 1, max: grid.n() });
    }
    let (t_i, t_prev) = (grid.t(i), grid.t(i - 1));
    if t_i <= 0.0 {
        return Err(Error::OutOfDomain(t_i));
    }
    let h = t_prev - t_i;
    let d = predictor.gradient(z, t_i);
    let mut z_tilde = base.to_vec();
    axpy(&mut z_tilde, h, &d);
    let d_prime = if t_prev != 0.0 {
        Some(predictor.gradient(&z_tilde, t_prev))
    } else {
        None
    };
    Ok(EdmTraceEntry {
        index: i,
        t: t_i,
        z: z.to_vec(),
        z_hat: base.to_vec(),
        z_tilde,
        d,
        d_prime,
    })
}

fn step_output(entry: &EdmTraceEntry, grid: &TimeGrid, i: usize) -> Vec<f64> {
    let h = grid.t(i - 1) - grid.t(i);
    match &entry.d_prime {
        Some(dp) => {
            let mut z = entry.z_hat.clone();
            axpy(&mut z, 0.5 * h, &entry.d);
            axpy(&mut z, 0.5 * h, dp);
            z
        }
        None => entry.z_tilde.clone(),
    }
}

/// Plain EDM Heun chain from `z_N` to `z_0`, built step by step from
/// [`edm_heun_step`].
pub fn edm_sample(
    z_n: State,
    predictor: &dyn NoisePredictor,
    grid: &TimeGrid,
) -> Result<EdmTrace> {
    let n = grid.n();
    if z_n.index != n {
        return Err(Error::InvalidParameter(format!(
            "chain must start at index {n}, got {}",
            z_n.index
        )));
    }
    let counter = CallCounter::new(predictor);
    let mut entries = Vec::with_capacity(n);
    let mut current = z_n;
    for i in (1..=n).rev() {
        let (next, entry) = edm_heun_step(&current, &counter, grid, i)?;
        entries.push(entry);
        current = next;
    }
    Ok(EdmTrace { entries, final_state: current, gradient_calls: counter.calls() })
}

/// BDIA-EDM chain: for `i < N` the incoming state is refined with the
/// previous slot's averaged gradients before the Heun body runs,
///
/// `ẑ_i = z_{i+1} + (1−γ)(z_i − z_{i+1}) + γ (t_i − t_{i+1}) (d_{i+1} + d_i)/2`,
///
/// with `d_i` evaluated at the un-refined `z_i` and `d_{i+1}` reused from
/// the previous index. `γ = 0` reproduces plain Heun bit for bit.
pub fn bdia_edm_sample(
    z_n: State,
    predictor: &dyn NoisePredictor,
    gamma: f64,
    grid: &TimeGrid,
) -> Result<EdmTrace> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidParameter(format!(
            "gamma must be in [0, 1], got {gamma}"
        )));
    }
    let n = grid.n();
    if z_n.index != n {
        return Err(Error::InvalidParameter(format!(
            "chain must start at index {n}, got {}",
            z_n.index
        )));
    }
    let counter = CallCounter::new(predictor);
    let mut entries: Vec<EdmTraceEntry> = Vec::with_capacity(n);
    let mut current = z_n.z;

    for i in (1..=n).rev() {
        let (t_i, dim) = (grid.t(i), current.len());
        if t_i <= 0.0 {
            return Err(Error::OutOfDomain(t_i));
        }
        let d_i = counter.gradient(&current, t_i);
        let base = match entries.last() {
            Some(prev) if gamma != 0.0 => {
                let h_up = t_i - grid.t(i + 1);
                let mut zhat = lincomb2(gamma, &prev.z, 1.0 - gamma, &current);
                axpy(&mut zhat, gamma * h_up * 0.5, &prev.d);
                axpy(&mut zhat, gamma * h_up * 0.5, &d_i);
                zhat
            }
            _ => current.clone(),
        };

        let h = grid.t(i - 1) - t_i;
        let mut z_tilde = base.clone();
        axpy(&mut z_tilde, h, &d_i);
        let d_prime = if grid.t(i - 1) != 0.0 {
            Some(counter.gradient(&z_tilde, grid.t(i - 1)))
        } else {
            None
        };
        let entry = EdmTraceEntry {
            index: i,
            t: t_i,
            z: current,
            z_hat: base,
            z_tilde,
            d: d_i,
            d_prime,
        };
        let next = step_output(&entry, grid, i);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("bdia_edm_sample".into()));
        }
        debug_assert_eq!(next.len(), dim);
        entries.push(entry);
        current = next;
    }

    Ok(EdmTrace {
        entries,
        final_state: State::new(current, 0),
        gradient_calls: counter.calls(),
    })
}

/// Classical fixed-step 4th-order reference integration of
/// `dz/dt = d(z, t)` from `t_from` to `t_to`. When `t_to = 0` the final
/// sub-step is plain Euler so the field is never evaluated at `σ = 0`.
/// Fixed summation order; bit-identical across runs.
pub fn rk4_reference(
    z_from: &State,
    predictor: &dyn NoisePredictor,
    t_from: f64,
    t_to: f64,
    n_steps: usize,
) -> Result<State> {
    if n_steps == 0 {
        return Err(Error::InvalidParameter("n_steps must be >= 1".into()));
    }
    if t_from == t_to {
        return Ok(z_from.clone());
    }
    let h = (t_to - t_from) / n_steps as f64;
    let mut z = z_from.z.clone();
    for k in 0..n_steps {
        let t = t_from + k as f64 * h;
        let t_next = if k + 1 == n_steps { t_to } else { t_from + (k + 1) as f64 * h };
        if t_next == 0.0 {
            // Terminal Euler sub-step.
            let d = predictor.gradient(&z, t);
            axpy(&mut z, t_next - t, &d);
            break;
        }
        let half = 0.5 * (t_next - t);
        let k1 = predictor.gradient(&z, t);
        let mut z2 = z.clone();
        axpy(&mut z2, half, &k1);
        let k2 = predictor.gradient(&z2, t + half);
        let mut z3 = z.clone();
        axpy(&mut z3, half, &k2);
        let k3 = predictor.gradient(&z3, t + half);
        let mut z4 = z.clone();
        axpy(&mut z4, t_next - t, &k3);
        let k4 = predictor.gradient(&z4, t_next);
        let sixth = (t_next - t) / 6.0;
        for (zi, (((a, b), c), d)) in z
            .iter_mut()
            .zip(k1.iter().zip(&k2).zip(&k3).zip(&k4))
        {
            *zi += sixth * (a + 2.0 * b + 2.0 * c + d);
        }
    }
    State::new(z, 0).ensure_finite("rk4_reference")
}
