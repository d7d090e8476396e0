//! Metrics, sweep drivers and report generation.
//!
//! This module turns solver traces into the comparison artifacts the rest
//! of the tooling consumes: terminal error against a high-resolution
//! reference, round-trip reconstruction error, and distributional distances
//! (energy distance, with a sliced 1-D Wasserstein as the secondary
//! metric) between solver outputs and exact samples.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::ddim::{
    bdia_invert_chain, bdia_sample, bdia_sample_from_pair, ddim_invert_chain_naive,
    ddim_invert_step_naive, ddim_sample, BdiaConfig,
};
use crate::dpm::{bdia_dpmpp_sample, dpmpp_2m_sample};
use crate::edict::{
    cbdia_invert_chain, cbdia_sample, edict_invert_chain, edict_sample, CbdiaConfig, CoupledState,
};
use crate::edm::{bdia_edm_sample, edm_sample};
use crate::error::{Error, Result};
use crate::grid::{make_time_grid, GridKind, TimeGrid};
use crate::models::{
    draw_initial_states, exact_sample, flow_gradient, AnalyticPredictor, GaussianMixture,
};
use crate::schedule::NoiseSchedule;
use crate::state::{axpy, l2_dist, max_abs_diff, State};

/// Fixed-step count of the schedule-generic reference integrator used for
/// terminal errors; fine enough that its own error sits far below every
/// solver's.
const REFERENCE_STEPS: usize = 2000;

/// All-pairs distance sums are used up to this many points per set; larger
/// sets fall back to a fixed number of seeded random pairs.
const PAIR_THRESHOLD: usize = 10_000;
const SUBSAMPLED_PAIRS: usize = 1_000_000;

/// Projection count of the sliced 1-D Wasserstein metric.
const SLICED_PROJECTIONS: usize = 32;

/// The solvers the drivers and the CLI know by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Ddim,
    BdiaDdim,
    Edict,
    Cbdia,
    Edm,
    BdiaEdm,
    Dpmpp2m,
    BdiaDpmpp2m,
    DdimNaive,
}

impl Solver {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "ddim" => Solver::Ddim,
            "bdia-ddim" => Solver::BdiaDdim,
            "edict" => Solver::Edict,
            "cbdia" => Solver::Cbdia,
            "edm" => Solver::Edm,
            "bdia-edm" => Solver::BdiaEdm,
            "dpmpp-2m" => Solver::Dpmpp2m,
            "bdia-dpmpp-2m" => Solver::BdiaDpmpp2m,
            "ddim-naive" => Solver::DdimNaive,
            other => return Err(Error::UnknownSolver(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Solver::Ddim => "ddim",
            Solver::BdiaDdim => "bdia-ddim",
            Solver::Edict => "edict",
            Solver::Cbdia => "cbdia",
            Solver::Edm => "edm",
            Solver::BdiaEdm => "bdia-edm",
            Solver::Dpmpp2m => "dpmpp-2m",
            Solver::BdiaDpmpp2m => "bdia-dpmpp-2m",
            Solver::DdimNaive => "ddim-naive",
        }
    }

    pub fn all() -> &'static [Solver] {
        &[
            Solver::Ddim,
            Solver::BdiaDdim,
            Solver::Edict,
            Solver::Cbdia,
            Solver::Edm,
            Solver::BdiaEdm,
            Solver::Dpmpp2m,
            Solver::BdiaDpmpp2m,
            Solver::DdimNaive,
        ]
    }

    /// Solvers with an exact (or, for `ddim-naive`, approximate) data→noise
    /// path usable in round trips.
    pub fn supports_roundtrip(&self) -> bool {
        matches!(
            self,
            Solver::BdiaDdim | Solver::Edict | Solver::Cbdia | Solver::DdimNaive
        )
    }

    pub fn requires_edm_schedule(&self) -> bool {
        matches!(self, Solver::Edm | Solver::BdiaEdm)
    }

    /// Solvers that evaluate the predictor at the terminal grid time and
    /// therefore need `σ(t_0) > 0`.
    pub fn needs_positive_terminal_sigma(&self) -> bool {
        matches!(
            self,
            Solver::Cbdia | Solver::Dpmpp2m | Solver::BdiaDpmpp2m | Solver::DdimNaive
        )
    }

    /// Predictor evaluations one sampling run performs: `N` for the
    /// single-state solvers, `2N` for the coupled ones, and `2N` (or
    /// `2N − 1` with a terminal `σ = 0` Euler step) for the Heun family.
    pub fn expected_nfe(&self, n: usize, terminal_sigma_zero: bool) -> usize {
        match self {
            Solver::Ddim | Solver::BdiaDdim | Solver::Dpmpp2m | Solver::BdiaDpmpp2m
            | Solver::DdimNaive => n,
            Solver::Edict | Solver::Cbdia => 2 * n,
            Solver::Edm | Solver::BdiaEdm => {
                if terminal_sigma_zero {
                    2 * n - 1
                } else {
                    2 * n
                }
            }
        }
    }
}

impl std::fmt::Display for Solver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-solver tunables; unused entries are ignored by solvers that do not
/// take them.
#[derive(Debug, Clone, Copy)]
pub struct SolverParams {
    pub gamma: f64,
    pub p: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self { gamma: 1.0, p: 0.93, gamma1: 0.0, gamma2: 1.0 }
    }
}

impl SolverParams {
    /// The scalar reported in the `param` column: `γ` for the BDIA family,
    /// `p` for EDICT, `γ₁` for CBDIA, zero for parameter-free solvers.
    pub fn primary(&self, solver: Solver) -> f64 {
        match solver {
            Solver::BdiaDdim | Solver::BdiaEdm | Solver::BdiaDpmpp2m => self.gamma,
            Solver::Edict => self.p,
            Solver::Cbdia => self.gamma1,
            _ => 0.0,
        }
    }
}

/// One row of the comparison matrix.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub solver: String,
    pub n_steps: usize,
    pub param: f64,
    pub terminal_error: Option<f64>,
    pub roundtrip_error: Option<f64>,
    pub energy_distance: Option<f64>,
    pub sliced_w1: Option<f64>,
    pub nfe: usize,
    pub wall_time_s: f64,
}

pub const REPORT_CSV_HEADER: &str =
    "solver,n_steps,param,terminal_error,roundtrip_error,energy_distance,sliced_w1,nfe,wall_time_s";

impl ComparisonReport {
    /// One CSV row. Timings default to zero so identical configs produce
    /// byte-identical files; pass `include_timing` for measured values.
    pub fn csv_row(&self, include_timing: bool) -> String {
        let opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let wall = if include_timing { self.wall_time_s } else { 0.0 };
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.solver,
            self.n_steps,
            self.param,
            opt(&self.terminal_error),
            opt(&self.roundtrip_error),
            opt(&self.energy_distance),
            opt(&self.sliced_w1),
            self.nfe,
            wall
        )
    }

    pub fn json_value(&self, include_timing: bool) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if !include_timing {
            v["wall_time_s"] = serde_json::json!(0.0);
        }
        v
    }
}

pub fn write_reports_csv<W: std::io::Write>(
    reports: &[ComparisonReport],
    include_timing: bool,
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "{REPORT_CSV_HEADER}")?;
    for r in reports {
        writeln!(w, "{}", r.csv_row(include_timing))?;
    }
    Ok(())
}

/// Elementwise max-abs and RMS error over a batch of reconstructions.
pub fn reconstruction_error(
    original: &[Vec<f64>],
    reconstructed: &[Vec<f64>],
) -> Result<(f64, f64)> {
    if original.len() != reconstructed.len() {
        return Err(Error::DimMismatch(format!(
            "batch sizes {} vs {}",
            original.len(),
            reconstructed.len()
        )));
    }
    if original.is_empty() {
        return Err(Error::EmptyInput("reconstruction_error needs at least one pair"));
    }
    let mut max_abs = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut count = 0usize;
    for (a, b) in original.iter().zip(reconstructed) {
        if a.len() != b.len() {
            return Err(Error::DimMismatch("vector dimensions differ".into()));
        }
        for (x, y) in a.iter().zip(b) {
            let d = (x - y).abs();
            max_abs = max_abs.max(d);
            sum_sq += d * d;
            count += 1;
        }
    }
    Ok((max_abs, (sum_sq / count as f64).sqrt()))
}

/// Plug-in energy distance `2 E‖x−y‖ − E‖x−x'‖ − E‖y−y'‖`. Within-set
/// means run over distinct pairs; sets larger than the all-pairs threshold
/// use a fixed count of seeded random pairs. Arguments are put in a
/// canonical order first, so `ed(a, b) == ed(b, a)` bit for bit.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("energy_distance needs non-empty samples"));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::DimMismatch("sample dimensions differ".into()));
    }
    let (x, y) = if set_order(a, b) == std::cmp::Ordering::Greater { (b, a) } else { (a, b) };
    let cross = mean_cross_distance(x, y);
    let within_x = mean_within_distance(x);
    let within_y = mean_within_distance(y);
    Ok(2.0 * cross - within_x - within_y)
}

/// Total order on sample sets (length, then lexicographic on entries) used
/// only to canonicalize argument order.
fn set_order(a: &[Vec<f64>], b: &[Vec<f64>]) -> std::cmp::Ordering {
    a.len().cmp(&b.len()).then_with(|| {
        for (x, y) in a.iter().zip(b) {
            for (u, v) in x.iter().zip(y) {
                let ord = u.total_cmp(v);
                if ord != std::cmp::Ordering::Equal {
                    return ord;
                }
            }
        }
        std::cmp::Ordering::Equal
    })
}

fn mean_cross_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    if a.len().max(b.len()) > PAIR_THRESHOLD {
        let mut rng = crate::rng::substream(0xED, crate::rng::STREAM_PAIRS);
        let mut sum = 0.0;
        for _ in 0..SUBSAMPLED_PAIRS {
            let x = &a[rng.gen_range(0..a.len())];
            let y = &b[rng.gen_range(0..b.len())];
            sum += l2_dist(x, y);
        }
        return sum / SUBSAMPLED_PAIRS as f64;
    }
    let mut sum = 0.0;
    for x in a {
        for y in b {
            sum += l2_dist(x, y);
        }
    }
    sum / (a.len() as f64 * b.len() as f64)
}

fn mean_within_distance(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    if n > PAIR_THRESHOLD {
        let mut rng = crate::rng::substream(0xED, crate::rng::STREAM_PAIRS);
        let mut sum = 0.0;
        let mut used = 0usize;
        while used < SUBSAMPLED_PAIRS {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            if i != j {
                sum += l2_dist(&a[i], &a[j]);
                used += 1;
            }
        }
        return sum / SUBSAMPLED_PAIRS as f64;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += l2_dist(&a[i], &a[j]);
        }
    }
    // Unordered distinct pairs, each counted once.
    sum / (n as f64 * (n as f64 - 1.0) / 2.0)
}

/// Sliced 1-D Wasserstein-1: the exact W1 between projected empirical
/// measures, averaged over seeded random unit directions.
pub fn sliced_w1(a: &[Vec<f64>], b: &[Vec<f64>], seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("sliced_w1 needs non-empty samples"));
    }
    let d = a[0].len();
    let mut rng = crate::rng::substream(seed, crate::rng::STREAM_PROJECTIONS);
    let mut total = 0.0;
    for _ in 0..SLICED_PROJECTIONS {
        let mut u: Vec<f64> = (0..d).map(|_| crate::models::standard_normal(&mut rng)).collect();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        for x in &mut u {
            *x /= norm;
        }
        let proj = |set: &[Vec<f64>]| -> Vec<f64> {
            set.iter()
                .map(|v| v.iter().zip(&u).map(|(x, w)| x * w).sum())
                .collect()
        };
        total += w1_1d(proj(a), proj(b));
    }
    Ok(total / SLICED_PROJECTIONS as f64)
}

/// Exact W1 between two 1-D empirical distributions of any sizes, via the
/// area between their CDFs.
fn w1_1d(mut xs: Vec<f64>, mut ys: Vec<f64>) -> f64 {
    xs.sort_unstable_by(f64::total_cmp);
    ys.sort_unstable_by(f64::total_cmp);
    let (n, m) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut last = f64::NAN;
    let mut area = 0.0;
    while i < xs.len() || j < ys.len() {
        let next = match (xs.get(i), ys.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        if last.is_finite() && next > last {
            let fa = i as f64 / n;
            let fb = j as f64 / m;
            area += (fa - fb).abs() * (next - last);
        }
        while i < xs.len() && xs[i] == next {
            i += 1;
        }
        while j < ys.len() && ys[j] == next {
            j += 1;
        }
        last = next;
    }
    area
}

/// Least-squares slope of `log e` against `log h`; the empirical
/// convergence order of an error sequence.
pub fn convergence_order(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|&(h, e)| h <= 0.0 || e <= 0.0) {
        return Err(Error::InvalidParameter("step sizes and errors must be positive".into()));
    }
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(h, e) in points {
        let (x, y) = (h.ln(), e.ln());
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    Ok((n * sxy - sx * sy) / (n * sxx - sx * sx))
}

/// Everything a comparison run needs besides the solver choice.
#[derive(Debug, Clone)]
pub struct BenchSetup {
    pub model: GaussianMixture,
    pub schedule: NoiseSchedule,
    pub grid_kind: GridKind,
    pub t_min: f64,
    pub t_max: f64,
    pub rho: f64,
    pub seed: u64,
    /// Trajectories used for distributional metrics.
    pub batch: usize,
    /// Trajectories used for terminal error (reference integrations are
    /// costly, so this is capped separately).
    pub error_batch: usize,
}

impl BenchSetup {
    pub fn grid(&self, n: usize) -> Result<TimeGrid> {
        let grid = make_time_grid(self.grid_kind, n, self.t_min, self.t_max, self.rho)?;
        self.schedule.check_grid(&grid)?;
        Ok(grid)
    }

    fn check_solver(&self, solver: Solver) -> Result<()> {
        if solver.requires_edm_schedule() && self.schedule != NoiseSchedule::Edm {
            return Err(Error::Config(format!(
                "{} requires the edm schedule",
                solver.name()
            )));
        }
        if solver.needs_positive_terminal_sigma() && self.schedule.sigma(self.t_min) <= 0.0 {
            return Err(Error::Config(format!(
                "{} evaluates the predictor at t_0 and needs sigma(t_0) > 0",
                solver.name()
            )));
        }
        Ok(())
    }
}

/// Runs `solver` on every drawn trajectory and returns the terminal states
/// plus the per-trajectory NFE.
pub fn sample_terminals(
    setup: &BenchSetup,
    solver: Solver,
    n: usize,
    params: SolverParams,
) -> Result<(Vec<Vec<f64>>, usize)> {
    setup.check_solver(solver)?;
    let grid = setup.grid(n)?;
    let predictor = AnalyticPredictor::new(setup.model.clone(), setup.schedule);
    let inits = draw_initial_states(
        &setup.model,
        setup.schedule,
        setup.t_max,
        n,
        setup.seed,
        setup.batch,
    )?;
    let mut terminals = Vec::with_capacity(inits.len());
    let mut nfe = 0usize;
    for init in inits {
        let (terminal, calls) = run_solver_once(solver, init, &predictor, setup, &grid, params)?;
        nfe = calls;
        terminals.push(terminal);
    }
    Ok((terminals, nfe))
}

fn run_solver_once(
    solver: Solver,
    init: State,
    predictor: &AnalyticPredictor,
    setup: &BenchSetup,
    grid: &TimeGrid,
    params: SolverParams,
) -> Result<(Vec<f64>, usize)> {
    Ok(match solver {
        Solver::Ddim | Solver::DdimNaive => {
            let t = ddim_sample(init, predictor, setup.schedule, grid)?;
            (t.terminal().z.clone(), t.epsilon_calls())
        }
        Solver::BdiaDdim => {
            let cfg = BdiaConfig::new(params.gamma)?;
            let t = bdia_sample(init, predictor, cfg, setup.schedule, grid)?;
            (t.terminal().z.clone(), t.epsilon_calls())
        }
        Solver::Edict => {
            let s = CoupledState::from_single(init.z, init.index);
            let t = edict_sample(s, predictor, params.p, setup.schedule, grid)?;
            (t.terminal().z.clone(), t.epsilon_calls())
        }
        Solver::Cbdia => {
            let cfg = CbdiaConfig::new(params.gamma1, params.gamma2)?;
            let s = CoupledState::from_single(init.z, init.index);
            let t = cbdia_sample(s, predictor, cfg, setup.schedule, grid)?;
            (t.terminal().z.clone(), t.epsilon_calls())
        }
        Solver::Edm => {
            let t = edm_sample(init, predictor, grid)?;
            (t.terminal().z.clone(), t.gradient_calls())
        }
        Solver::BdiaEdm => {
            let t = bdia_edm_sample(init, predictor, params.gamma, grid)?;
            (t.terminal().z.clone(), t.gradient_calls())
        }
        Solver::Dpmpp2m => {
            let t = dpmpp_2m_sample(init, predictor, setup.schedule, grid)?;
            (t.terminal().z.clone(), t.epsilon_calls())
        }
        Solver::BdiaDpmpp2m => {
            let t = bdia_dpmpp_sample(init, predictor, params.gamma, setup.schedule, grid)?;
            (t.terminal().z.clone(), t.epsilon_calls())
        }
    })
}

/// Reference endpoint by high-resolution RK4 on the schedule-generic
/// probability-flow field.
pub fn reference_endpoint(
    model: &GaussianMixture,
    schedule: NoiseSchedule,
    z_from: &[f64],
    t_from: f64,
    t_to: f64,
    n_steps: usize,
) -> Result<Vec<f64>> {
    let h = (t_to - t_from) / n_steps as f64;
    let mut z = z_from.to_vec();
    for k in 0..n_steps {
        let t = t_from + k as f64 * h;
        let t_next = if k + 1 == n_steps { t_to } else { t_from + (k + 1) as f64 * h };
        let step = t_next - t;
        let half = 0.5 * step;
        let k1 = flow_gradient(model, schedule, &z, t)?;
        let mut z2 = z.clone();
        axpy(&mut z2, half, &k1);
        let k2 = flow_gradient(model, schedule, &z2, t + half)?;
        let mut z3 = z.clone();
        axpy(&mut z3, half, &k2);
        let k3 = flow_gradient(model, schedule, &z3, t + half)?;
        let mut z4 = z.clone();
        axpy(&mut z4, step, &k3);
        let k4 = flow_gradient(model, schedule, &z4, t_next)?;
        let sixth = step / 6.0;
        for (zi, (((a, b), c), d)) in z.iter_mut().zip(k1.iter().zip(&k2).zip(&k3).zip(&k4)) {
            *zi += sixth * (a + 2.0 * b + 2.0 * c + d);
        }
    }
    Ok(z)
}

/// Outcome of one data→noise→data round trip over a batch.
#[derive(Debug, Clone)]
pub struct RoundTripOutcome {
    pub originals: Vec<Vec<f64>>,
    pub regenerated: Vec<Vec<f64>>,
    pub max_abs: f64,
    pub rms: f64,
    /// Total predictor evaluations per trajectory, both passes.
    pub nfe: usize,
}

/// Runs the round-trip protocol of `solver` on `batch` exact data-space
/// samples. With `edit_shift` the regeneration pass uses the mean-shifted
/// mixture, mimicking an edit; reconstruction errors then measure the edit
/// strength rather than solver exactness.
pub fn round_trip(
    solver: Solver,
    model: &GaussianMixture,
    schedule: NoiseSchedule,
    grid: &TimeGrid,
    params: SolverParams,
    seed: u64,
    batch: usize,
    edit_shift: Option<&[f64]>,
) -> Result<RoundTripOutcome> {
    if !solver.supports_roundtrip() {
        return Err(Error::Config(format!(
            "{} has no inversion path; round trips need one of ddim-naive, bdia-ddim, edict, cbdia",
            solver.name()
        )));
    }
    if schedule.sigma(grid.t(0)) <= 0.0 {
        return Err(Error::Config(
            "round trips evaluate the predictor at t_0 and need sigma(t_0) > 0".into(),
        ));
    }
    let originals = exact_sample(model, schedule, grid.t(0), seed, batch)?;
    let forward = AnalyticPredictor::new(model.clone(), schedule);
    let backward_model = match edit_shift {
        Some(shift) => model.shifted(shift)?,
        None => model.clone(),
    };
    let backward = AnalyticPredictor::new(backward_model, schedule);

    let mut regenerated = Vec::with_capacity(batch);
    let mut nfe = 0usize;
    for z0 in &originals {
        let (z, calls) = round_trip_once(solver, z0, &forward, &backward, schedule, grid, params)?;
        regenerated.push(z);
        nfe = calls;
    }
    let (max_abs, rms) = reconstruction_error(&originals, &regenerated)?;
    Ok(RoundTripOutcome { originals, regenerated, max_abs, rms, nfe })
}

fn round_trip_once(
    solver: Solver,
    z0: &[f64],
    forward: &AnalyticPredictor,
    backward: &AnalyticPredictor,
    schedule: NoiseSchedule,
    grid: &TimeGrid,
    params: SolverParams,
) -> Result<(Vec<f64>, usize)> {
    let n = grid.n();
    Ok(match solver {
        Solver::BdiaDdim => {
            let cfg = BdiaConfig::new(params.gamma)?;
            let start = State::new(z0.to_vec(), 0);
            // Seed the adjacent pair with one naive step, ascend exactly,
            // then descend from the stored top pair.
            let z1 = ddim_invert_step_naive(&start, forward, schedule, grid, 1)?;
            let up = bdia_invert_chain(start, z1, forward, cfg, schedule, grid)?;
            let z_n = up.initial().clone();
            let z_nm1 = up.state(n - 1).expect("ascent covers n-1").clone();
            let down = bdia_sample_from_pair(z_n, z_nm1, backward, cfg, schedule, grid)?;
            (down.terminal().z.clone(), 1 + up.epsilon_calls() + down.epsilon_calls())
        }
        Solver::DdimNaive => {
            let up = ddim_invert_chain_naive(State::new(z0.to_vec(), 0), forward, schedule, grid)?;
            let down = ddim_sample(up.initial().clone(), backward, schedule, grid)?;
            (down.terminal().z.clone(), up.epsilon_calls() + down.epsilon_calls())
        }
        Solver::Edict => {
            let up = edict_invert_chain(
                CoupledState::from_single(z0.to_vec(), 0),
                forward,
                params.p,
                schedule,
                grid,
            )?;
            let down = edict_sample(up.initial().clone(), backward, params.p, schedule, grid)?;
            (down.terminal().z.clone(), up.epsilon_calls() + down.epsilon_calls())
        }
        Solver::Cbdia => {
            let cfg = CbdiaConfig::new(params.gamma1, params.gamma2)?;
            let up = cbdia_invert_chain(
                CoupledState::from_single(z0.to_vec(), 0),
                forward,
                cfg,
                schedule,
                grid,
            )?;
            let down = cbdia_sample(up.initial().clone(), backward, cfg, schedule, grid)?;
            (down.terminal().z.clone(), up.epsilon_calls() + down.epsilon_calls())
        }
        _ => unreachable!("guarded by supports_roundtrip"),
    })
}

/// Builds the full report for one `(solver, n)` cell: terminal error
/// against the reference field, distributional distances against exact
/// samples, a round-trip error where the solver supports one, and NFE.
pub fn run_report(
    setup: &BenchSetup,
    solver: Solver,
    n: usize,
    params: SolverParams,
) -> Result<ComparisonReport> {
    let started = Instant::now();
    let (terminals, nfe) = sample_terminals(setup, solver, n, params)?;
    let grid = setup.grid(n)?;

    // Terminal error on a capped sub-batch.
    let inits = draw_initial_states(
        &setup.model,
        setup.schedule,
        setup.t_max,
        n,
        setup.seed,
        setup.error_batch.min(setup.batch),
    )?;
    let mut terminal_error = 0.0f64;
    for (init, terminal) in inits.iter().zip(&terminals) {
        let reference = reference_endpoint(
            &setup.model,
            setup.schedule,
            &init.z,
            setup.t_max,
            setup.t_min,
            REFERENCE_STEPS,
        )?;
        terminal_error = terminal_error.max(max_abs_diff(terminal, &reference));
    }

    // Distribution distances against exact terminal-time samples, drawn
    // from an independent substream.
    let exact = exact_sample(
        &setup.model,
        setup.schedule,
        setup.t_min,
        setup.seed ^ 0x5EED_CAFE,
        setup.batch,
    )?;
    let ed = energy_distance(&terminals, &exact)?;
    let sw1 = sliced_w1(&terminals, &exact, setup.seed)?;

    // gamma = 0 collapses BDIA onto plain DDIM, which has no exact inverse.
    let invertible_here = solver.supports_roundtrip()
        && !(solver == Solver::BdiaDdim && params.gamma == 0.0);
    let roundtrip_error = if invertible_here {
        let out = round_trip(
            solver,
            &setup.model,
            setup.schedule,
            &grid,
            params,
            setup.seed,
            setup.error_batch.min(32).max(1),
            None,
        )?;
        Some(out.max_abs)
    } else {
        None
    };

    Ok(ComparisonReport {
        solver: solver.name().to_string(),
        n_steps: n,
        param: params.primary(solver),
        terminal_error: Some(terminal_error),
        roundtrip_error,
        energy_distance: Some(ed),
        sliced_w1: Some(sw1),
        nfe,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// One report per γ value, everything else fixed.
pub fn gamma_sweep(
    setup: &BenchSetup,
    solver: Solver,
    gammas: &[f64],
    n: usize,
    base: SolverParams,
) -> Result<Vec<ComparisonReport>> {
    gammas
        .iter()
        .map(|&gamma| {
            let params = SolverParams { gamma, ..base };
            run_report(setup, solver, n, params)
        })
        .collect()
}

/// Cross-product comparison matrix, optionally fanned out over threads.
/// Work items are assigned round-robin and joined back in cross-product
/// order, so the output is identical for any worker count.
pub fn compare_matrix(
    setup: &BenchSetup,
    solvers: &[Solver],
    ns: &[usize],
    params: SolverParams,
    workers: usize,
) -> Result<Vec<ComparisonReport>> {
    if solvers.is_empty() || ns.is_empty() {
        return Err(Error::Config("compare needs at least one solver and one step count".into()));
    }
    let cells: Vec<(Solver, usize)> = solvers
        .iter()
        .flat_map(|&s| ns.iter().map(move |&n| (s, n)))
        .collect();
    let workers = workers.max(1).min(cells.len());

    if workers == 1 {
        return cells
            .iter()
            .map(|&(s, n)| run_report(setup, s, n, params))
            .collect();
    }

    let mut slots: Vec<Option<Result<ComparisonReport>>> = Vec::new();
    slots.resize_with(cells.len(), || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..workers {
            let cells = &cells;
            let setup = &setup;
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                for (idx, &(s, n)) in cells.iter().enumerate() {
                    if idx % workers == w {
                        out.push((idx, run_report(setup, s, n, params)));
                    }
                }
                out
            }));
        }
        for h in handles {
            for (idx, res) in h.join().expect("worker panicked") {
                slots[idx] = Some(res);
            }
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.expect("all cells computed"))
        .collect()
}
