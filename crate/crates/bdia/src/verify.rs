//! The runnable invariant suite behind `verify`: every structural claim
//! the solvers make, checked end to end with pass/fail reporting.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::Solver;
use crate::config::RunConfig;
use crate::ddim::{
    backward_delta, bdia_invert_step, bdia_sample, bdia_step,
    bdia_step_at_times, ddim_invert_step_naive, ddim_sample, expansion_coeffs, forward_delta,
    prop1_expansion, prop1_expansion_mod2, BdiaConfig,
};
use crate::dpm::{bdia_dpmpp_sample, dpmpp_2m_sample};
use crate::edict::{
    cbdia_bdia_equivalence, cbdia_invert_step, cbdia_sample, cbdia_step, edict_invert_step,
    edict_step, lemma1_residuals, lemma2_residuals, CbdiaConfig, CoupledState,
};
use crate::edm::{bdia_edm_sample, edm_sample};
use crate::error::Result;
use crate::grid::{make_time_grid, GridKind, TimeGrid};
use crate::models::{AnalyticPredictor, GaussianMixture, NoisePredictor};
use crate::schedule::{coeffs_between, NoiseSchedule};
use crate::state::{max_abs_diff, State};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
}

impl CheckOutcome {
    fn pass(name: &'static str, detail: impl Into<String>) -> Self {
        Self { name, status: Status::Pass, detail: detail.into() }
    }

    fn fail(name: &'static str, detail: impl Into<String>) -> Self {
        Self { name, status: Status::Fail, detail: detail.into() }
    }

    fn skip(name: &'static str, detail: impl Into<String>) -> Self {
        Self { name, status: Status::Skip, detail: detail.into() }
    }

    fn from_bound(name: &'static str, value: f64, bound: f64) -> Self {
        if value <= bound {
            Self::pass(name, format!("{value:.3e} <= {bound:.0e}"))
        } else {
            Self::fail(name, format!("{value:.3e} > {bound:.0e}"))
        }
    }
}

#[derive(Debug)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    pub fn failures(&self) -> Vec<&CheckOutcome> {
        self.checks.iter().filter(|c| c.status == Status::Fail).collect()
    }

    pub fn write<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for c in &self.checks {
            let tag = match c.status {
                Status::Pass => "PASS",
                Status::Fail => "FAIL",
                Status::Skip => "SKIP",
            };
            writeln!(w, "{tag} {} ({})", c.name, c.detail)?;
        }
        let failed = self.failures().len();
        writeln!(w, "{} checks, {} failed", self.checks.len(), failed)
    }
}

/// Runs the full invariant suite. `inject_coeff_fault` flips the sign of
/// the DDIM `b` coefficient inside the reconstruction-identity check — a
/// mutation hook proving the suite actually detects corruption.
pub fn run_verification(config: &RunConfig, inject_coeff_fault: bool) -> Result<VerifyReport> {
    config.validate()?;
    let model = config.mixture_model()?;
    let mut rng = crate::rng::substream(config.seed, crate::rng::STREAM_VERIFY);
    let mut checks = Vec::new();

    checks.push(coeff_identity_check(&mut rng, inject_coeff_fault));
    checks.push(vp_variance_check());
    checks.push(grid_check());
    checks.push(score_consistency_check(&model, &mut rng));
    checks.push(coefficient_sum_check());
    checks.push(time_symmetry_check(&mut rng));
    checks.push(single_step_inversion_check(config, &mut rng));
    checks.push(chain_roundtrip_check(config, &model));
    checks.push(prop1_check(&model));
    checks.push(reduction_checks(&model, config));
    checks.push(edict_inversion_check(config, &model, &mut rng));
    checks.push(cbdia_inversion_check(config, &model, &mut rng));
    checks.push(equivalence_check(&model));
    checks.push(nfe_check(&model, config));
    checks.push(edm_terminal_rule_check(&model));
    checks.push(trace_delta_check(&model, config));

    Ok(VerifyReport { checks })
}

fn unit_grid(n: usize) -> TimeGrid {
    make_time_grid(GridKind::Uniform, n, 0.05, 1.0, 1.0).expect("valid grid")
}

fn coeff_identity_check(rng: &mut ChaCha8Rng, fault: bool) -> CheckOutcome {
    const NAME: &str = "ddim-coefficient-identity";
    let mut worst = 0.0f64;
    for schedule in [NoiseSchedule::Vp, NoiseSchedule::Edm] {
        let grid = make_time_grid(GridKind::Uniform, 16, 0.02, 0.9, 1.0).unwrap();
        for i in 1..=grid.n() {
            let mut c = coeffs_between(schedule, grid.t(i), grid.t(i - 1));
            if fault {
                c.b = -c.b;
            }
            for _ in 0..8 {
                let z: f64 = rng.gen::<f64>() * 6.0 - 3.0;
                let eps: f64 = rng.gen::<f64>() * 2.0 - 1.0;
                let direct = c.a * z + c.b * eps;
                let unfolded = schedule.alpha(grid.t(i - 1)) * (z - schedule.sigma(grid.t(i)) * eps)
                    / schedule.alpha(grid.t(i))
                    + schedule.sigma(grid.t(i - 1)) * eps;
                worst = worst.max((direct - unfolded).abs());
            }
        }
    }
    CheckOutcome::from_bound(NAME, worst, 1e-15)
}

fn vp_variance_check() -> CheckOutcome {
    const NAME: &str = "vp-variance-preservation";
    let grid = make_time_grid(GridKind::Uniform, 64, 0.0, 0.99, 1.0).unwrap();
    let worst = grid
        .times_desc()
        .iter()
        .map(|&t| {
            let (a, s) = (NoiseSchedule::Vp.alpha(t), NoiseSchedule::Vp.sigma(t));
            (a * a + s * s - 1.0).abs()
        })
        .fold(0.0, f64::max);
    CheckOutcome::from_bound(NAME, worst, 1e-12)
}

fn grid_check() -> CheckOutcome {
    const NAME: &str = "grid-construction";
    let uniform = make_time_grid(GridKind::Uniform, 17, 0.01, 0.93, 1.0).unwrap();
    if !uniform.times_desc().windows(2).all(|w| w[0] > w[1]) {
        return CheckOutcome::fail(NAME, "uniform grid not strictly decreasing");
    }
    let power = make_time_grid(GridKind::PowerLaw, 17, 0.01, 0.93, 1.0).unwrap();
    let worst = uniform
        .times_desc()
        .iter()
        .zip(power.times_desc())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    CheckOutcome::from_bound(NAME, worst, 1e-12)
}

fn score_consistency_check(model: &GaussianMixture, rng: &mut ChaCha8Rng) -> CheckOutcome {
    const NAME: &str = "score-finite-difference";
    let mut worst = 0.0f64;
    let h = 1e-5;
    for schedule in [NoiseSchedule::Vp, NoiseSchedule::Edm] {
        for _ in 0..40 {
            let t = 0.05 + 0.8 * rng.gen::<f64>();
            let z: Vec<f64> = (0..model.dim()).map(|_| rng.gen::<f64>() * 6.0 - 3.0).collect();
            let marginal = crate::models::mixture_marginal(model, schedule, t);
            let eps = match crate::models::epsilon_hat_analytic(model, schedule, &z, t) {
                Ok(e) => e,
                Err(e) => return CheckOutcome::fail(NAME, e.to_string()),
            };
            for k in 0..z.len() {
                let mut up = z.clone();
                let mut dn = z.clone();
                up[k] += h;
                dn[k] -= h;
                let fd = (marginal.log_density(&up) - marginal.log_density(&dn)) / (2.0 * h);
                let expected = -schedule.sigma(t) * fd;
                let scale = expected.abs().max(1e-3);
                worst = worst.max((eps[k] - expected).abs() / scale);
            }
        }
    }
    CheckOutcome::from_bound(NAME, worst, 1e-5)
}

fn coefficient_sum_check() -> CheckOutcome {
    const NAME: &str = "expansion-coefficient-sums";
    let mut worst = 0.0f64;
    for gamma in [0.0, 0.25, 0.5, 0.92, 1.0] {
        for k in 2..=60 {
            let (c_f, c_b) = expansion_coeffs(gamma, k);
            worst = worst.max((c_f + c_b - 1.0).abs());
        }
    }
    CheckOutcome::from_bound(NAME, worst, 1e-15)
}

fn time_symmetry_check(rng: &mut ChaCha8Rng) -> CheckOutcome {
    const NAME: &str = "time-symmetry";
    let grid = TimeGrid::from_times(vec![0.9, 0.55, 0.2]).unwrap();
    let cfg = BdiaConfig::new(1.0).unwrap();
    let mut worst = 0.0f64;
    for schedule in [NoiseSchedule::Vp, NoiseSchedule::Edm] {
        for _ in 0..500 {
            let z_im1 = vec![rng.gen::<f64>() * 4.0 - 2.0];
            let z_i_vec = vec![rng.gen::<f64>() * 4.0 - 2.0];
            let eps = vec![rng.gen::<f64>() * 2.0 - 1.0];
            let swapped = bdia_step_at_times(
                &z_im1, &z_i_vec, &eps, 1.0, grid.t(0), grid.t(1), grid.t(2), schedule,
            );
            let inverse = bdia_invert_step(
                &State::new(z_im1.clone(), 0),
                &State::new(z_i_vec, 1),
                &eps,
                cfg,
                schedule,
                &grid,
            )
            .expect("gamma = 1 invertible");
            worst = worst.max(max_abs_diff(&swapped, &inverse.z));
        }
    }
    CheckOutcome::from_bound(NAME, worst, 1e-13)
}

fn single_step_inversion_check(config: &RunConfig, rng: &mut ChaCha8Rng) -> CheckOutcome {
    const NAME: &str = "bdia-step-inversion";
    if config.gamma == 0.0 {
        return CheckOutcome::skip(NAME, "gamma = 0 is plain DDIM and has no exact inverse");
    }
    let cfg = BdiaConfig::new(config.gamma).expect("validated");
    let grid = TimeGrid::from_times(vec![0.9, 0.5, 0.2]).unwrap();
    let mut worst = 0.0f64;
    for schedule in [NoiseSchedule::Vp, NoiseSchedule::Edm] {
        for _ in 0..500 {
            let z_ip1 = State::new(vec![rng.gen::<f64>() * 6.0 - 3.0], 2);
            let z_i = State::new(vec![rng.gen::<f64>() * 6.0 - 3.0], 1);
            let eps = vec![rng.gen::<f64>() * 2.0 - 1.0];
            let down = bdia_step(&z_ip1, &z_i, &eps, cfg, schedule, &grid).unwrap();
            let up = bdia_invert_step(&down, &z_i, &eps, cfg, schedule, &grid).unwrap();
            worst = worst.max(max_abs_diff(&up.z, &z_ip1.z));
        }
    }
    CheckOutcome::from_bound(NAME, worst, 1e-13)
}

fn chain_roundtrip_check(config: &RunConfig, model: &GaussianMixture) -> CheckOutcome {
    const NAME: &str = "bdia-chain-roundtrip";
    if config.gamma == 0.0 {
        return CheckOutcome::skip(NAME, "gamma = 0 is plain DDIM and has no exact inverse");
    }
    let schedule = config.schedule.kind;
    let grid = match config.time_grid() {
        Ok(g) if schedule.sigma(g.t(0)) > 0.0 => g,
        _ => unit_grid(20),
    };
    let params = config.solver_params();
    match crate::analysis::round_trip(
        Solver::BdiaDdim,
        model,
        schedule,
        &grid,
        params,
        config.seed,
        8,
        None,
    ) {
        Ok(out) => CheckOutcome::from_bound(NAME, out.max_abs, 1e-8),
        Err(e) => CheckOutcome::fail(NAME, e.to_string()),
    }
}

fn prop1_check(model: &GaussianMixture) -> CheckOutcome {
    const NAME: &str = "prop1-expansion";
    let schedule = NoiseSchedule::Edm;
    let grid = unit_grid(20);
    let predictor = AnalyticPredictor::new(model.clone(), schedule);
    let start = || State::new(vec![1.1; model.dim()], 20);
    let mut worst = 0.0f64;
    let mut worst_forms = 0.0f64;
    for gamma in [0.5, 0.92, 1.0] {
        let cfg = BdiaConfig::new(gamma).unwrap();
        let trace = match bdia_sample(start(), &predictor, cfg, schedule, &grid) {
            Ok(t) => t,
            Err(e) => return CheckOutcome::fail(NAME, e.to_string()),
        };
        for i in 0..=18 {
            let expanded = match prop1_expansion(&trace, cfg, i) {
                Ok(v) => v,
                Err(e) => return CheckOutcome::fail(NAME, e.to_string()),
            };
            worst = worst.max(max_abs_diff(&expanded, &trace.state(i).unwrap().z));
            if gamma == 1.0 {
                let mod2 = prop1_expansion_mod2(&trace, i).unwrap();
                worst_forms = worst_forms.max(max_abs_diff(&expanded, &mod2));
            }
        }
    }
    if worst_forms > 1e-12 {
        return CheckOutcome::fail(NAME, format!("mod-2 form disagrees by {worst_forms:.3e}"));
    }
    CheckOutcome::from_bound(NAME, worst, 1e-10)
}

fn reduction_checks(model: &GaussianMixture, config: &RunConfig) -> CheckOutcome {
    const NAME: &str = "gamma-zero-reductions";
    let mut worst = 0.0f64;

    // BDIA-DDIM vs DDIM on the configured schedule.
    let schedule = config.schedule.kind;
    let grid = unit_grid(12);
    let predictor = AnalyticPredictor::new(model.clone(), schedule);
    let start = State::new(vec![1.7; model.dim()], 12);
    let ddim = ddim_sample(start.clone(), &predictor, schedule, &grid).unwrap();
    let bdia = bdia_sample(
        start.clone(),
        &predictor,
        BdiaConfig::new(0.0).unwrap(),
        schedule,
        &grid,
    )
    .unwrap();
    for (a, b) in ddim.states().iter().zip(bdia.states()) {
        worst = worst.max(max_abs_diff(&a.z, &b.z));
    }

    // The Heun and multistep families on the EDM schedule.
    let edm_predictor = AnalyticPredictor::new(model.clone(), NoiseSchedule::Edm);
    let heun = edm_sample(start.clone(), &edm_predictor, &grid).unwrap();
    let bdia_edm = bdia_edm_sample(start.clone(), &edm_predictor, 0.0, &grid).unwrap();
    worst = worst.max(max_abs_diff(&heun.terminal().z, &bdia_edm.terminal().z));
    for e in heun.entries() {
        worst = worst.max(max_abs_diff(
            &e.z,
            &bdia_edm.state(e.index).expect("same coverage"),
        ));
    }

    let dpm = dpmpp_2m_sample(start.clone(), &edm_predictor, NoiseSchedule::Edm, &grid).unwrap();
    let bdia_dpm =
        bdia_dpmpp_sample(start, &edm_predictor, 0.0, NoiseSchedule::Edm, &grid).unwrap();
    for (a, b) in dpm.states().iter().zip(bdia_dpm.states()) {
        worst = worst.max(max_abs_diff(&a.z, &b.z));
    }

    CheckOutcome::from_bound(NAME, worst, 1e-14)
}

fn edict_inversion_check(
    config: &RunConfig,
    model: &GaussianMixture,
    rng: &mut ChaCha8Rng,
) -> CheckOutcome {
    const NAME: &str = "edict-inversion";
    let grid = unit_grid(12);
    let mut worst = 0.0f64;
    for schedule in [NoiseSchedule::Vp, NoiseSchedule::Edm] {
        let predictor = AnalyticPredictor::new(model.clone(), schedule);
        for _ in 0..100 {
            let z: Vec<f64> = (0..model.dim()).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let y: Vec<f64> = (0..model.dim()).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let s = CoupledState::new(z, y, 6);
            let (down, _) = edict_step(&s, &predictor, config.p, schedule, &grid).unwrap();
            let up = edict_invert_step(&down, &predictor, config.p, schedule, &grid).unwrap();
            worst = worst.max(max_abs_diff(&up.z, &s.z).max(max_abs_diff(&up.y, &s.y)));
        }
    }
    CheckOutcome::from_bound(NAME, worst, 1e-13)
}

fn cbdia_inversion_check(
    config: &RunConfig,
    model: &GaussianMixture,
    rng: &mut ChaCha8Rng,
) -> CheckOutcome {
    const NAME: &str = "cbdia-inversion";
    let cfg = match CbdiaConfig::new(config.gamma1, config.gamma2) {
        Ok(c) => c,
        Err(e) => return CheckOutcome::fail(NAME, e.to_string()),
    };
    let grid = unit_grid(12);
    let mut worst = 0.0f64;
    for schedule in [NoiseSchedule::Vp, NoiseSchedule::Edm] {
        let predictor = AnalyticPredictor::new(model.clone(), schedule);
        for _ in 0..100 {
            let z: Vec<f64> = (0..model.dim()).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let y: Vec<f64> = (0..model.dim()).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let s = CoupledState::new(z, y, 6);
            let (down, _) = cbdia_step(&s, &predictor, cfg, schedule, &grid).unwrap();
            let up = cbdia_invert_step(&down, &predictor, cfg, schedule, &grid).unwrap();
            worst = worst.max(max_abs_diff(&up.z, &s.z).max(max_abs_diff(&up.y, &s.y)));
        }
    }
    CheckOutcome::from_bound(NAME, worst, 1e-13)
}

fn equivalence_check(model: &GaussianMixture) -> CheckOutcome {
    const NAME: &str = "cbdia-bdia-equivalence";
    let schedule = NoiseSchedule::Edm;
    let grid = unit_grid(20);
    let predictor = AnalyticPredictor::new(model.clone(), schedule);
    let start = vec![1.37; model.dim()];

    let coupled = cbdia_sample(
        CoupledState::from_single(start.clone(), 20),
        &predictor,
        CbdiaConfig::bdia_equivalent(),
        schedule,
        &grid,
    )
    .unwrap();
    let single = bdia_sample(
        State::new(start.clone(), 20),
        &predictor,
        BdiaConfig::new(1.0).unwrap(),
        schedule,
        &grid,
    )
    .unwrap();
    let disc = match cbdia_bdia_equivalence(&coupled, &single) {
        Ok(d) => d,
        Err(e) => return CheckOutcome::fail(NAME, e.to_string()),
    };
    if disc > 1e-12 {
        return CheckOutcome::fail(NAME, format!("sequence discrepancy {disc:.3e}"));
    }
    let (l1y, l1z) = lemma1_residuals(&coupled).unwrap();
    let lemma2_trace = cbdia_sample(
        CoupledState::from_single(start, 20),
        &predictor,
        CbdiaConfig::new(1.0, 0.0).unwrap(),
        schedule,
        &grid,
    )
    .unwrap();
    let (l2y, l2z) = lemma2_residuals(&lemma2_trace).unwrap();
    let closed = l1y.max(l1z).max(l2y).max(l2z);
    if closed > 1e-10 {
        return CheckOutcome::fail(NAME, format!("closed-form residual {closed:.3e}"));
    }
    CheckOutcome::pass(NAME, format!("sequence {disc:.3e}, closed forms {closed:.3e}"))
}

fn nfe_check(model: &GaussianMixture, config: &RunConfig) -> CheckOutcome {
    const NAME: &str = "nfe-accounting";
    let setup = crate::analysis::BenchSetup {
        model: model.clone(),
        schedule: NoiseSchedule::Edm,
        grid_kind: GridKind::Uniform,
        t_min: 0.05,
        t_max: 1.0,
        rho: 1.0,
        seed: config.seed,
        batch: 2,
        error_batch: 1,
    };
    let n = 6;
    for &solver in Solver::all() {
        let (_, nfe) =
            match crate::analysis::sample_terminals(&setup, solver, n, config.solver_params()) {
                Ok(v) => v,
                Err(e) => return CheckOutcome::fail(NAME, format!("{}: {e}", solver.name())),
            };
        let expected = solver.expected_nfe(n, false);
        if nfe != expected {
            return CheckOutcome::fail(
                NAME,
                format!("{}: counted {nfe}, expected {expected}", solver.name()),
            );
        }
    }
    CheckOutcome::pass(NAME, "all solvers match their analytical call counts")
}

fn edm_terminal_rule_check(model: &GaussianMixture) -> CheckOutcome {
    const NAME: &str = "edm-terminal-euler";
    let grid = make_time_grid(GridKind::Uniform, 8, 0.0, 1.0, 1.0).unwrap();
    let predictor = AnalyticPredictor::new(model.clone(), NoiseSchedule::Edm);
    let trace = edm_sample(State::new(vec![1.5; model.dim()], 8), &predictor, &grid).unwrap();
    let last = trace.entries().last().unwrap();
    if last.d_prime.is_some() {
        return CheckOutcome::fail(NAME, "gradient evaluated at sigma = 0");
    }
    let gap = max_abs_diff(&trace.terminal().z, &last.z_tilde);
    if gap != 0.0 {
        return CheckOutcome::fail(NAME, format!("terminal state differs from Euler by {gap:.3e}"));
    }
    CheckOutcome::pass(NAME, "terminal state equals the Euler predictor exactly")
}

fn trace_delta_check(model: &GaussianMixture, config: &RunConfig) -> CheckOutcome {
    const NAME: &str = "trace-delta-consistency";
    let schedule = NoiseSchedule::Edm;
    let grid = unit_grid(15);
    let predictor = AnalyticPredictor::new(model.clone(), schedule);
    let gamma = if config.gamma > 0.0 { config.gamma } else { 1.0 };
    let cfg = BdiaConfig::new(gamma).unwrap();
    let trace = bdia_sample(
        State::new(vec![0.9; model.dim()], 15),
        &predictor,
        cfg,
        schedule,
        &grid,
    )
    .unwrap();
    let residual = trace.max_delta_residual(&predictor, schedule, &grid);

    // The naive inversion direction is also exercised here so the fault
    // hook cannot hide in an untested path.
    let naive =
        ddim_invert_step_naive(&State::new(vec![0.2; model.dim()], 0), &predictor, schedule, &grid, 1)
            .unwrap();
    let eps = predictor.epsilon_hat(&naive.z, grid.t(1));
    let fwd = forward_delta(schedule, grid.t(1), grid.t(0), &naive.z, &eps);
    let bwd = backward_delta(schedule, grid.t(1), grid.t(0), &naive.z, &eps);
    if fwd.iter().chain(&bwd).any(|v| !v.is_finite()) {
        return CheckOutcome::fail(NAME, "non-finite delta");
    }
    CheckOutcome::from_bound(NAME, residual, 1e-13)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_passes_all_checks() {
        let report = run_verification(&RunConfig::default(), false).unwrap();
        let failed: Vec<_> =
            report.checks.iter().filter(|c| c.status == Status::Fail).collect();
        assert!(failed.is_empty(), "failures: {failed:?}");
    }

    #[test]
    fn coefficient_fault_is_detected() {
        let report = run_verification(&RunConfig::default(), true).unwrap();
        assert!(!report.all_passed());
        assert!(report
            .failures()
            .iter()
            .any(|c| c.name == "ddim-coefficient-identity"));
    }

    #[test]
    fn gamma_zero_is_skipped_not_failed() {
        let mut config = RunConfig::default();
        config.gamma = 0.0;
        let report = run_verification(&config, false).unwrap();
        assert!(report.all_passed());
        assert!(report
            .checks
            .iter()
            .any(|c| c.name == "bdia-step-inversion" && c.status == Status::Skip));
    }

    #[test]
    fn report_prints_one_line_per_check() {
        let report = run_verification(&RunConfig::default(), false).unwrap();
        let mut buf = Vec::new();
        report.write(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), report.checks.len() + 1);
        assert!(text.contains("PASS ddim-coefficient-identity"));
    }
}
