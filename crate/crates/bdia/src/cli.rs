//! Command implementations behind the `bdia` binary.
//!
//! Exit-code contract: 0 success, 1 invariant failure, 2 config error,
//! 3 numeric failure (NaN/Inf during solving). The binary stays a thin
//! argument parser; everything here is library code and tested as such.

use std::path::Path;

use crate::analysis::{
    compare_matrix, gamma_sweep, round_trip, run_report, write_reports_csv, ComparisonReport,
    Solver,
};
use crate::config::RunConfig;
use crate::ddim::{bdia_sample, ddim_sample, BdiaConfig};
use crate::dpm::{bdia_dpmpp_sample, dpmpp_2m_sample};
use crate::edict::{cbdia_sample, edict_sample, CbdiaConfig, CoupledState};
use crate::edm::{bdia_edm_sample, edm_sample};
use crate::error::Error;
use crate::models::{draw_initial_states, AnalyticPredictor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVARIANT: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// A command failure carrying the process exit code.
#[derive(Debug)]
pub struct CmdFailure {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CmdFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl From<Error> for CmdFailure {
    fn from(err: Error) -> Self {
        let code = match err {
            Error::NonFinite(_) => EXIT_NUMERIC,
            Error::Io(_) => EXIT_NUMERIC.max(EXIT_CONFIG), // io surfaces as config-level failure
            _ => EXIT_CONFIG,
        };
        CmdFailure { code, message: err.to_string() }
    }
}

pub type CmdResult = Result<(), CmdFailure>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl OutputFormat {
    pub fn parse(s: &str) -> Result<Self, CmdFailure> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(CmdFailure {
                code: EXIT_CONFIG,
                message: format!("unknown format {other:?}, expected csv or json"),
            }),
        }
    }
}

fn write_report_files(
    reports: &[ComparisonReport],
    out_dir: &Path,
    stem: &str,
    format: OutputFormat,
    include_timing: bool,
) -> Result<(), CmdFailure> {
    std::fs::create_dir_all(out_dir).map_err(Error::from)?;
    match format {
        OutputFormat::Csv => {
            let path = out_dir.join(format!("{stem}.csv"));
            let mut buf = Vec::new();
            write_reports_csv(reports, include_timing, &mut buf).map_err(Error::from)?;
            std::fs::write(&path, buf).map_err(Error::from)?;
            println!("wrote {}", path.display());
        }
        OutputFormat::Json => {
            let path = out_dir.join(format!("{stem}.json"));
            let values: Vec<_> = reports.iter().map(|r| r.json_value(include_timing)).collect();
            let text = serde_json::to_string_pretty(&values).map_err(Error::from)?;
            std::fs::write(&path, text).map_err(Error::from)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

/// `sample`: run one solver, dump the first trajectory's trace and the
/// batch report.
pub fn cmd_sample(
    config: &RunConfig,
    out_dir: &Path,
    format: OutputFormat,
    include_timing: bool,
) -> CmdResult {
    config.validate()?;
    let solver = config.solver()?;
    let setup = config.bench_setup()?;
    let grid = config.time_grid()?;
    let params = config.solver_params();
    let model = config.mixture_model()?;
    let schedule = config.schedule.kind;
    let predictor = AnalyticPredictor::new(model.clone(), schedule);
    let init = draw_initial_states(&model, schedule, grid.t(grid.n()), grid.n(), config.seed, 1)?
        .remove(0);

    std::fs::create_dir_all(out_dir).map_err(Error::from)?;
    let trace_path = out_dir.join("trace.csv");
    let mut buf = Vec::new();
    match solver {
        Solver::Ddim | Solver::DdimNaive => {
            ddim_sample(init, &predictor, schedule, &grid)?.write_csv(&grid, &mut buf)
        }
        Solver::BdiaDdim => {
            let cfg = BdiaConfig::new(params.gamma)?;
            bdia_sample(init, &predictor, cfg, schedule, &grid)?.write_csv(&grid, &mut buf)
        }
        Solver::Edict => {
            let s = CoupledState::from_single(init.z, init.index);
            edict_sample(s, &predictor, params.p, schedule, &grid)?.write_csv(&grid, &mut buf)
        }
        Solver::Cbdia => {
            let cfg = CbdiaConfig::new(params.gamma1, params.gamma2)?;
            let s = CoupledState::from_single(init.z, init.index);
            cbdia_sample(s, &predictor, cfg, schedule, &grid)?.write_csv(&grid, &mut buf)
        }
        Solver::Edm => edm_sample(init, &predictor, &grid)?.write_csv(&grid, &mut buf),
        Solver::BdiaEdm => {
            bdia_edm_sample(init, &predictor, params.gamma, &grid)?.write_csv(&grid, &mut buf)
        }
        Solver::Dpmpp2m => {
            dpmpp_2m_sample(init, &predictor, schedule, &grid)?.write_csv(&grid, &mut buf)
        }
        Solver::BdiaDpmpp2m => bdia_dpmpp_sample(init, &predictor, params.gamma, schedule, &grid)?
            .write_csv(&grid, &mut buf),
    }
    .map_err(Error::from)?;
    std::fs::write(&trace_path, buf).map_err(Error::from)?;
    println!("wrote {}", trace_path.display());

    let report = run_report(&setup, solver, grid.n(), params)?;
    println!(
        "{} n={} nfe={} terminal_error={:.3e} energy_distance={:.3e}",
        report.solver,
        report.n_steps,
        report.nfe,
        report.terminal_error.unwrap_or(f64::NAN),
        report.energy_distance.unwrap_or(f64::NAN),
    );
    write_report_files(&[report], out_dir, "report", format, include_timing)
}

/// `roundtrip`: invert data-space samples to noise, optionally swap in a
/// mean-shifted mixture, regenerate, and report reconstruction error. For
/// exact solvers without an edit the error is asserted against 1e-8.
pub fn cmd_roundtrip(
    config: &RunConfig,
    edit_shift: Option<&[f64]>,
    out_dir: &Path,
    format: OutputFormat,
    include_timing: bool,
) -> CmdResult {
    config.validate()?;
    let solver = config.solver()?;
    if !solver.supports_roundtrip() {
        return Err(CmdFailure {
            code: EXIT_CONFIG,
            message: format!(
                "{} has no inversion path; use one of ddim-naive, bdia-ddim, edict, cbdia",
                solver.name()
            ),
        });
    }
    let model = config.mixture_model()?;
    let schedule = config.schedule.kind;
    let grid = config.time_grid()?;
    let params = config.solver_params();
    let started = std::time::Instant::now();
    let outcome = round_trip(
        solver,
        &model,
        schedule,
        &grid,
        params,
        config.seed,
        config.batch,
        edit_shift,
    )?;

    println!(
        "{} n={} batch={} roundtrip max_abs={:.3e} rms={:.3e} nfe={}",
        solver.name(),
        grid.n(),
        config.batch,
        outcome.max_abs,
        outcome.rms,
        outcome.nfe
    );
    if let Some(shift) = edit_shift {
        let dim = model.dim();
        let mean = |set: &[Vec<f64>], k: usize| {
            set.iter().map(|v| v[k]).sum::<f64>() / set.len() as f64
        };
        for k in 0..dim {
            if shift[k] != 0.0 {
                let moved = mean(&outcome.regenerated, k) - mean(&outcome.originals, k);
                println!("edit axis {k}: requested shift {}, observed mean shift {moved:.4}", shift[k]);
            }
        }
    }

    let report = ComparisonReport {
        solver: solver.name().to_string(),
        n_steps: grid.n(),
        param: params.primary(solver),
        terminal_error: None,
        roundtrip_error: Some(outcome.max_abs),
        energy_distance: None,
        sliced_w1: None,
        nfe: outcome.nfe,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    write_report_files(&[report], out_dir, "roundtrip", format, include_timing)?;

    let exact = matches!(solver, Solver::BdiaDdim | Solver::Edict | Solver::Cbdia);
    if exact && edit_shift.is_none() && outcome.max_abs > 1e-8 {
        return Err(CmdFailure {
            code: EXIT_INVARIANT,
            message: format!(
                "exact solver {} reconstructed with max_abs {:.3e} > 1e-8",
                solver.name(),
                outcome.max_abs
            ),
        });
    }
    Ok(())
}

/// `verify`: run the invariant suite, print one line per check.
pub fn cmd_verify(config: &RunConfig, inject_coeff_fault: bool) -> CmdResult {
    let report = crate::verify::run_verification(config, inject_coeff_fault)?;
    let mut out = Vec::new();
    report.write(&mut out).map_err(Error::from)?;
    print!("{}", String::from_utf8_lossy(&out));
    if report.all_passed() {
        Ok(())
    } else {
        let names: Vec<_> = report.failures().iter().map(|c| c.name).collect();
        Err(CmdFailure {
            code: EXIT_INVARIANT,
            message: format!("failed invariants: {}", names.join(", ")),
        })
    }
}

/// `compare`: cross-product report matrix over solvers and step counts.
#[allow(clippy::too_many_arguments)]
pub fn cmd_compare(
    config: &RunConfig,
    solver_names: &[String],
    ns: &[usize],
    workers: usize,
    out_dir: &Path,
    format: OutputFormat,
    include_timing: bool,
) -> CmdResult {
    config.validate()?;
    if solver_names.is_empty() {
        return Err(CmdFailure { code: EXIT_CONFIG, message: "empty solver list".into() });
    }
    if ns.is_empty() {
        return Err(CmdFailure { code: EXIT_CONFIG, message: "empty step-count list".into() });
    }
    let solvers: Vec<Solver> = solver_names
        .iter()
        .map(|s| Solver::parse(s))
        .collect::<Result<_, _>>()?;
    let setup = config.bench_setup()?;
    let reports = compare_matrix(&setup, &solvers, ns, config.solver_params(), workers)?;
    for r in &reports {
        println!("{}", r.csv_row(include_timing));
    }
    write_report_files(&reports, out_dir, "compare", format, include_timing)
}

/// `sweep`: one report per γ value for a BDIA-family solver.
pub fn cmd_sweep(
    config: &RunConfig,
    gammas: &[f64],
    out_dir: &Path,
    format: OutputFormat,
    include_timing: bool,
) -> CmdResult {
    config.validate()?;
    if gammas.is_empty() {
        return Err(CmdFailure { code: EXIT_CONFIG, message: "empty gamma list".into() });
    }
    let solver = config.solver()?;
    if !matches!(solver, Solver::BdiaDdim | Solver::BdiaEdm | Solver::BdiaDpmpp2m) {
        return Err(CmdFailure {
            code: EXIT_CONFIG,
            message: format!("{} does not take a gamma sweep", solver.name()),
        });
    }
    let setup = config.bench_setup()?;
    let reports = gamma_sweep(&setup, solver, gammas, config.grid.n, config.solver_params())?;
    for r in &reports {
        println!("{}", r.csv_row(include_timing));
    }
    write_report_files(&reports, out_dir, "sweep", format, include_timing)
}
