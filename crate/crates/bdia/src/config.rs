//! Run configuration: one JSON object wiring schedule, grid, mixture,
//! solver parameters and seeds. Unknown keys are rejected, and every
//! field is validated against the module preconditions before any compute
//! starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{BenchSetup, Solver, SolverParams};
use crate::error::{Error, Result};
use crate::grid::{make_time_grid, GridKind, TimeGrid};
use crate::models::{GaussianMixture, MixtureComponent};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: NoiseSchedule,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub kind: GridKind,
    pub n: usize,
    pub t_min: f64,
    pub t_max: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
}

fn default_rho() -> f64 {
    7.0
}

fn default_gamma() -> f64 {
    1.0
}

fn default_p() -> f64 {
    crate::edict::EDICT_RECOMMENDED_P
}

fn default_gamma2() -> f64 {
    1.0
}

fn default_seed() -> u64 {
    7
}

fn default_batch() -> usize {
    256
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleSpec,
    pub grid: GridSpec,
    pub mixture: Vec<MixtureComponent>,
    #[serde(default)]
    pub solver: Option<String>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default)]
    pub gamma1: f64,
    #[serde(default = "default_gamma2")]
    pub gamma2: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    /// Two-component benchmark mixture on the EDM schedule; a grid wide
    /// enough that the top marginal is close to pure noise.
    fn default() -> Self {
        Self {
            schedule: ScheduleSpec { kind: NoiseSchedule::Edm },
            grid: GridSpec {
                kind: GridKind::Uniform,
                n: 20,
                t_min: 0.05,
                t_max: 10.0,
                rho: 7.0,
            },
            mixture: GaussianMixture::symmetric_pair(2).components().to_vec(),
            solver: Some("bdia-ddim".to_string()),
            gamma: default_gamma(),
            p: default_p(),
            gamma1: 0.0,
            gamma2: default_gamma2(),
            seed: default_seed(),
            batch: default_batch(),
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Checks every module precondition this config touches.
    pub fn validate(&self) -> Result<()> {
        let grid = self.time_grid()?;
        self.schedule.kind.check_grid(&grid)?;
        self.mixture_model()?;
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0, 1], got {}", self.gamma)));
        }
        if !(0.0 < self.p && self.p <= 1.0) {
            return Err(Error::Config(format!("p must be in (0, 1], got {}", self.p)));
        }
        crate::edict::CbdiaConfig::new(self.gamma1, self.gamma2)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if let Some(name) = &self.solver {
            let solver = Solver::parse(name)?;
            if solver.requires_edm_schedule() && self.schedule.kind != NoiseSchedule::Edm {
                return Err(Error::Config(format!("{name} requires the edm schedule")));
            }
            if solver.needs_positive_terminal_sigma()
                && self.schedule.kind.sigma(self.grid.t_min) <= 0.0
            {
                return Err(Error::Config(format!(
                    "{name} evaluates the predictor at t_0 and needs sigma(t_0) > 0"
                )));
            }
        }
        Ok(())
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        make_time_grid(self.grid.kind, self.grid.n, self.grid.t_min, self.grid.t_max, self.grid.rho)
    }

    pub fn mixture_model(&self) -> Result<GaussianMixture> {
        GaussianMixture::new(self.mixture.clone())
    }

    pub fn solver(&self) -> Result<Solver> {
        match &self.solver {
            Some(name) => Solver::parse(name),
            None => Err(Error::Config("no solver selected".into())),
        }
    }

    pub fn solver_params(&self) -> SolverParams {
        SolverParams { gamma: self.gamma, p: self.p, gamma1: self.gamma1, gamma2: self.gamma2 }
    }

    pub fn bench_setup(&self) -> Result<BenchSetup> {
        Ok(BenchSetup {
            model: self.mixture_model()?,
            schedule: self.schedule.kind,
            grid_kind: self.grid.kind,
            t_min: self.grid.t_min,
            t_max: self.grid.t_max,
            rho: self.grid.rho,
            seed: self.seed,
            batch: self.batch,
            error_batch: self.batch.min(64),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn round_trips_through_json() {
        let config = RunConfig::default();
        let text = serde_json::to_string(&config).unwrap();
        let back = RunConfig::from_json_str(&text).unwrap();
        assert_eq!(back.grid.n, config.grid.n);
        assert_eq!(back.mixture.len(), 2);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"{
            "schedule": {"kind": "edm"},
            "grid": {"kind": "uniform", "n": 4, "t_min": 0.1, "t_max": 1.0},
            "mixture": [{"w": 1.0, "mu": [0.0], "s2": 1.0}],
            "surprise": true
        }"#;
        assert!(RunConfig::from_json_str(text).is_err());
    }

    #[test]
    fn spec_shaped_document_parses() {
        let text = r#"{
            "schedule": {"kind": "vp"},
            "grid": {"kind": "power_law", "n": 12, "t_min": 0.02, "t_max": 0.9, "rho": 3.0},
            "mixture": [
                {"w": 0.5, "mu": [2.0], "s2": 0.25},
                {"w": 0.5, "mu": [-2.0], "s2": 0.25}
            ],
            "solver": "edict",
            "p": 0.93,
            "seed": 3
        }"#;
        let config = RunConfig::from_json_str(text).unwrap();
        assert_eq!(config.schedule.kind, NoiseSchedule::Vp);
        assert_eq!(config.grid.rho, 3.0);
        assert_eq!(config.solver().unwrap(), Solver::Edict);
    }

    #[test]
    fn bad_parameters_rejected() {
        let mut config = RunConfig::default();
        config.gamma = 1.5;
        assert!(config.validate().is_err());

        let mut config = RunConfig::default();
        config.p = 0.0;
        assert!(config.validate().is_err());

        let mut config = RunConfig::default();
        config.gamma1 = 0.4;
        config.gamma2 = 0.4;
        assert!(config.validate().is_err());

        let mut config = RunConfig::default();
        config.grid.t_min = 0.9;
        config.grid.t_max = 0.5;
        assert!(config.validate().is_err());

        // VP domain excludes t >= 1.
        let mut config = RunConfig::default();
        config.schedule.kind = NoiseSchedule::Vp;
        config.grid.t_max = 1.2;
        assert!(config.validate().is_err());

        // EDM-only solvers rejected on VP.
        let mut config = RunConfig::default();
        config.schedule.kind = NoiseSchedule::Vp;
        config.grid.t_min = 0.05;
        config.grid.t_max = 0.9;
        config.solver = Some("bdia-edm".to_string());
        assert!(config.validate().is_err());

        // Solvers that touch t_0 need sigma(t_0) > 0.
        let mut config = RunConfig::default();
        config.grid.t_min = 0.0;
        config.solver = Some("cbdia".to_string());
        assert!(config.validate().is_err());
    }
}
