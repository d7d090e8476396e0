//! Deterministic diffusion probability-flow ODE solvers with exact
//! inversion, verified against analytic Gaussian-mixture score models.
//!
//! The crate implements the DDIM step and its bi-directional extension
//! (BDIA), the coupled-state EDICT and CBDIA solvers, the EDM Heun sampler
//! with its BDIA refinement, and a multistep 2nd-order DPM-Solver++ with a
//! BDIA wrapper. Because the score of a Gaussian mixture is available in
//! closed form, every solver here can be checked against ground truth:
//! exact marginals, exact samples, a closed-form trajectory for the
//! single-Gaussian case, and high-resolution reference integrations.
//!
//! Start with the runnable examples (`cargo run --example exact_inversion`
//! and friends); the `bdia` binary exposes the same drivers as
//! subcommands (`sample`, `roundtrip`, `verify`, `compare`, `sweep`).

pub mod analysis;
pub mod cli;
pub mod config;
pub mod ddim;
pub mod dpm;
pub mod edict;
pub mod edm;
pub mod error;
pub mod grid;
pub mod models;
pub mod rng;
pub mod schedule;
pub mod state;
pub mod verify;

pub use analysis::{ComparisonReport, Solver, SolverParams};
pub use config::RunConfig;
pub use ddim::{BdiaConfig, SolverTrace};
pub use edict::{CbdiaConfig, CoupledState};
pub use error::{Error, Result};
pub use grid::{make_time_grid, GridKind, TimeGrid};
pub use models::{GaussianMixture, MixtureComponent, NoisePredictor};
pub use schedule::{ddim_coeffs, DdimCoeffs, NoiseSchedule};
pub use state::State;
