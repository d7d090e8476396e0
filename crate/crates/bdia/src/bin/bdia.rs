//! Thin command-line front end; all behavior lives in the library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bdia::cli::{self, OutputFormat};
use bdia::RunConfig;

#[derive(Parser)]
#[command(name = "bdia", version, about = "Diffusion ODE solvers with exact inversion")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Solver name (ddim, bdia-ddim, edict, cbdia, edm, bdia-edm,
    /// dpmpp-2m, bdia-dpmpp-2m, ddim-naive).
    #[arg(long, global = true)]
    solver: Option<String>,

    /// Step count, overriding the config grid.
    #[arg(long, global = true)]
    n: Option<usize>,

    /// BDIA blend weight.
    #[arg(long, global = true)]
    gamma: Option<f64>,

    /// EDICT mixing weight.
    #[arg(long, global = true)]
    p: Option<f64>,

    /// CBDIA mixing weights.
    #[arg(long, global = true)]
    gamma1: Option<f64>,
    #[arg(long, global = true)]
    gamma2: Option<f64>,

    /// Power-law grid exponent.
    #[arg(long, global = true)]
    rho: Option<f64>,

    /// Base seed for all random substreams.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Trajectory batch size.
    #[arg(long, global = true)]
    batch: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Output format for report files.
    #[arg(long, global = true, default_value = "csv")]
    format: String,

    /// Write measured wall times into report files (off by default so
    /// identical configs produce byte-identical outputs).
    #[arg(long, global = true)]
    timing: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a batch, dump the first trajectory's trace and a report.
    Sample,
    /// Data -> noise -> data round trip; exact solvers are asserted to 1e-8.
    Roundtrip {
        /// Mean shift applied to every mixture component during
        /// regeneration (comma-separated floats), the editing analog.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        edit_shift: Option<Vec<f64>>,
    },
    /// Run the full invariant suite; exit 1 if any check fails.
    Verify {
        /// Corrupt the DDIM b coefficient inside the suite (mutation hook).
        #[arg(long, hide = true)]
        inject_coeff_fault: bool,
    },
    /// Cross-product report matrix over solvers and step counts.
    Compare {
        #[arg(long, value_delimiter = ',', required = true)]
        solvers: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        ns: Vec<usize>,
        /// Worker threads; the output is identical for any count.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// One report per gamma value for a BDIA-family solver.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        gammas: Vec<f64>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, cli::CmdFailure> {
    let mut config = match &common.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(solver) = &common.solver {
        config.solver = Some(solver.clone());
    }
    if let Some(n) = common.n {
        config.grid.n = n;
    }
    if let Some(gamma) = common.gamma {
        config.gamma = gamma;
    }
    if let Some(p) = common.p {
        config.p = p;
    }
    if let Some(g1) = common.gamma1 {
        config.gamma1 = g1;
    }
    if let Some(g2) = common.gamma2 {
        config.gamma2 = g2;
    }
    if let Some(rho) = common.rho {
        config.grid.rho = rho;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(batch) = common.batch {
        config.batch = batch;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> cli::CmdResult {
    let format = OutputFormat::parse(&cli.common.format)?;
    let config = load_config(&cli.common)?;
    let out = config.out.clone().unwrap_or_else(|| cli.common.out.clone());
    let timing = cli.common.timing;
    match cli.command {
        Command::Sample => cli::cmd_sample(&config, &out, format, timing),
        Command::Roundtrip { edit_shift } => {
            cli::cmd_roundtrip(&config, edit_shift.as_deref(), &out, format, timing)
        }
        Command::Verify { inject_coeff_fault } => cli::cmd_verify(&config, inject_coeff_fault),
        Command::Compare { solvers, ns, workers } => {
            cli::cmd_compare(&config, &solvers, &ns, workers, &out, format, timing)
        }
        Command::Sweep { gammas } => cli::cmd_sweep(&config, &gammas, &out, format, timing),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code as u8)
        }
    }
}
