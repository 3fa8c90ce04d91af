//! Command-line front end. Exit codes: 0 success, 1 usage or input error,
//! 2 solver failure or an optimization that did not converge.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::eigen::EigenConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::model::{DesignVector, PanelModel};
use crate::optimizer::{
    comparison_table, run_baseline_fd, run_eigenopt, EigenOptConfig, OptimizationHistory,
    OptimizationProblem, Termination,
};
use crate::stability::{analyze, stability_report, DeltaPolicy};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_SOLVER: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "eigenopt",
    version,
    about = "Buckling-constrained panel mass minimisation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Buckling analysis of the initial design: eigenvalues and mode shapes.
    Analyze(Common),
    /// Section stability values β± of the initial design.
    Stability(Common),
    /// Mass minimisation with eigenOpt.
    OptimizeEigenopt(Common),
    /// Mass minimisation with the finite-difference baseline.
    OptimizeBaseline(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Model description (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Optimizer settings (JSON); defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Number of buckling modes to compute.
    #[arg(long)]
    modes: Option<usize>,
    #[arg(long)]
    theta: Option<f64>,
    /// Relative thickness step.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<EigenOptConfig> {
        let mut cfg = match &self.config {
            Some(path) => io::parse_config_file(path)?,
            None => EigenOptConfig::default(),
        };
        if let Some(m) = self.modes {
            cfg.modes = m;
        }
        if let Some(t) = self.theta {
            cfg.theta0 = t;
        }
        if let Some(e) = self.eta {
            cfg.eta = e;
        }
        if let Some(n) = self.max_iters {
            cfg.max_iters = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn load(&self) -> Result<(PanelModel, DesignVector, EigenOptConfig)> {
        let (model, design) = io::parse_model_file(&self.model)?;
        Ok((model, design, self.config()?))
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to standard error.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    if e.is_solver_error() {
        EXIT_SOLVER
    } else {
        EXIT_USAGE
    }
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Analyze(c) => {
            let (model, design, cfg) = c.load()?;
            let a = analyze(
                &model,
                design.as_slice(),
                cfg.modes,
                &EigenConfig::default(),
            )?;
            io::write_analysis_outputs(&c.out, &model, a.system.dof_map(), &a.modes)?;
            println!(
                "lambda_1 = {}  critical load = {} N/m",
                a.lambda1(),
                a.lambda1() * model.load().reference_magnitude
            );
            Ok(EXIT_OK)
        }
        Command::Stability(c) => {
            let (model, design, cfg) = c.load()?;
            let a = analyze(
                &model,
                design.as_slice(),
                cfg.modes,
                &EigenConfig::default(),
            )?;
            let report = stability_report(&model, &a, &DeltaPolicy::new(cfg.eta)?)?;
            io::write_stability_output(&c.out, &report)?;
            print!("{}", report.to_csv());
            Ok(EXIT_OK)
        }
        Command::OptimizeEigenopt(c) => optimize(&c, "eigenopt", run_eigenopt),
        Command::OptimizeBaseline(c) => optimize(&c, "baseline", run_baseline_fd),
    }
}

fn optimize(
    c: &Common,
    name: &str,
    run: fn(&OptimizationProblem, &EigenOptConfig) -> Result<OptimizationHistory>,
) -> Result<i32> {
    let (model, design, cfg) = c.load()?;
    let problem = OptimizationProblem::new(model, design, cfg.lambda_min)?;
    let history = run(&problem, &cfg)?;
    io::write_optimization_outputs(&c.out, &history)?;
    print!("{}", comparison_table(&[(name, &history)]));
    Ok(match &history.termination {
        Termination::Converged => EXIT_OK,
        Termination::MaxIters => {
            eprintln!(
                "warning: no convergence within {} iterations",
                cfg.max_iters
            );
            EXIT_SOLVER
        }
        Termination::Error(msg) => {
            eprintln!("error: {msg}");
            EXIT_SOLVER
        }
    })
}
