//! Command implementations. Each returns the process exit status.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use iee_core::grouping::CovarianceGrouping;
use iee_core::iee::{fit_iee, one_step_fit, FitResult, IeeError, IeeOptions};
use iee_core::mean_model::{MeanModel, DEFAULT_QUADRATURE_ORDER};
use iee_core::simulation::{Estimator, SimulationDesign};

use crate::error::{CliError, EXIT_NOT_CONVERGED};
use crate::io::{emit, read_csv, read_grouping, read_scenario, write_csv, Table};
use crate::parallel::monte_carlo_parallel;
use crate::report::{FitReport, ModelInfo, Report, SimulationReport};

#[derive(Debug, Parser)]
#[command(
    name = "iee",
    version,
    about = "Iterative estimating equations for longitudinal data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a mean model to a CSV of observations.
    Fit(FitArgs),
    /// Run a Monte Carlo study from a scenario file.
    Simulate(SimulateArgs),
    /// Render a JSON report as text.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelName {
    Linear,
    LogisticRi,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// CSV with columns subject,visit,y,x1,...,xp.
    #[arg(long)]
    pub data: PathBuf,
    /// Covariance grouping JSON.
    #[arg(long)]
    pub grouping: PathBuf,
    #[arg(long, value_enum, default_value = "linear")]
    pub model: ModelName,
    /// Random-intercept standard deviation (logistic-ri only).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Gauss-Hermite order (logistic-ri only).
    #[arg(long, default_value_t = DEFAULT_QUADRATURE_ORDER)]
    pub quadrature_order: usize,
    /// Convergence tolerance.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Maximum number of outer steps.
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    /// Stop after one covariance update.
    #[arg(long)]
    pub one_step: bool,
    /// Output path; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write a text table instead of JSON.
    #[arg(long)]
    pub table: bool,
    /// Include the iteration trace.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario JSON.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    /// Comma-separated subset of ols, irls, onestep.
    #[arg(long, value_delimiter = ',', default_value = "ols,irls,onestep")]
    pub estimators: Vec<EstimatorName>,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub table: bool,
    /// Also write replication 0 as CSV.
    #[arg(long)]
    pub dump_data: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorName {
    Ols,
    Irls,
    Onestep,
}

impl From<EstimatorName> for Estimator {
    fn from(e: EstimatorName) -> Self {
        match e {
            EstimatorName::Ols => Estimator::Ols,
            EstimatorName::Irls => Estimator::Irls,
            EstimatorName::Onestep => Estimator::OneStep,
        }
    }
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A JSON report written by `fit` or `simulate`.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub table: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Fit(args) => cmd_fit(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Report(args) => cmd_report(&args),
    }
}

fn options(tol: f64, max_iters: usize, one_step: bool) -> Result<IeeOptions, CliError> {
    let opts = IeeOptions {
        conv_tol: tol,
        max_outer_iters: max_iters,
        one_step_only: one_step,
        ..IeeOptions::default()
    };
    opts.validate()
        .map_err(|e| CliError::Input(e.to_string()))?;
    Ok(opts)
}

fn write_report(
    report: &Report,
    table: bool,
    out: Option<&std::path::Path>,
) -> Result<(), CliError> {
    emit(
        out,
        &if table {
            report.render()
        } else {
            report.to_json()
        },
    )
}

pub fn cmd_fit(args: &FitArgs) -> Result<u8, CliError> {
    let opts = options(args.tol, args.max_iters, args.one_step)?;
    let (model, info) = match args.model {
        ModelName::Linear => {
            if args.sigma.is_some() {
                return Err(CliError::Input(
                    "--sigma applies only to --model logistic-ri".into(),
                ));
            }
            (MeanModel::Linear, ModelInfo::Linear)
        }
        ModelName::LogisticRi => {
            let sigma = args
                .sigma
                .ok_or_else(|| CliError::Input("--model logistic-ri requires --sigma".into()))?;
            let lri =
                iee_core::mean_model::LogisticRandomIntercept::new(sigma, args.quadrature_order)
                    .map_err(|e| CliError::Input(format!("--sigma/--quadrature-order: {e}")))?;
            (
                MeanModel::LogisticRandomIntercept(lri),
                ModelInfo::LogisticRi {
                    sigma,
                    quadrature_order: args.quadrature_order,
                },
            )
        }
    };
    let Table {
        dataset,
        covariate_names,
    } = read_csv(&args.data)?;
    let spec = read_grouping(&args.grouping, &covariate_names)?;
    let grouping = CovarianceGrouping::build(&dataset, &spec)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.grouping.display())))?;

    let result = if args.one_step {
        one_step_fit(&dataset, &model, &grouping, &opts)
    } else {
        fit_iee(&dataset, &model, &grouping, &opts)
    };
    let (fit, code): (FitResult, u8) = match result {
        Ok(fit) => (fit, 0),
        Err(IeeError::NotConverged(partial)) => (*partial, EXIT_NOT_CONVERGED),
        Err(e @ IeeError::InvalidOptions(_)) => return Err(CliError::Input(e.to_string())),
        Err(e) => return Err(CliError::Numerical(e.to_string())),
    };
    let report = Report::Fit(FitReport::new(
        &fit,
        info,
        opts,
        &covariate_names,
        dataset.len(),
        dataset.observation_count(),
        args.trace,
    ));
    write_report(&report, args.table, args.out.as_deref())?;
    if code == EXIT_NOT_CONVERGED {
        eprintln!(
            "warning: no convergence within {} outer steps",
            opts.max_outer_iters
        );
    }
    Ok(code)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<u8, CliError> {
    let opts = options(args.tol, args.max_iters, false)?;
    if args.reps == 0 {
        return Err(CliError::Input("--reps must be at least 1".into()));
    }
    let mut estimators: Vec<Estimator> = Vec::new();
    for e in &args.estimators {
        let e = Estimator::from(*e);
        if !estimators.contains(&e) {
            estimators.push(e);
        }
    }
    let spec = read_scenario(&args.spec)?;
    if let Some(path) = &args.dump_data {
        let design = SimulationDesign::new(&spec).map_err(|e| CliError::io(&args.spec, e))?;
        let table = Table {
            dataset: design.replicate(0),
            covariate_names: (1..=design.skeleton().coefficient_count())
                .map(|c| format!("x{c}"))
                .collect(),
        };
        let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        write_csv(&table, std::io::BufWriter::new(file)).map_err(|e| CliError::io(path, e))?;
    }
    let summary = monte_carlo_parallel(&spec, args.reps, &estimators, &opts)
        .map_err(|e| CliError::io(&args.spec, e))?;
    let report = Report::Simulation(SimulationReport::new(summary, opts));
    write_report(&report, args.table, args.out.as_deref())?;
    Ok(0)
}

pub fn cmd_report(args: &ReportArgs) -> Result<u8, CliError> {
    let text = fs::read_to_string(&args.input).map_err(|e| CliError::io(&args.input, e))?;
    let report = Report::from_json(&text, &args.input.display().to_string())?;
    write_report(&report, args.table, args.out.as_deref())?;
    Ok(0)
}
