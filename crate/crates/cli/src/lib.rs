//! Library half of the `detgp` binary: argument definitions, CSV ingestion
//! and the subcommands.

pub mod commands;
pub mod error;
pub mod ingest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use error::CliError;
pub use ingest::ingest_csv;

#[derive(Debug, Parser)]
#[command(name = "detgp", version, about = "Objective-Bayesian Gaussian-process fits on a sparse grid")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the posterior surrogate and summarize it as JSON.
    Fit(FitArgs),
    /// Predictive mean, sd and credible bounds at new locations (CSV).
    Predict(PredictArgs),
    /// Density and CDF of one parameter on a grid (CSV).
    Marginal(MarginalArgs),
    /// Maximum-likelihood parameters (JSON).
    Ml(MlArgs),
    /// Frequentist coverage of credible sets (CSV).
    Coverage(CoverageArgs),
    /// Draw a synthetic dataset (CSV).
    Sample(SampleArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SurrogateArgs {
    /// Observations: columns x1..xd, optional r1..rp, and y.
    #[arg(long)]
    pub input: PathBuf,
    /// Kernel exponent; 1 is exponential, 2 squared exponential.
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    /// Sparse-grid tolerance.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Tail level used to bracket the integration region.
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Cap on sparse-grid nodes.
    #[arg(long, default_value_t = 20_000)]
    pub max_nodes: usize,
    /// Total tail mass of equal-tailed credible intervals.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub surrogate: SurrogateArgs,
    /// Also write the sparse grid and quadrature rule as JSON.
    #[arg(long)]
    pub grid_out: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub surrogate: SurrogateArgs,
    /// New locations: columns x1..xd and, if the input had them, r1..rp.
    #[arg(long)]
    pub locations: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct MarginalArgs {
    #[command(flatten)]
    pub surrogate: SurrogateArgs,
    /// One of ell, eta, sigma2, beta1, beta2, ...
    #[arg(long)]
    pub parameter: String,
    /// Number of grid values.
    #[arg(long, default_value_t = 201)]
    pub points: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct MlArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    /// Fix the mean at zero instead of estimating the regression.
    #[arg(long)]
    pub zero_mean: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    /// Closed-form normal-model posteriors.
    Normal,
    /// Parameter coverage on a 10x10 grid.
    Gp,
    /// Prediction coverage on [0, 1], Bayesian against plug-in ML.
    Prediction,
}

#[derive(Debug, Clone, Args)]
pub struct CoverageArgs {
    #[arg(long, value_enum)]
    pub suite: Suite,
    /// Replicates per cell; defaults to 10000, 200 and 100 for the three suites.
    #[arg(long)]
    pub n_sims: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Worker threads; 0 uses every available core.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// True length scale (gp and prediction suites).
    #[arg(long)]
    pub ell: Option<f64>,
    /// True noise ratio (gp and prediction suites).
    #[arg(long)]
    pub eta: Option<f64>,
    /// Sweep the standard (ell, eta) table instead of a single cell.
    #[arg(long)]
    pub full: bool,
    /// Six quadratic regressors instead of a constant (gp suite).
    #[arg(long)]
    pub quadratic: bool,
    /// Observations per replicate (normal suite); defaults to 10 for the
    /// mean and 5 for the variance cases.
    #[arg(long)]
    pub sample_size: Option<usize>,
    /// Kernel exponent; defaults to 1 for gp and 2 for prediction.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    /// Evenly spaced points on [0, 1].
    #[arg(long, default_value_t = 20, conflicts_with = "grid_side")]
    pub n: usize,
    /// Use a side x side grid on the unit square instead.
    #[arg(long)]
    pub grid_side: Option<usize>,
    #[arg(long)]
    pub ell: f64,
    #[arg(long)]
    pub eta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    /// Constant mean.
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Predict(a) => commands::predict(a),
        Command::Marginal(a) => commands::marginal(a),
        Command::Ml(a) => commands::ml(a),
        Command::Coverage(a) => commands::coverage(a),
        Command::Sample(a) => commands::sample(a),
    }
}
