//! Subcommand bodies. Each validates its flags and inputs before computing.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use detgp::inference::{fit as fit_surrogate, FitConfig, PosteriorSurrogate};
use detgp::mixture::MixtureMarginal;
use detgp::ml::{ml_fit, MeanModel};
use detgp::model::{gp_sample, Dataset, FullParams, KernelSpec, Location};
use detgp::simulation::{
    gp_coverage_suite, gp_prediction_coverage, normal_coverage, unit_square_grid, write_coverage_csv,
    CoverageRun, GpCoverageConfig, NormalCase, PredictionCoverageConfig,
};
use detgp::sparsegrid::GridDump;
use log::info;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::CliError;
use crate::ingest::{into_dataset, read_table, Table};
use crate::{CoverageArgs, FitArgs, MarginalArgs, MlArgs, PredictArgs, SampleArgs, Suite, SurrogateArgs};

/// Length scales and noise ratios of the parameter-coverage sweep.
const GP_ELLS: [f64; 3] = [0.2, 0.5, 1.0];
const GP_ETAS: [f64; 4] = [0.01, 0.05, 0.1, 0.2];
/// Same for the prediction sweep.
const PRED_ELLS: [f64; 3] = [0.1, 0.2, 0.5];
const PRED_ETAS: [f64; 4] = [0.001, 0.01, 0.1, 0.2];

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn check_unit(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(config_err(format!("--{name} must lie in (0, 1), got {v}")))
    }
}

fn check_positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_err(format!("--{name} must be positive, got {v}")))
    }
}

fn kernel(gamma: f64) -> Result<KernelSpec, CliError> {
    KernelSpec::power_exponential(gamma).map_err(|e| config_err(format!("--gamma: {e}")))
}

/// Fails early when an output file could not be created later.
fn check_out(path: Option<&Path>) -> Result<(), CliError> {
    let Some(path) = path else { return Ok(()) };
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if parent.is_dir() {
        Ok(())
    } else {
        Err(config_err(format!("{}: directory does not exist", path.display())))
    }
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|source| CliError::Write {
            path: p.to_path_buf(),
            source,
        }),
        None => io::stdout().lock().write_all(bytes).map_err(|source| CliError::Write {
            path: "<stdout>".into(),
            source,
        }),
    }
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| CliError::Encode(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let encode = |e: csv::Error| CliError::Encode(e.to_string());
    w.write_record(header).map_err(encode)?;
    for row in rows {
        w.write_record(row).map_err(encode)?;
    }
    w.into_inner().map_err(|e| CliError::Encode(e.to_string()))
}

struct Prepared {
    table: Table,
    kernel: KernelSpec,
    config: FitConfig,
}

impl SurrogateArgs {
    fn validate(&self) -> Result<(KernelSpec, FitConfig), CliError> {
        check_positive("tol", self.tol)?;
        check_unit("eps", self.eps)?;
        check_unit("alpha", self.alpha)?;
        if self.max_nodes == 0 {
            return Err(config_err("--max-nodes must be at least 1"));
        }
        let config = FitConfig {
            tol: self.tol,
            eps: self.eps,
            max_nodes: self.max_nodes,
            ..FitConfig::default()
        };
        Ok((kernel(self.gamma)?, config))
    }

    fn prepare(&self) -> Result<Prepared, CliError> {
        let (kernel, config) = self.validate()?;
        Ok(Prepared {
            table: read_table(&self.input)?,
            kernel,
            config,
        })
    }
}

impl Prepared {
    fn dataset(&self, path: &Path) -> Result<Dataset, CliError> {
        Ok(into_dataset(path, self.table.clone())?)
    }
}

fn build(dataset: &Dataset, kernel: &KernelSpec, config: &FitConfig) -> Result<PosteriorSurrogate, CliError> {
    let s = fit_surrogate(dataset, kernel, config)?;
    info!(
        "surrogate: {} nodes, {} evaluations",
        s.grid.node_count(),
        s.grid.evaluations()
    );
    if s.grid.budget_exceeded() {
        log::warn!("sparse grid stopped at the node budget before reaching the tolerance");
    }
    Ok(s)
}

/// Summary of one marginal posterior.
#[derive(Debug, Serialize)]
struct Percentiles {
    parameter: String,
    p25: f64,
    median: f64,
    p75: f64,
    mean: Option<f64>,
    lower: f64,
    upper: f64,
}

fn percentiles(
    parameter: String,
    m: &MixtureMarginal,
    mean: Option<f64>,
    alpha: f64,
) -> Result<Percentiles, CliError> {
    let q = |p: f64| m.quantile(p).map_err(|e| CliError::Inference(e.into()));
    let (lower, upper) = m.credible_interval(alpha).map_err(|e| CliError::Inference(e.into()))?;
    Ok(Percentiles {
        parameter,
        p25: q(0.25)?,
        median: q(0.5)?,
        p75: q(0.75)?,
        mean: mean.or(m.mean()).filter(|v| v.is_finite()),
        lower,
        upper,
    })
}

#[derive(Debug, Serialize)]
struct MapPoint {
    ell: f64,
    eta: f64,
    log_ell: f64,
    log_eta: f64,
    /// Negative log posterior, up to a constant.
    objective: f64,
    hessian_eigenvalues: [f64; 2],
}

#[derive(Debug, Serialize)]
struct FitSummary {
    n: usize,
    p: usize,
    dim: usize,
    gamma: f64,
    tol: f64,
    eps: f64,
    alpha: f64,
    map: MapPoint,
    nodes: usize,
    evaluations: usize,
    budget_exceeded: bool,
    marginals: Vec<Percentiles>,
}

#[derive(Debug, Serialize)]
struct QuadratureNode {
    ell: f64,
    eta: f64,
    weight: f64,
}

#[derive(Debug, Serialize)]
struct GridFile {
    grid: GridDump,
    quadrature: Vec<QuadratureNode>,
}

fn marginals(s: &PosteriorSurrogate, p: usize, alpha: f64) -> Result<Vec<Percentiles>, CliError> {
    let mut out = vec![
        percentiles("ell".into(), &s.length_marginal()?, Some(s.posterior_expect(|ell, _| ell)), alpha)?,
        percentiles("eta".into(), &s.noise_marginal()?, Some(s.posterior_expect(|_, eta| eta)), alpha)?,
        percentiles("sigma2".into(), &s.sigma2_marginal()?, None, alpha)?,
    ];
    for j in 0..p {
        out.push(percentiles(format!("beta{}", j + 1), &s.beta_marginal(j)?, None, alpha)?);
    }
    Ok(out)
}

pub fn fit(args: &FitArgs) -> Result<(), CliError> {
    let a = &args.surrogate;
    let prepared = a.prepare()?;
    check_out(args.out.as_deref())?;
    check_out(args.grid_out.as_deref())?;
    let ds = prepared.dataset(&a.input)?;
    let s = build(&ds, &prepared.kernel, &prepared.config)?;
    let summary = FitSummary {
        n: ds.n(),
        p: ds.p(),
        dim: ds.locations()[0].dim(),
        gamma: prepared.kernel.gamma(),
        tol: a.tol,
        eps: a.eps,
        alpha: a.alpha,
        map: MapPoint {
            ell: s.u_map.ell(),
            eta: s.u_map.eta(),
            log_ell: s.u_map.u1,
            log_eta: s.u_map.u2,
            objective: s.f_map,
            hessian_eigenvalues: s.eigenvalues,
        },
        nodes: s.grid.node_count(),
        evaluations: s.grid.evaluations(),
        budget_exceeded: s.grid.budget_exceeded(),
        marginals: marginals(&s, ds.p(), a.alpha)?,
    };
    if let Some(path) = &args.grid_out {
        let file = GridFile {
            grid: s.grid.dump(),
            quadrature: s
                .rule
                .nodes()
                .into_iter()
                .zip(&s.rule.weights)
                .map(|((ell, eta), &weight)| QuadratureNode { ell, eta, weight })
                .collect(),
        };
        emit(Some(path), &json_bytes(&file)?)?;
    }
    emit(args.out.as_deref(), &json_bytes(&summary)?)
}

/// New locations and their design rows, checked against the training layout.
fn new_points(train: &Table, path: &Path) -> Result<(Vec<Location>, DMatrix<f64>), CliError> {
    let table = read_table(path)?;
    let where_ = path.display();
    if table.layout.dim() != train.layout.dim() {
        return Err(config_err(format!(
            "{where_}: {} coordinate columns, training data has {}",
            table.layout.dim(),
            train.layout.dim()
        )));
    }
    if table.layout.regressors.len() != train.layout.regressors.len() {
        return Err(config_err(format!(
            "{where_}: {} regressor columns, training data has {}",
            table.layout.regressors.len(),
            train.layout.regressors.len()
        )));
    }
    let x = table.design();
    Ok((table.locations, x))
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let a = &args.surrogate;
    let prepared = a.prepare()?;
    check_out(args.out.as_deref())?;
    let ds = prepared.dataset(&a.input)?;
    let (locations, new_x) = new_points(&prepared.table, &args.locations)?;
    let dim = prepared.table.layout.dim();
    let mut header: Vec<String> = (1..=dim).map(|k| format!("x{k}")).collect();
    header.extend(["mean", "sd", "lower", "upper"].map(String::from));
    let mut rows = Vec::with_capacity(locations.len());
    if !locations.is_empty() {
        let s = build(&ds, &prepared.kernel, &prepared.config)?;
        let pred = s.predict(&ds, &locations, &new_x)?;
        for (j, loc) in locations.iter().enumerate() {
            let (lower, upper) = pred
                .marginal(j)?
                .credible_interval(a.alpha)
                .map_err(|e| CliError::Inference(e.into()))?;
            let mut row: Vec<String> = loc.coords.iter().map(|&c| fmt(c)).collect();
            row.extend([pred.mean(j), pred.sd(j), lower, upper].map(fmt));
            rows.push(row);
        }
    }
    emit(args.out.as_deref(), &csv_bytes(&header, &rows)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Parameter {
    Ell,
    Eta,
    Sigma2,
    /// 0-based coefficient index.
    Beta(usize),
}

impl Parameter {
    fn parse(name: &str) -> Result<Self, CliError> {
        match name {
            "ell" => Ok(Parameter::Ell),
            "eta" => Ok(Parameter::Eta),
            "sigma2" => Ok(Parameter::Sigma2),
            _ => name
                .strip_prefix("beta")
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k >= 1)
                .map(|k| Parameter::Beta(k - 1))
                .ok_or_else(|| {
                    config_err(format!("--parameter must be ell, eta, sigma2 or betaK, got {name:?}"))
                }),
        }
    }
}

/// Grid spanning the central 99.8% of `m`; geometric for positive parameters.
fn value_grid(m: &MixtureMarginal, points: usize, positive: bool) -> Result<Vec<f64>, CliError> {
    let q = |p: f64| m.quantile(p).map_err(|e| CliError::Inference(e.into()));
    let (lo, hi) = (q(0.001)?, q(0.999)?);
    if points == 1 {
        return Ok(vec![m.median()]);
    }
    let t = |i: usize| i as f64 / (points - 1) as f64;
    Ok(if positive {
        let (a, b) = (lo.ln(), hi.ln());
        (0..points).map(|i| (a + (b - a) * t(i)).exp()).collect()
    } else {
        (0..points).map(|i| lo + (hi - lo) * t(i)).collect()
    })
}

pub fn marginal(args: &MarginalArgs) -> Result<(), CliError> {
    let a = &args.surrogate;
    let parameter = Parameter::parse(&args.parameter)?;
    if args.points == 0 {
        return Err(config_err("--points must be at least 1"));
    }
    let prepared = a.prepare()?;
    check_out(args.out.as_deref())?;
    let ds = prepared.dataset(&a.input)?;
    if let Parameter::Beta(j) = parameter {
        if j >= ds.p() {
            return Err(config_err(format!("beta{} requested but the model has {} coefficients", j + 1, ds.p())));
        }
    }
    let s = build(&ds, &prepared.kernel, &prepared.config)?;
    let m = match parameter {
        Parameter::Ell => s.length_marginal()?,
        Parameter::Eta => s.noise_marginal()?,
        Parameter::Sigma2 => s.sigma2_marginal()?,
        Parameter::Beta(j) => s.beta_marginal(j)?,
    };
    let grid = value_grid(&m, args.points, !matches!(parameter, Parameter::Beta(_)))?;
    let header = ["value", "density", "cdf"].map(String::from);
    let rows: Vec<Vec<String>> = grid.iter().map(|&v| vec![fmt(v), fmt(m.pdf(v)), fmt(m.cdf(v))]).collect();
    emit(args.out.as_deref(), &csv_bytes(&header, &rows)?)
}

#[derive(Debug, Serialize)]
struct MlSummary {
    mean_model: &'static str,
    beta: Vec<f64>,
    sigma2: f64,
    ell: f64,
    eta: f64,
    log_likelihood: f64,
    gradient_norm: f64,
    converged: bool,
}

pub fn ml(args: &MlArgs) -> Result<(), CliError> {
    let kernel = kernel(args.gamma)?;
    check_out(args.out.as_deref())?;
    let ds = crate::ingest::ingest_csv(&args.input)?;
    let mean = if args.zero_mean { MeanModel::Zero } else { MeanModel::Regression };
    let f = ml_fit(&ds, &kernel, mean)?;
    let summary = MlSummary {
        mean_model: if args.zero_mean { "zero" } else { "regression" },
        beta: f.params.beta.iter().copied().collect(),
        sigma2: f.params.sigma2,
        ell: f.params.ell,
        eta: f.params.eta,
        log_likelihood: f.profile_value,
        gradient_norm: f.gradient_norm,
        converged: f.converged,
    };
    emit(args.out.as_deref(), &json_bytes(&summary)?)
}

fn cells(args: &CoverageArgs, ells: &[f64], etas: &[f64]) -> Result<Vec<(f64, f64)>, CliError> {
    if args.full {
        if args.ell.is_some() || args.eta.is_some() {
            return Err(config_err("--full sweeps its own cells; drop --ell and --eta"));
        }
        return Ok(etas.iter().flat_map(|&eta| ells.iter().map(move |&ell| (ell, eta))).collect());
    }
    match (args.ell, args.eta) {
        (Some(ell), Some(eta)) => {
            check_positive("ell", ell)?;
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(config_err(format!("--eta must be nonnegative, got {eta}")));
            }
            Ok(vec![(ell, eta)])
        }
        _ => Err(config_err("give --ell and --eta, or --full")),
    }
}

pub fn coverage(args: &CoverageArgs) -> Result<(), CliError> {
    check_unit("alpha", args.alpha)?;
    check_positive("tol", args.tol)?;
    check_unit("eps", args.eps)?;
    check_out(args.out.as_deref())?;
    let default_sims = match args.suite {
        Suite::Normal => 10_000,
        Suite::Gp => 200,
        Suite::Prediction => 100,
    };
    let mut run = CoverageRun::new(args.alpha, args.n_sims.unwrap_or(default_sims), args.seed);
    run.threads = args.threads;
    run.validate()?;
    let fit_config = FitConfig {
        tol: args.tol,
        eps: args.eps,
        ..FitConfig::default()
    };
    let bytes = match args.suite {
        Suite::Normal => {
            if args.sample_size.is_some_and(|n| n < 3) {
                return Err(config_err("--sample-size must be at least 3"));
            }
            let header = ["case", "n", "true_value", "alpha", "replicates", "covered", "failures", "coverage", "seed"]
                .map(String::from);
            let mut rows = Vec::new();
            for case in NormalCase::ALL {
                let default_n = if case == NormalCase::MeanKnownVariance { 10 } else { 5 };
                let n = args.sample_size.unwrap_or(default_n);
                let r = normal_coverage(case, n, 1.0, &run)?;
                info!("{}: {:.4}", case.name(), r.coverage);
                rows.push(vec![
                    r.parameter,
                    n.to_string(),
                    fmt(r.true_value),
                    fmt(r.alpha),
                    r.replicates.to_string(),
                    r.covered.to_string(),
                    r.failures.to_string(),
                    fmt(r.coverage),
                    r.seed.to_string(),
                ]);
            }
            csv_bytes(&header, &rows)?
        }
        Suite::Gp => {
            let kernel = kernel(args.gamma.unwrap_or(1.0))?;
            let cells = cells(args, &GP_ELLS, &GP_ETAS)?;
            let mut tables = Vec::with_capacity(cells.len());
            for (ell, eta) in cells {
                let mut cfg = if args.quadratic {
                    GpCoverageConfig::quadratic_mean(ell, eta, run.clone())
                } else {
                    GpCoverageConfig::constant_mean(ell, eta, run.clone())
                };
                cfg.kernel = kernel;
                cfg.fit = fit_config.clone();
                info!("gp cell ell={ell} eta={eta}");
                tables.push(gp_coverage_suite(&cfg)?);
            }
            let mut out = Vec::new();
            write_coverage_csv(&tables, &mut out)?;
            out
        }
        Suite::Prediction => {
            let kernel = kernel(args.gamma.unwrap_or(2.0))?;
            let cells = cells(args, &PRED_ELLS, &PRED_ETAS)?;
            let header = [
                "ell",
                "eta",
                "replicates",
                "bayes_coverage",
                "ml_coverage",
                "bayes_failures",
                "ml_failures",
            ]
            .map(String::from);
            let mut rows = Vec::new();
            for (ell, eta) in cells {
                let mut cfg = PredictionCoverageConfig::new(ell, eta, run.clone());
                cfg.kernel = kernel;
                cfg.fit = fit_config.clone();
                info!("prediction cell ell={ell} eta={eta}");
                let r = gp_prediction_coverage(&cfg)?;
                rows.push(vec![
                    fmt(ell),
                    fmt(eta),
                    r.bayes.replicates.to_string(),
                    fmt(r.bayes.coverage),
                    fmt(r.ml.coverage),
                    r.bayes.failures.to_string(),
                    r.ml.failures.to_string(),
                ]);
            }
            csv_bytes(&header, &rows)?
        }
    };
    emit(args.out.as_deref(), &bytes)
}

pub fn sample(args: &SampleArgs) -> Result<(), CliError> {
    let kernel = kernel(args.gamma)?;
    check_out(args.out.as_deref())?;
    let locations: Vec<Location> = match args.grid_side {
        Some(side) if side < 2 => return Err(config_err("--grid-side must be at least 2")),
        Some(side) => unit_square_grid(side),
        None if args.n < 2 => return Err(config_err("--n must be at least 2")),
        None => (0..args.n).map(|j| Location::from(j as f64 / (args.n - 1) as f64)).collect(),
    };
    let params = FullParams::new(DVector::from_element(1, args.beta), args.sigma2, args.ell, args.eta)
        .map_err(|e| config_err(e.to_string()))?;
    let x = DMatrix::from_element(locations.len(), 1, 1.0);
    let y = gp_sample(&locations, &x, &params, &kernel, args.seed)
        .map_err(|e| CliError::Inference(e.into()))?;
    let dim = locations[0].dim();
    let mut header: Vec<String> = (1..=dim).map(|k| format!("x{k}")).collect();
    header.push("y".into());
    let rows: Vec<Vec<String>> = locations
        .iter()
        .zip(y.iter())
        .map(|(loc, &v)| loc.coords.iter().map(|&c| fmt(c)).chain([fmt(v)]).collect())
        .collect();
    emit(args.out.as_deref(), &csv_bytes(&header, &rows)?)
}
