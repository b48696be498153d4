//! Frequentist coverage harnesses for credible sets, closed-form posterior
//! CDFs of the normal model used as analytic checks, and the Gaussian-process
//! parameter and prediction coverage suites.
//!
//! A replicate counts as covered when the posterior CDF at the true value
//! lands strictly inside `(α/2, 1 − α/2)`. Replicate `i` draws from its own
//! ChaCha8 stream (`seed`, stream `i`), so results do not depend on the
//! number of threads or the order replicates run in.

use std::io::Write;
use std::num::NonZeroUsize;

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use statrs::function::erf::erfc;
use statrs::function::gamma::gamma_ur;
use thiserror::Error;

use crate::inference::{fit, FitConfig, InferenceError};
use crate::ml::{ml_fit, ml_predict, MeanModel};
use crate::model::{gp_sample_with, Dataset, FullParams, KernelSpec, Location, ModelError};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("replicate count must be at least 1")]
    NoReplicates,
    #[error("alpha must lie in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error("every one of the {0} replicates failed")]
    AllFailed(usize),
    #[error("invalid simulation setup: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("writing coverage table: {0}")]
    Csv(#[from] csv::Error),
    #[error("writing coverage table: {0}")]
    Io(#[from] std::io::Error),
}

/// Replicate count, tail mass and seeding for one coverage experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRun {
    /// Total tail mass of the equal-tailed credible set (0.05 for 95% sets).
    pub alpha: f64,
    pub replicates: usize,
    pub seed: u64,
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
}

impl CoverageRun {
    pub fn new(alpha: f64, replicates: usize, seed: u64) -> Self {
        Self {
            alpha,
            replicates,
            seed,
            threads: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        if self.replicates == 0 {
            return Err(SimulationError::NoReplicates);
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(SimulationError::BadAlpha(self.alpha));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub parameter: String,
    pub true_value: f64,
    pub alpha: f64,
    /// Replicates in the denominator.
    pub replicates: usize,
    pub covered: usize,
    /// Replicates whose CDF could not be evaluated.
    pub failures: usize,
    pub coverage: f64,
    pub seed: u64,
}

/// Strict inequalities: a CDF value exactly on a boundary is not covered.
pub fn is_covered(t: f64, alpha: f64) -> bool {
    0.5 * alpha < t && t < 1.0 - 0.5 * alpha
}

/// Generator for replicate `index` of an experiment seeded with `seed`.
pub fn replicate_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Runs `job(i, rng_i)` for every replicate, in parallel, returning results
/// in replicate order.
pub fn run_replicates<T, F>(run: &CoverageRun, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut ChaCha8Rng) -> T + Sync,
{
    let threads = if run.threads == 0 {
        std::thread::available_parallelism().map_or(1, NonZeroUsize::get)
    } else {
        run.threads
    }
    .min(run.replicates)
    .max(1);
    if threads == 1 {
        return (0..run.replicates)
            .map(|i| job(i, &mut replicate_rng(run.seed, i)))
            .collect();
    }
    let mut slots: Vec<Option<T>> = (0..run.replicates).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let job = &job;
                scope.spawn(move || {
                    (w..run.replicates)
                        .step_by(threads)
                        .map(|i| (i, job(i, &mut replicate_rng(run.seed, i))))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, v) in h.join().expect("replicate worker panicked") {
                slots[i] = Some(v);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every replicate ran")).collect()
}

/// How replicates whose CDF fails enter the coverage fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailurePolicy {
    CountAsMiss,
    Exclude,
}

fn tally<E: std::fmt::Display>(
    parameter: &str,
    true_value: f64,
    run: &CoverageRun,
    outcomes: impl Iterator<Item = Result<f64, E>>,
    policy: FailurePolicy,
) -> Result<CoverageReport, SimulationError> {
    let (mut covered, mut failures) = (0, 0);
    for (i, t) in outcomes.enumerate() {
        match t {
            Ok(t) if is_covered(t, run.alpha) => covered += 1,
            Ok(_) => {}
            Err(e) => {
                log::warn!("{parameter}: replicate {i} failed: {e}");
                failures += 1;
            }
        }
    }
    let replicates = match policy {
        FailurePolicy::CountAsMiss => run.replicates,
        FailurePolicy::Exclude => run.replicates - failures,
    };
    if replicates == 0 {
        return Err(SimulationError::AllFailed(run.replicates));
    }
    Ok(CoverageReport {
        parameter: parameter.to_string(),
        true_value,
        alpha: run.alpha,
        replicates,
        covered,
        failures,
        coverage: covered as f64 / replicates as f64,
        seed: run.seed,
    })
}

/// Fraction of replicates whose posterior CDF at the true value lies in
/// `(α/2, 1 − α/2)`. Failed CDF evaluations count as not covered.
pub fn coverage_test<D, S, C, E>(
    parameter: &str,
    true_value: f64,
    sampler: S,
    cdf_at_true: C,
    run: &CoverageRun,
) -> Result<CoverageReport, SimulationError>
where
    S: Fn(&mut ChaCha8Rng) -> D + Sync,
    C: Fn(&D) -> Result<f64, E> + Sync,
    E: std::fmt::Display + Send,
{
    run.validate()?;
    let outcomes = run_replicates(run, |_, rng| cdf_at_true(&sampler(rng)));
    tally(parameter, true_value, run, outcomes.into_iter(), FailurePolicy::CountAsMiss)
}

/// Same counting rule with `t` the predictive CDF of a held-out observation
/// at its realized value, given the remaining observations.
pub fn prediction_coverage_test<D, S, C, E>(
    sampler: S,
    predictive_cdf_at_heldout: C,
    run: &CoverageRun,
) -> Result<CoverageReport, SimulationError>
where
    S: Fn(&mut ChaCha8Rng) -> D + Sync,
    C: Fn(&D) -> Result<f64, E> + Sync,
    E: std::fmt::Display + Send,
{
    coverage_test("prediction", f64::NAN, sampler, predictive_cdf_at_heldout, run)
}

/// Standard normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn mean(y: &[f64]) -> f64 {
    y.iter().sum::<f64>() / y.len() as f64
}

fn sum_sq(y: &[f64]) -> f64 {
    y.iter().map(|v| v * v).sum()
}

/// `Q(a, x)` as a CDF in `t` with the `t ≤ 0` limit.
fn upper_gamma_cdf(shape: f64, rate_numerator: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    gamma_ur(shape, rate_numerator / (2.0 * t))
}

/// Posterior CDF of the mean, known variance, flat prior: `μ | y ~ N(ȳ, σ²/n)`.
pub fn mean_cdf_known_variance(y: &[f64], sigma2: f64, t: f64) -> f64 {
    let n = y.len() as f64;
    std_normal_cdf((t - mean(y)) / (sigma2 / n).sqrt())
}

/// Posterior CDF of the variance, known zero mean, flat prior on `σ²`.
/// Needs `n > 2`.
pub fn variance_cdf_flat_prior(y: &[f64], t: f64) -> f64 {
    upper_gamma_cdf((y.len() as f64 - 2.0) / 2.0, sum_sq(y), t)
}

/// Posterior CDF of the variance, known zero mean, prior `1/σ²`.
pub fn variance_cdf_jeffreys(y: &[f64], t: f64) -> f64 {
    upper_gamma_cdf(y.len() as f64 / 2.0, sum_sq(y), t)
}

fn centered_ss(y: &[f64]) -> f64 {
    let m = mean(y);
    y.iter().map(|v| (v - m) * (v - m)).sum()
}

/// Posterior CDF of the variance with unknown mean, prior `(1/σ²)^{3/2}`.
pub fn variance_cdf_unknown_mean_jeffreys(y: &[f64], t: f64) -> f64 {
    upper_gamma_cdf(y.len() as f64 / 2.0, centered_ss(y), t)
}

/// Posterior CDF of the variance with unknown mean, prior `1/σ²`.
pub fn variance_cdf_unknown_mean_reference(y: &[f64], t: f64) -> f64 {
    upper_gamma_cdf((y.len() as f64 - 1.0) / 2.0, centered_ss(y), t)
}

/// The normal-model settings with closed-form posteriors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalCase {
    /// Mean, variance known, flat prior.
    MeanKnownVariance,
    /// Variance, mean known (zero), flat prior.
    VarianceFlat,
    /// Variance, mean known (zero), Jeffreys prior.
    VarianceJeffreys,
    /// Variance, mean unknown, joint Jeffreys prior.
    VarianceUnknownMeanJeffreys,
    /// Variance, mean unknown, reference prior.
    VarianceUnknownMeanReference,
}

impl NormalCase {
    pub const ALL: [NormalCase; 5] = [
        NormalCase::MeanKnownVariance,
        NormalCase::VarianceFlat,
        NormalCase::VarianceJeffreys,
        NormalCase::VarianceUnknownMeanJeffreys,
        NormalCase::VarianceUnknownMeanReference,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormalCase::MeanKnownVariance => "mean-known-variance",
            NormalCase::VarianceFlat => "variance-flat",
            NormalCase::VarianceJeffreys => "variance-jeffreys",
            NormalCase::VarianceUnknownMeanJeffreys => "variance-unknown-mean-jeffreys",
            NormalCase::VarianceUnknownMeanReference => "variance-unknown-mean-reference",
        }
    }
}

/// Coverage of `case` with `n` draws from `N(0, σ²)`.
pub fn normal_coverage(
    case: NormalCase,
    n: usize,
    sigma2: f64,
    run: &CoverageRun,
) -> Result<CoverageReport, SimulationError> {
    let min_n = if case == NormalCase::VarianceFlat { 3 } else { 2 };
    if n < min_n {
        return Err(SimulationError::Config(format!("{} needs n >= {min_n}", case.name())));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(SimulationError::Config(format!("sigma2 must be positive, got {sigma2}")));
    }
    let sd = sigma2.sqrt();
    let sampler = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                sd * z
            })
            .collect()
    };
    let true_value = if case == NormalCase::MeanKnownVariance { 0.0 } else { sigma2 };
    let cdf = |y: &Vec<f64>| -> Result<f64, std::convert::Infallible> {
        Ok(match case {
            NormalCase::MeanKnownVariance => mean_cdf_known_variance(y, sigma2, 0.0),
            NormalCase::VarianceFlat => variance_cdf_flat_prior(y, sigma2),
            NormalCase::VarianceJeffreys => variance_cdf_jeffreys(y, sigma2),
            NormalCase::VarianceUnknownMeanJeffreys => variance_cdf_unknown_mean_jeffreys(y, sigma2),
            NormalCase::VarianceUnknownMeanReference => {
                variance_cdf_unknown_mean_reference(y, sigma2)
            }
        })
    };
    coverage_test(case.name(), true_value, sampler, cdf, run)
}

/// Regression functions of a planar location `(u, v)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regressors {
    /// `1`
    Constant,
    /// `(1, u, v, u², uv, v²)`
    Quadratic,
}

impl Regressors {
    pub fn count(self) -> usize {
        match self {
            Regressors::Constant => 1,
            Regressors::Quadratic => 6,
        }
    }

    pub fn design(self, locations: &[Location]) -> DMatrix<f64> {
        let p = self.count();
        DMatrix::from_fn(locations.len(), p, |i, j| {
            let c = &locations[i].coords;
            let (u, v) = (c[0], c.get(1).copied().unwrap_or(0.0));
            [1.0, u, v, u * u, u * v, v * v][j]
        })
    }
}

/// `side × side` evenly spaced points on the unit square, corners included.
pub fn unit_square_grid(side: usize) -> Vec<Location> {
    let step = |i: usize| if side > 1 { i as f64 / (side - 1) as f64 } else { 0.5 };
    (0..side)
        .flat_map(|i| (0..side).map(move |j| (i, j)))
        .map(|(i, j)| Location::new(vec![step(i), step(j)]).expect("finite"))
        .collect()
}

/// Parameter-coverage experiment on a planar grid.
#[derive(Debug, Clone)]
pub struct GpCoverageConfig {
    pub grid_side: usize,
    pub kernel: KernelSpec,
    pub ell: f64,
    pub eta: f64,
    pub sigma2: f64,
    pub regressors: Regressors,
    pub beta: Vec<f64>,
    pub fit: FitConfig,
    pub run: CoverageRun,
}

impl GpCoverageConfig {
    /// 10×10 grid, exponential kernel, `σ² = 1`, constant regressor with `β₁ = 1`.
    pub fn constant_mean(ell: f64, eta: f64, run: CoverageRun) -> Self {
        Self {
            grid_side: 10,
            kernel: KernelSpec::exponential(),
            ell,
            eta,
            sigma2: 1.0,
            regressors: Regressors::Constant,
            beta: vec![1.0],
            fit: FitConfig::default(),
            run,
        }
    }

    /// As [`constant_mean`](Self::constant_mean) with the six quadratic regressors.
    pub fn quadratic_mean(ell: f64, eta: f64, run: CoverageRun) -> Self {
        Self {
            regressors: Regressors::Quadratic,
            beta: vec![0.15, -0.65, -0.1, 0.9, -1.0, 1.2],
            ..Self::constant_mean(ell, eta, run)
        }
    }
}

/// Coverage of `ℓ`, `η`, `σ²` and every `β_j` for one `(ℓ, η)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GpCoverageTable {
    pub ell: f64,
    pub eta: f64,
    pub reports: Vec<CoverageReport>,
    /// Replicates whose fit failed; excluded from every denominator.
    pub fit_failures: usize,
}

/// CDF values at the truth for `ℓ, η, σ², β₁, …` on one replicate.
fn parameter_cdfs(cfg: &GpCoverageConfig, dataset: &Dataset) -> Result<Vec<f64>, InferenceError> {
    let s = fit(dataset, &cfg.kernel, &cfg.fit)?;
    let mut t = vec![
        s.length_marginal()?.cdf(cfg.ell),
        s.noise_marginal()?.cdf(cfg.eta),
        s.sigma2_marginal()?.cdf(cfg.sigma2),
    ];
    for (j, &b) in cfg.beta.iter().enumerate() {
        t.push(s.beta_marginal(j)?.cdf(b));
    }
    Ok(t)
}

pub fn gp_coverage_suite(cfg: &GpCoverageConfig) -> Result<GpCoverageTable, SimulationError> {
    cfg.run.validate()?;
    cfg.fit.validate()?;
    if cfg.beta.len() != cfg.regressors.count() {
        return Err(SimulationError::Config(format!(
            "{} coefficients for {} regressors",
            cfg.beta.len(),
            cfg.regressors.count()
        )));
    }
    let locations = unit_square_grid(cfg.grid_side);
    let x = cfg.regressors.design(&locations);
    let params = FullParams::new(DVector::from_vec(cfg.beta.clone()), cfg.sigma2, cfg.ell, cfg.eta)?;
    let outcomes = run_replicates(&cfg.run, |i, rng| {
        let out = gp_sample_with(&locations, &x, &params, &cfg.kernel, rng)
            .and_then(|y| Dataset::new(locations.clone(), y, x.clone()))
            .map_err(InferenceError::from)
            .and_then(|ds| parameter_cdfs(cfg, &ds));
        if let Err(e) = &out {
            log::warn!("replicate {i}: fit failed: {e}");
        }
        out
    });
    let fit_failures = outcomes.iter().filter(|o| o.is_err()).count();
    let ok: Vec<&Vec<f64>> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    if ok.is_empty() {
        return Err(SimulationError::AllFailed(cfg.run.replicates));
    }
    let mut names = vec!["ell".to_string(), "eta".to_string(), "sigma2".to_string()];
    let mut truths = vec![cfg.ell, cfg.eta, cfg.sigma2];
    for (j, &b) in cfg.beta.iter().enumerate() {
        names.push(format!("beta{}", j + 1));
        truths.push(b);
    }
    let reports = names
        .iter()
        .zip(&truths)
        .enumerate()
        .map(|(k, (name, &truth))| {
            let covered = ok.iter().filter(|t| is_covered(t[k], cfg.run.alpha)).count();
            CoverageReport {
                parameter: name.clone(),
                true_value: truth,
                alpha: cfg.run.alpha,
                replicates: ok.len(),
                covered,
                failures: fit_failures,
                coverage: covered as f64 / ok.len() as f64,
                seed: cfg.run.seed,
            }
        })
        .collect();
    Ok(GpCoverageTable {
        ell: cfg.ell,
        eta: cfg.eta,
        reports,
        fit_failures,
    })
}

/// Rows are quantities, columns are `(η, ℓ)` cells.
pub fn write_coverage_csv<W: Write>(tables: &[GpCoverageTable], out: W) -> Result<(), SimulationError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["quantity".to_string()];
    header.extend(tables.iter().map(|t| format!("eta={} ell={}", t.eta, t.ell)));
    w.write_record(&header)?;
    let names: Vec<String> = tables
        .first()
        .map(|t| t.reports.iter().map(|r| r.parameter.clone()).collect())
        .unwrap_or_default();
    for (k, name) in names.iter().enumerate() {
        let mut row = vec![format!("{name} coverage")];
        row.extend(
            tables
                .iter()
                .map(|t| t.reports.get(k).map_or(String::new(), |r| format!("{:.3}", r.coverage))),
        );
        w.write_record(&row)?;
    }
    let mut row = vec!["fit failures".to_string()];
    row.extend(tables.iter().map(|t| t.fit_failures.to_string()));
    w.write_record(&row)?;
    w.flush()?;
    Ok(())
}

/// Prediction-coverage experiment on `[0, 1]`: one test point drawn
/// uniformly, training points evenly spaced.
#[derive(Debug, Clone)]
pub struct PredictionCoverageConfig {
    pub n_train: usize,
    pub kernel: KernelSpec,
    pub ell: f64,
    pub eta: f64,
    pub sigma2: f64,
    /// Coefficient of the constant regressor.
    pub beta: f64,
    pub fit: FitConfig,
    pub run: CoverageRun,
}

impl PredictionCoverageConfig {
    /// 20 training points, squared-exponential kernel, `σ² = 1`, `β = 1`.
    pub fn new(ell: f64, eta: f64, run: CoverageRun) -> Self {
        Self {
            n_train: 20,
            kernel: KernelSpec::squared_exponential(),
            ell,
            eta,
            sigma2: 1.0,
            beta: 1.0,
            fit: FitConfig::default(),
            run,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionCoverage {
    pub ell: f64,
    pub eta: f64,
    pub bayes: CoverageReport,
    pub ml: CoverageReport,
}

struct PredictionDraw {
    train: Dataset,
    test_location: Location,
    test_y: f64,
}

fn draw_prediction_case(
    cfg: &PredictionCoverageConfig,
    train_locations: &[Location],
    params: &FullParams,
    rng: &mut ChaCha8Rng,
) -> Result<PredictionDraw, InferenceError> {
    let test_location = Location::from(rng.random_range(0.0..1.0));
    let mut locations = vec![test_location.clone()];
    locations.extend_from_slice(train_locations);
    let x = DMatrix::from_element(locations.len(), 1, 1.0);
    let y = gp_sample_with(&locations, &x, params, &cfg.kernel, rng)?;
    let train = Dataset::new(
        train_locations.to_vec(),
        y.rows(1, train_locations.len()).into_owned(),
        DMatrix::from_element(train_locations.len(), 1, 1.0),
    )?;
    Ok(PredictionDraw {
        train,
        test_location,
        test_y: y[0],
    })
}

/// Bayesian (reference prior, sparse-grid quadrature) and ML plug-in
/// prediction coverage on the same replicates.
pub fn gp_prediction_coverage(cfg: &PredictionCoverageConfig) -> Result<PredictionCoverage, SimulationError> {
    cfg.run.validate()?;
    cfg.fit.validate()?;
    if cfg.n_train < 3 {
        return Err(SimulationError::Config("need at least 3 training points".into()));
    }
    let train_locations: Vec<Location> = (0..cfg.n_train)
        .map(|j| Location::from(j as f64 / (cfg.n_train - 1) as f64))
        .collect();
    let params = FullParams::new(DVector::from_element(1, cfg.beta), cfg.sigma2, cfg.ell, cfg.eta)?;
    let one = DMatrix::from_element(1, 1, 1.0);
    let outcomes = run_replicates(&cfg.run, |_, rng| {
        let draw = match draw_prediction_case(cfg, &train_locations, &params, rng) {
            Ok(d) => d,
            Err(e) => return (Err(e.clone()), Err(e)),
        };
        let at = std::slice::from_ref(&draw.test_location);
        let bayes = fit(&draw.train, &cfg.kernel, &cfg.fit)
            .and_then(|s| s.predict(&draw.train, at, &one))
            .and_then(|p| p.marginal(0))
            .map(|m| m.cdf(draw.test_y));
        let ml = ml_fit(&draw.train, &cfg.kernel, MeanModel::Regression)
            .and_then(|f| ml_predict(&draw.train, &cfg.kernel, &f, at, &one))
            .map(|v| std_normal_cdf((draw.test_y - v[0].0) / v[0].1));
        (bayes, ml)
    });
    let bayes = tally(
        "bayes prediction",
        f64::NAN,
        &cfg.run,
        outcomes.iter().map(|o| o.0.clone()),
        FailurePolicy::CountAsMiss,
    )?;
    let ml = tally(
        "ml prediction",
        f64::NAN,
        &cfg.run,
        outcomes.iter().map(|o| o.1.clone()),
        FailurePolicy::CountAsMiss,
    )?;
    Ok(PredictionCoverage {
        ell: cfg.ell,
        eta: cfg.eta,
        bayes,
        ml,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngExt;

    #[test]
    fn constant_cdf_extremes() {
        let run = CoverageRun::new(0.05, 100, 1);
        let half = coverage_test("x", 0.0, |_| (), |_| Ok::<_, String>(0.5), &run).unwrap();
        assert_eq!(half.coverage, 1.0);
        let zero = coverage_test("x", 0.0, |_| (), |_| Ok::<_, String>(0.0), &run).unwrap();
        assert_eq!(zero.coverage, 0.0);
    }

    #[test]
    fn boundary_is_not_covered() {
        assert!(!is_covered(0.025, 0.05));
        assert!(!is_covered(0.975, 0.05));
        assert!(is_covered(0.0250001, 0.05));
    }

    #[test]
    fn failures_count_as_misses() {
        let run = CoverageRun::new(0.05, 10, 3);
        let r = coverage_test(
            "x",
            0.0,
            |rng| rng.random_range(0..2u32),
            |k| if *k == 0 { Err("boom") } else { Ok(0.5) },
            &run,
        )
        .unwrap();
        assert_eq!(r.covered + r.failures, 10);
        assert_eq!(r.replicates, 10);
    }

    #[test]
    fn zero_replicates_rejected() {
        let run = CoverageRun::new(0.05, 0, 3);
        assert!(matches!(
            coverage_test("x", 0.0, |_| (), |_| Ok::<_, String>(0.5), &run),
            Err(SimulationError::NoReplicates)
        ));
        let cfg = GpCoverageConfig::constant_mean(0.5, 0.1, run);
        assert!(matches!(gp_coverage_suite(&cfg), Err(SimulationError::NoReplicates)));
    }

    #[test]
    fn replicates_independent_of_threads() {
        let job = |i: usize, rng: &mut ChaCha8Rng| (i, rng.random::<u64>());
        let mut run = CoverageRun::new(0.05, 37, 99);
        run.threads = 1;
        let a = run_replicates(&run, job);
        run.threads = 4;
        let b = run_replicates(&run, job);
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].1 != w[1].1));
    }

    #[test]
    fn calibrated_predictive_covers_at_nominal_rate() {
        // y ~ N(0, 1) with the exact predictive: t is uniform
        let run = CoverageRun::new(0.1, 4000, 5);
        let r = prediction_coverage_test(
            |rng| {
                let z: f64 = StandardNormal.sample(rng);
                z
            },
            |y| Ok::<_, String>(std_normal_cdf(*y)),
            &run,
        )
        .unwrap();
        let se = (0.9f64 * 0.1 / 4000.0).sqrt();
        assert!((r.coverage - 0.9).abs() < 3.0 * se, "{}", r.coverage);
    }

    #[test]
    fn single_replicate_is_deterministic() {
        let run = CoverageRun::new(0.05, 1, 11);
        let a = normal_coverage(NormalCase::VarianceJeffreys, 5, 1.0, &run).unwrap();
        let b = normal_coverage(NormalCase::VarianceJeffreys, 5, 1.0, &run).unwrap();
        assert_eq!(a, b);
    }

    /// Trapezoid integral of the unnormalized posterior of `σ²` on a fine
    /// grid in `log σ²`.
    fn numeric_variance_cdf(ss: f64, power: f64, t: f64) -> f64 {
        // density in σ²: (σ²)^(−power) exp(−ss / (2σ²)); in v = log σ² multiply by σ²
        let dens = |v: f64| {
            let s2 = v.exp();
            (-(power - 1.0) * v - ss / (2.0 * s2)).exp()
        };
        let trap = |a: f64, b: f64| {
            let m = 100_000;
            let h = (b - a) / m as f64;
            (0..=m)
                .map(|i| if i == 0 || i == m { 0.5 } else { 1.0 } * dens(a + h * i as f64))
                .sum::<f64>()
                * h
        };
        let below = trap(-30.0, t.ln());
        below / (below + trap(t.ln(), 30.0))
    }

    #[test]
    fn variance_cdfs_match_numeric_integration() {
        let y = [0.3, -1.2, 0.8, 2.1, -0.4, 0.05];
        let n = y.len() as f64;
        let ss = sum_sq(&y);
        let css = centered_ss(&y);
        for t in [0.3, 1.0, 2.5] {
            // flat prior on σ², known mean: power n/2
            let num = numeric_variance_cdf(ss, n / 2.0, t);
            assert!((variance_cdf_flat_prior(&y, t) - num).abs() < 1e-4, "flat {t}");
            // 1/σ²: power n/2 + 1
            let num = numeric_variance_cdf(ss, n / 2.0 + 1.0, t);
            assert!((variance_cdf_jeffreys(&y, t) - num).abs() < 1e-4, "jeffreys {t}");
            // unknown mean, (1/σ²)^{3/2}: after integrating μ, power (n + 2)/2
            let num = numeric_variance_cdf(css, (n + 2.0) / 2.0, t);
            assert!((variance_cdf_unknown_mean_jeffreys(&y, t) - num).abs() < 1e-4, "joint {t}");
            // unknown mean, 1/σ²: power (n + 1)/2
            let num = numeric_variance_cdf(css, (n + 1.0) / 2.0, t);
            assert!((variance_cdf_unknown_mean_reference(&y, t) - num).abs() < 1e-4, "reference {t}");
        }
        assert_eq!(variance_cdf_jeffreys(&y, 0.0), 0.0);
        assert_eq!(variance_cdf_jeffreys(&y, -1.0), 0.0);
    }

    #[test]
    fn quadratic_design_columns() {
        let locs = unit_square_grid(3);
        assert_eq!(locs.len(), 9);
        let x = Regressors::Quadratic.design(&locs);
        let r = 5; // (0.5, 1.0)
        assert_eq!(x.row(r).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.5, 1.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn coverage_csv_layout() {
        let rep = |name: &str, c: f64| CoverageReport {
            parameter: name.into(),
            true_value: 1.0,
            alpha: 0.05,
            replicates: 10,
            covered: (c * 10.0) as usize,
            failures: 0,
            coverage: c,
            seed: 0,
        };
        let t = GpCoverageTable {
            ell: 0.5,
            eta: 0.1,
            reports: vec![rep("ell", 0.9), rep("eta", 1.0)],
            fit_failures: 0,
        };
        let mut buf = Vec::new();
        write_coverage_csv(&[t], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "quantity,eta=0.1 ell=0.5\nell coverage,0.900\neta coverage,1.000\nfit failures,0\n"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn variance_cdfs_are_monotone(
            y in proptest::collection::vec(-3.0f64..3.0, 4..12),
            a in 0.01f64..5.0,
            d in 0.0f64..5.0,
        ) {
            let b = a + d;
            for f in [
                variance_cdf_flat_prior as fn(&[f64], f64) -> f64,
                variance_cdf_jeffreys,
                variance_cdf_unknown_mean_jeffreys,
                variance_cdf_unknown_mean_reference,
            ] {
                let (fa, fb) = (f(&y, a), f(&y, b));
                prop_assert!((0.0..=1.0).contains(&fa));
                prop_assert!(fb >= fa - 1e-15);
            }
        }
    }
}
