//! Gaussian-process data model: locations, power-exponential correlation
//! kernels with their length-scale derivatives, validated datasets, and exact
//! sampling of synthetic observations.
//!
//! The kernel family is
//!
//! ```text
//! k(d; ℓ) = exp(−(d/ℓ)^γ / γ),   γ ∈ (0, 2]
//! ```
//!
//! which gives `exp(−d/ℓ)` for `γ = 1` and `exp(−d²/(2ℓ²))` for `γ = 2`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("location {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("at least one location is required")]
    NoLocations,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("length scale must be positive, got {0}")]
    NonPositiveLength(f64),
    #[error("kernel exponent must lie in (0, 2], got {0}")]
    BadExponent(f64),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("dataset has n = {n} observations but p = {p} regressors; need n > p >= 1")]
    TooFewObservations { n: usize, p: usize },
    #[error("observation vector has {y} entries but there are {n} locations")]
    LengthMismatch { n: usize, y: usize },
    #[error("locations {0} and {1} coincide")]
    DuplicateLocation(usize, usize),
    #[error("regression design does not have full column rank")]
    RankDeficient,
    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,
}

/// A point in `d`-dimensional space.
#[derive(Debug, Clone, PartialEq)]
pub struct Location {
    pub coords: Vec<f64>,
}

impl Location {
    pub fn new(coords: Vec<f64>) -> Result<Self, ModelError> {
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(ModelError::NonFinite("location coordinates"));
        }
        Ok(Self { coords })
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn distance(&self, other: &Location) -> f64 {
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl From<f64> for Location {
    fn from(x: f64) -> Self {
        Self { coords: vec![x] }
    }
}

/// Power-exponential correlation `k(d) = exp(−(d/ℓ)^γ / γ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    gamma: f64,
}

impl KernelSpec {
    pub fn power_exponential(gamma: f64) -> Result<Self, ModelError> {
        if !(gamma > 0.0 && gamma <= 2.0) {
            return Err(ModelError::BadExponent(gamma));
        }
        Ok(Self { gamma })
    }

    /// `exp(−d/ℓ)`.
    pub fn exponential() -> Self {
        Self { gamma: 1.0 }
    }

    /// `exp(−d²/(2ℓ²))`.
    pub fn squared_exponential() -> Self {
        Self { gamma: 2.0 }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Correlation and its first three derivatives with respect to `ℓ`.
    ///
    /// With `q = (d/ℓ)^γ`:
    /// `k' = k q/ℓ`, `k'' = k q (q − γ − 1)/ℓ²`,
    /// `k''' = k q (q² − 3(γ+1) q + (γ+1)(γ+2))/ℓ³`.
    pub fn eval_with_derivs(&self, d: f64, ell: f64) -> [f64; 4] {
        if d == 0.0 {
            return [1.0, 0.0, 0.0, 0.0];
        }
        let g = self.gamma;
        let q = (d / ell).powf(g);
        let k = (-q / g).exp();
        let kq = k * q;
        [
            k,
            kq / ell,
            kq * (q - g - 1.0) / (ell * ell),
            kq * (q * q - 3.0 * (g + 1.0) * q + (g + 1.0) * (g + 2.0)) / (ell * ell * ell),
        ]
    }

    pub fn eval(&self, d: f64, ell: f64) -> f64 {
        if d == 0.0 {
            return 1.0;
        }
        (-(d / ell).powf(self.gamma) / self.gamma).exp()
    }
}

/// Pairwise Euclidean distances.
pub fn distance_matrix(locations: &[Location]) -> Result<DMatrix<f64>, ModelError> {
    let first = locations.first().ok_or(ModelError::NoLocations)?;
    let dim = first.dim();
    for (index, loc) in locations.iter().enumerate() {
        if loc.dim() != dim {
            return Err(ModelError::DimensionMismatch {
                index,
                expected: dim,
                found: loc.dim(),
            });
        }
    }
    let n = locations.len();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = locations[i].distance(&locations[j]);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(d)
}

fn check_ell(ell: f64) -> Result<(), ModelError> {
    if ell > 0.0 && ell.is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonPositiveLength(ell))
    }
}

fn map_symmetric(dist: &DMatrix<f64>, diag: f64, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let n = dist.nrows();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        out[(j, j)] = diag;
        for i in (j + 1)..n {
            let v = f(dist[(i, j)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// `K(ℓ)_ij = k(D_ij)`.
pub fn corr_matrix(
    kernel: &KernelSpec,
    ell: f64,
    dist: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ModelError> {
    check_ell(ell)?;
    Ok(map_symmetric(dist, 1.0, |d| kernel.eval(d, ell)))
}

/// `∂K/∂ℓ`.
pub fn corr_matrix_d1(
    kernel: &KernelSpec,
    ell: f64,
    dist: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ModelError> {
    check_ell(ell)?;
    Ok(map_symmetric(dist, 0.0, |d| kernel.eval_with_derivs(d, ell)[1]))
}

/// `∂²K/∂ℓ²`.
pub fn corr_matrix_d2(
    kernel: &KernelSpec,
    ell: f64,
    dist: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ModelError> {
    check_ell(ell)?;
    Ok(map_symmetric(dist, 0.0, |d| kernel.eval_with_derivs(d, ell)[2]))
}

/// `K` together with its first three `ℓ`-derivatives, computed in one pass.
pub(crate) fn corr_matrix_all(
    kernel: &KernelSpec,
    ell: f64,
    dist: &DMatrix<f64>,
) -> Result<[DMatrix<f64>; 4], ModelError> {
    check_ell(ell)?;
    let n = dist.nrows();
    let mut out = [
        DMatrix::identity(n, n),
        DMatrix::zeros(n, n),
        DMatrix::zeros(n, n),
        DMatrix::zeros(n, n),
    ];
    for j in 0..n {
        for i in (j + 1)..n {
            let vals = kernel.eval_with_derivs(dist[(i, j)], ell);
            for (m, v) in out.iter_mut().zip(vals) {
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
    }
    Ok(out)
}

/// Observed locations, responses, and regression design.
#[derive(Debug, Clone)]
pub struct Dataset {
    locations: Vec<Location>,
    y: DVector<f64>,
    x: DMatrix<f64>,
    dist: DMatrix<f64>,
}

impl Dataset {
    pub fn new(
        locations: Vec<Location>,
        y: DVector<f64>,
        x: DMatrix<f64>,
    ) -> Result<Self, ModelError> {
        let n = locations.len();
        let p = x.ncols();
        if y.len() != n || x.nrows() != n {
            return Err(ModelError::LengthMismatch { n, y: y.len() });
        }
        if p == 0 || n <= p {
            return Err(ModelError::TooFewObservations { n, p });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("observations"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("regressors"));
        }
        let dist = distance_matrix(&locations)?;
        for j in 0..n {
            for i in (j + 1)..n {
                if dist[(i, j)] == 0.0 {
                    return Err(ModelError::DuplicateLocation(j, i));
                }
            }
        }
        check_full_rank(&x)?;
        Ok(Self {
            locations,
            y,
            x,
            dist,
        })
    }

    /// Dataset with a single constant regressor column.
    pub fn with_constant_mean(locations: Vec<Location>, y: DVector<f64>) -> Result<Self, ModelError> {
        let n = locations.len();
        Self::new(locations, y, DMatrix::from_element(n, 1, 1.0))
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn distances(&self) -> &DMatrix<f64> {
        &self.dist
    }

    /// Same design with a different response vector.
    pub fn with_y(&self, y: DVector<f64>) -> Result<Self, ModelError> {
        if y.len() != self.n() {
            return Err(ModelError::LengthMismatch {
                n: self.n(),
                y: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("observations"));
        }
        Ok(Self { y, ..self.clone() })
    }
}

fn check_full_rank(x: &DMatrix<f64>) -> Result<(), ModelError> {
    let svd = x.clone().svd(false, false);
    let s = &svd.singular_values;
    let smax = s.max();
    let tol = smax * (x.nrows().max(x.ncols()) as f64) * f64::EPSILON * 16.0;
    if smax == 0.0 || s.iter().any(|&v| v <= tol) {
        return Err(ModelError::RankDeficient);
    }
    Ok(())
}

/// Full parameter vector `(β, σ², ℓ, η)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullParams {
    pub beta: DVector<f64>,
    pub sigma2: f64,
    pub ell: f64,
    pub eta: f64,
}

impl FullParams {
    pub fn new(beta: DVector<f64>, sigma2: f64, ell: f64, eta: f64) -> Result<Self, ModelError> {
        let params = Self {
            beta,
            sigma2,
            ell,
            eta,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(ModelError::NonFinite("beta"));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(ModelError::InvalidParams(format!(
                "sigma2 must be positive, got {}",
                self.sigma2
            )));
        }
        check_ell(self.ell)?;
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(ModelError::InvalidParams(format!(
                "eta must be nonnegative, got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

/// Draw `y ~ N(Xβ, σ²(K(ℓ) + ηI))` using the lower Cholesky factor of the
/// covariance. No jitter is added; a non-positive-definite covariance is an
/// error.
pub fn gp_sample(
    locations: &[Location],
    x: &DMatrix<f64>,
    params: &FullParams,
    kernel: &KernelSpec,
    seed: u64,
) -> Result<DVector<f64>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gp_sample_with(locations, x, params, kernel, &mut rng)
}

pub(crate) fn gp_sample_with<R: rand::Rng + ?Sized>(
    locations: &[Location],
    x: &DMatrix<f64>,
    params: &FullParams,
    kernel: &KernelSpec,
    rng: &mut R,
) -> Result<DVector<f64>, ModelError> {
    params.validate()?;
    let n = locations.len();
    if x.nrows() != n || x.ncols() != params.beta.len() {
        return Err(ModelError::InvalidParams(format!(
            "design is {}x{} but there are {} locations and {} coefficients",
            x.nrows(),
            x.ncols(),
            n,
            params.beta.len()
        )));
    }
    let dist = distance_matrix(locations)?;
    let factor = covariance_factor(kernel, params, &dist)?;
    Ok(sample_from_factor(x, &params.beta, &factor, rng))
}

/// Lower Cholesky factor of `σ²(K(ℓ) + ηI)`.
pub(crate) fn covariance_factor(
    kernel: &KernelSpec,
    params: &FullParams,
    dist: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ModelError> {
    let mut cov = corr_matrix(kernel, params.ell, dist)?;
    for i in 0..cov.nrows() {
        cov[(i, i)] += params.eta;
    }
    cov *= params.sigma2;
    cov.cholesky()
        .map(|c| c.l())
        .ok_or(ModelError::NotPositiveDefinite)
}

pub(crate) fn sample_from_factor<R: rand::Rng + ?Sized>(
    x: &DMatrix<f64>,
    beta: &DVector<f64>,
    factor: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let n = factor.nrows();
    let z = DVector::from_fn(n, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v
    });
    x * beta + factor * z
}
