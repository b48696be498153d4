//! Deterministic posterior surrogate for `(ℓ, η)` and the marginal and
//! predictive distributions built on it.
//!
//! Fitting runs four stages:
//! 1. trust-region minimization of `f(u)` from several starts;
//! 2. eigen-decomposition of the Hessian at the mode and level-set brackets
//!    `f(u_MAP + t v) − f(u_MAP) = log(1/ε)` along each eigenvector;
//! 3. monotone cubic warps `w_k : [0, 1] → [a_k, b_k]`, giving
//!    `u(x) = u_MAP + w₁(x₁) v₁ + w₂(x₂) v₂` and
//!    `g(x) = exp(−(f(u(x)) − f(u_MAP)))`;
//! 4. an adaptive sparse grid on `g`, whose quadrature weights against
//!    `ẇ₁ ẇ₂` give the rule `Σ_k w_k F(ℓ_k, η_k)`.

use std::collections::HashMap;

use gauss_quad::GaussLegendre;
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use std::num::NonZeroUsize;
use thiserror::Error;

use crate::cheb::ChebInterpolant;
use crate::mixture::{
    InvGammaComponent, LogGridDensity, MixtureError, MixtureMarginal, TComponent,
};
use crate::model::{Dataset, KernelSpec, Location, ModelError};
use crate::optimizer::{
    minimize_multistart, Evaluation, OptimizerError, TrustRegionOptions,
};
use crate::posterior::{
    build_workspace, objective_eval_full, value_from_workspace, HyperPoint, Objective,
    PosteriorError, PosteriorWorkspace,
};
use crate::sparsegrid::{
    approximate, dim_weights, PiecewiseWeight, SparseGrid, SparseGridConfig, SparseGridError,
};
use crate::warp::{bracket_direction, principal_axes, MonotoneCubic, WarpError};

/// Gauss-Legendre order for integrating out the other coordinate in the
/// `ℓ` and `η` marginals.
const MARGINAL_GL_ORDER: usize = 64;
/// Starting Chebyshev degree (33 points).
const CHEB_DEGREE: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    SparseGrid(#[from] SparseGridError),
    #[error(transparent)]
    Mixture(#[from] MixtureError),
    #[error("no start converged to a mode with positive definite Hessian")]
    ModeNotFound,
    #[error("quadrature rule is degenerate (normalizer {0})")]
    DegenerateRule(f64),
    #[error("new design has {got} columns, dataset has {expected}")]
    DesignMismatch { expected: usize, got: usize },
    #[error("new location {0} coincides with another location")]
    CoincidentLocation(usize),
    #[error("new location {index} has dimension {found}, expected {expected}")]
    LocationDimension {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("regression coefficient index {index} out of range 0..{p}")]
    BadCoefficient { index: usize, p: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Sparse-grid tolerance.
    pub tol: f64,
    /// Bracket level `log(1/eps)`.
    pub eps: f64,
    pub trust: TrustRegionOptions,
    pub starts: Vec<Vector2<f64>>,
    pub max_nodes: usize,
    pub tau: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            eps: 1e-5,
            trust: TrustRegionOptions::default(),
            starts: default_starts(),
            max_nodes: 20_000,
            tau: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(InferenceError::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(InferenceError::Config(format!("eps must lie in (0, 1), got {}", self.eps)));
        }
        if self.starts.is_empty() {
            return Err(InferenceError::Config("no optimizer starts".into()));
        }
        Ok(())
    }
}

/// `u ∈ {−3, −1, 1}²`.
pub fn default_starts() -> Vec<Vector2<f64>> {
    let grid = [-3.0, -1.0, 1.0];
    grid.iter()
        .flat_map(|&a| grid.iter().map(move |&b| Vector2::new(a, b)))
        .collect()
}

/// Per-node quantities reused by the `σ²`, `β` and predictive marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStats {
    pub s2: f64,
    pub beta_bar: DVector<f64>,
    pub a_inv_diag: DVector<f64>,
}

impl NodeStats {
    fn from_workspace(ws: &PosteriorWorkspace) -> Self {
        Self {
            s2: ws.s2,
            beta_bar: ws.beta_bar.clone(),
            a_inv_diag: ws.a_inv.diagonal(),
        }
    }
}

/// Nodes in `u = (log ℓ, log η)` with weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub u: Vec<Vector2<f64>>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `(ℓ_k, η_k)` pairs.
    pub fn nodes(&self) -> Vec<(f64, f64)> {
        self.u.iter().map(|u| (u[0].exp(), u[1].exp())).collect()
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorSurrogate {
    kernel: KernelSpec,
    n: usize,
    p: usize,
    pub u_map: HyperPoint,
    pub f_map: f64,
    pub hessian: Matrix2<f64>,
    pub eigenvalues: [f64; 2],
    pub eigenvectors: [Vector2<f64>; 2],
    pub warps: [MonotoneCubic; 2],
    pub grid: SparseGrid,
    /// `∫ exp(−(f(u) − f(u_MAP))) du` under the surrogate.
    pub normalizer: f64,
    pub rule: QuadratureRule,
    stats: Vec<NodeStats>,
}

fn to_evaluation(ev: crate::posterior::PosteriorEval) -> Evaluation {
    Evaluation {
        value: ev.value,
        gradient: DVector::from_column_slice(ev.gradient.as_slice()),
        hessian: DMatrix::from_column_slice(2, 2, ev.hessian.as_slice()),
    }
}

fn point_key(x: &[f64]) -> (u64, u64) {
    (x[0].to_bits(), x[1].to_bits())
}

/// Builds the posterior surrogate for `(ℓ, η)`.
pub fn fit(
    dataset: &Dataset,
    kernel: &KernelSpec,
    config: &FitConfig,
) -> Result<PosteriorSurrogate, InferenceError> {
    config.validate()?;
    let objective = |v: &DVector<f64>| {
        objective_eval_full(
            dataset,
            kernel,
            HyperPoint::new(v[0], v[1]),
            Objective::ReferencePosterior,
        )
        .map(to_evaluation)
    };
    let starts: Vec<DVector<f64>> = config
        .starts
        .iter()
        .map(|s| DVector::from_column_slice(s.as_slice()))
        .collect();
    let opt = minimize_multistart(objective, &starts, &config.trust)?;
    if !opt.converged() {
        return Err(InferenceError::ModeNotFound);
    }
    let u_map = HyperPoint::new(opt.x[0], opt.x[1]);
    let f_map = opt.eval.value;
    let hessian = Matrix2::new(
        opt.eval.hessian[(0, 0)],
        opt.eval.hessian[(0, 1)],
        opt.eval.hessian[(1, 0)],
        opt.eval.hessian[(1, 1)],
    );
    let (eigenvalues, eigenvectors) = principal_axes(&hessian);
    if !(eigenvalues[1] > 0.0) {
        return Err(InferenceError::ModeNotFound);
    }
    log::debug!("mode at u = ({:.5}, {:.5}), f = {f_map:.6}", u_map.u1, u_map.u2);

    let f_at = |u: &Vector2<f64>| -> Result<f64, PosteriorError> {
        let hp = HyperPoint::from_vector(u);
        let ws = build_workspace(dataset, kernel, hp.ell(), hp.eta())?;
        value_from_workspace(&ws, hp, Objective::ReferencePosterior)
    };
    let center = u_map.as_vector();
    let mut warps = Vec::with_capacity(2);
    for v in &eigenvectors {
        let br = bracket_direction(f_at, &center, v, config.eps)?;
        warps.push(MonotoneCubic::fit(&br));
    }
    let warps = [warps[0], warps[1]];
    let to_u = |x: &[f64]| -> Vector2<f64> {
        center
            + eigenvectors[0] * warps[0].eval(x[0]).expect("x in [0, 1]")
            + eigenvectors[1] * warps[1].eval(x[1]).expect("x in [0, 1]")
    };
    let mut stats_cache: HashMap<(u64, u64), NodeStats> = HashMap::new();
    let grid = {
        let target = |x: &[f64]| -> f64 {
            let hp = HyperPoint::from_vector(&to_u(x));
            match build_workspace(dataset, kernel, hp.ell(), hp.eta()) {
                Ok(ws) => {
                    let v = value_from_workspace(&ws, hp, Objective::ReferencePosterior);
                    stats_cache.insert(point_key(x), NodeStats::from_workspace(&ws));
                    v.map(|v| (-(v - f_map)).exp()).unwrap_or(0.0)
                }
                Err(_) => 0.0,
            }
        };
        let ferr = |y: f64, approx: f64, _x: &[f64]| (y - approx).abs();
        let cfg = SparseGridConfig {
            tol: config.tol,
            tau: config.tau,
            max_nodes: config.max_nodes,
        };
        approximate(2, target, ferr, &cfg)?
    };
    log::debug!(
        "sparse grid: {} accepted nodes, {} evaluations",
        grid.node_count(),
        grid.evaluations()
    );

    let om1 = |t: f64| warps[0].deriv(t).expect("t in [0, 1]");
    let om2 = |t: f64| warps[1].deriv(t).expect("t in [0, 1]");
    let omegas = [
        PiecewiseWeight {
            eval: &om1,
            breaks: warps[0].breakpoints().to_vec(),
            degree: 2,
        },
        PiecewiseWeight {
            eval: &om2,
            breaks: warps[1].breakpoints().to_vec(),
            degree: 2,
        },
    ];
    let quad = dim_weights(&grid, &omegas)?;
    let raw: Vec<f64> = quad
        .weights
        .iter()
        .zip(&quad.values)
        .map(|(c, t)| c * t)
        .collect();
    let normalizer: f64 = raw.iter().sum();
    if !(normalizer > 0.0 && normalizer.is_finite()) {
        return Err(InferenceError::DegenerateRule(normalizer));
    }
    let mut u_nodes = Vec::with_capacity(raw.len());
    let mut weights = Vec::with_capacity(raw.len());
    let mut stats = Vec::with_capacity(raw.len());
    for (x, r) in quad.x.iter().zip(&raw) {
        if *r == 0.0 {
            continue;
        }
        let u = to_u(x);
        let st = match stats_cache.remove(&point_key(x)) {
            Some(s) => s,
            None => {
                let hp = HyperPoint::from_vector(&u);
                NodeStats::from_workspace(&build_workspace(dataset, kernel, hp.ell(), hp.eta())?)
            }
        };
        u_nodes.push(u);
        weights.push(r / normalizer);
        stats.push(st);
    }
    let negative: f64 = weights.iter().filter(|w| **w < 0.0).sum();
    if negative < 0.0 {
        log::debug!("quadrature carries {negative:.3e} of negative weight");
    }

    Ok(PosteriorSurrogate {
        kernel: *kernel,
        n: dataset.n(),
        p: dataset.p(),
        u_map,
        f_map,
        hessian,
        eigenvalues,
        eigenvectors,
        warps,
        grid,
        normalizer,
        rule: QuadratureRule {
            u: u_nodes,
            weights,
        },
        stats,
    })
}

/// Predictive distribution at `m` new locations: a weighted mixture of
/// multivariate t kernels sharing `df = n − p`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    pub df: f64,
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    /// Scale matrices; the covariance of a component is `scale · df/(df − 2)`.
    pub scales: Vec<DMatrix<f64>>,
}

impl PredictiveDistribution {
    pub fn len(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalar t mixture at location `j`.
    pub fn marginal(&self, j: usize) -> Result<MixtureMarginal, InferenceError> {
        let comps = self
            .means
            .iter()
            .zip(&self.scales)
            .map(|(m, s)| TComponent::new(self.df, m[j], s[(j, j)].sqrt()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MixtureMarginal::student_t(comps, self.weights.clone())?)
    }

    pub fn mean(&self, j: usize) -> f64 {
        self.means.iter().zip(&self.weights).map(|(m, w)| w * m[j]).sum()
    }

    /// Standard deviation at location `j`; infinite when `df ≤ 2`.
    pub fn sd(&self, j: usize) -> f64 {
        if self.df <= 2.0 {
            return f64::INFINITY;
        }
        let mean = self.mean(j);
        let factor = self.df / (self.df - 2.0);
        let second: f64 = self
            .means
            .iter()
            .zip(&self.scales)
            .zip(&self.weights)
            .map(|((m, s), w)| w * (s[(j, j)] * factor + m[j] * m[j]))
            .sum();
        (second - mean * mean).max(0.0).sqrt()
    }
}

/// Kriging quantities at one `(ℓ, η)`: mean `ȳ₂`, and `R₂₂⁻¹` from the
/// partitioned residual projector of the joint sample.
struct KrigingParts {
    mean: DVector<f64>,
    r22_inv: DMatrix<f64>,
    s2: f64,
}

fn cross_correlation(
    kernel: &KernelSpec,
    ell: f64,
    rows: &[Location],
    cols: &[Location],
) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        kernel.eval(rows[i].distance(&cols[j]), ell)
    })
}

fn kriging_parts(
    ws: &PosteriorWorkspace,
    dataset: &Dataset,
    kernel: &KernelSpec,
    new_locations: &[Location],
    new_x: &DMatrix<f64>,
) -> KrigingParts {
    let (ell, eta) = (ws.ell, ws.eta);
    let k21 = cross_correlation(kernel, ell, new_locations, dataset.locations());
    let mut g22 = cross_correlation(kernel, ell, new_locations, new_locations);
    for i in 0..g22.nrows() {
        g22[(i, i)] += eta;
    }
    // triangular solves keep the Schur complement accurate when G is ill conditioned
    let l = &ws.l_g;
    let v = l.solve_lower_triangular(&k21.transpose()).expect("Cholesky factor is nonsingular");
    let vx = l.solve_lower_triangular(dataset.x()).expect("Cholesky factor is nonsingular");
    let resid = dataset.y() - dataset.x() * &ws.beta_bar;
    let vy = l.solve_lower_triangular(&resid).expect("Cholesky factor is nonsingular");
    let c = g22 - v.transpose() * &v;
    let e = new_x - v.transpose() * vx;
    let mut r22_inv = &c + &e * &ws.a_inv * e.transpose();
    r22_inv = (&r22_inv + r22_inv.transpose()) * 0.5;
    // roundoff can push a near-interpolating variance below zero
    for i in 0..r22_inv.nrows() {
        let floor = f64::EPSILON * (1.0 + eta);
        if r22_inv[(i, i)] < floor {
            r22_inv[(i, i)] = floor;
        }
    }
    let mean = v.transpose() * vy + new_x * &ws.beta_bar;
    KrigingParts {
        mean,
        r22_inv,
        s2: ws.s2,
    }
}

fn check_new_points(
    dataset: &Dataset,
    new_locations: &[Location],
    new_x: &DMatrix<f64>,
) -> Result<(), InferenceError> {
    check_locations(dataset, new_locations)?;
    if new_x.ncols() != dataset.p() && !new_locations.is_empty() {
        return Err(InferenceError::DesignMismatch {
            expected: dataset.p(),
            got: new_x.ncols(),
        });
    }
    if new_x.nrows() != new_locations.len() {
        return Err(InferenceError::Config(format!(
            "{} new locations but {} design rows",
            new_locations.len(),
            new_x.nrows()
        )));
    }
    Ok(())
}

/// New locations must match the data dimension and be distinct from every
/// observed and earlier new location.
pub(crate) fn check_locations(dataset: &Dataset, new_locations: &[Location]) -> Result<(), InferenceError> {
    let dim = dataset.locations()[0].dim();
    for (i, loc) in new_locations.iter().enumerate() {
        if loc.dim() != dim {
            return Err(InferenceError::LocationDimension {
                index: i,
                expected: dim,
                found: loc.dim(),
            });
        }
        let clash = dataset.locations().iter().any(|o| o.distance(loc) == 0.0)
            || new_locations[..i].iter().any(|o| o.distance(loc) == 0.0);
        if clash {
            return Err(InferenceError::CoincidentLocation(i));
        }
    }
    Ok(())
}

/// Point in `u` at warped coordinates `x`.
impl PosteriorSurrogate {
    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn u_of_x(&self, x: &[f64]) -> Vector2<f64> {
        self.u_map.as_vector()
            + self.eigenvectors[0] * self.warps[0].eval(x[0]).expect("x in [0, 1]")
            + self.eigenvectors[1] * self.warps[1].eval(x[1]).expect("x in [0, 1]")
    }

    /// Surrogate for `exp(−(f(u(x)) − f(u_MAP)))`.
    pub fn surrogate_g(&self, x: &[f64]) -> f64 {
        self.grid.evaluate(x).expect("two coordinates")
    }

    /// Normalized surrogate density of `u`; zero outside the bracketed rectangle.
    pub fn density_u(&self, u: &Vector2<f64>) -> f64 {
        let d = u - self.u_map.as_vector();
        let mut x = [0.0; 2];
        for k in 0..2 {
            let delta = self.eigenvectors[k].dot(&d);
            if delta < self.warps[k].a() || delta > self.warps[k].b() {
                return 0.0;
            }
            x[k] = self.warps[k].inverse(delta).expect("inside bracket");
        }
        (self.surrogate_g(&x) / self.normalizer).max(0.0)
    }

    /// `Σ_k w_k F(ℓ_k, η_k)`.
    pub fn posterior_expect<F: FnMut(f64, f64) -> f64>(&self, mut f: F) -> f64 {
        self.rule
            .u
            .iter()
            .zip(&self.rule.weights)
            .map(|(u, w)| w * f(u[0].exp(), u[1].exp()))
            .sum()
    }

    pub fn node_stats(&self) -> &[NodeStats] {
        &self.stats
    }

    /// Corners of the bracketed rectangle in `u`.
    pub fn corners(&self) -> [Vector2<f64>; 4] {
        let c = self.u_map.as_vector();
        let (v1, v2) = (self.eigenvectors[0], self.eigenvectors[1]);
        let (w1, w2) = (self.warps[0], self.warps[1]);
        [
            c + v1 * w1.a() + v2 * w2.a(),
            c + v1 * w1.a() + v2 * w2.b(),
            c + v1 * w1.b() + v2 * w2.a(),
            c + v1 * w1.b() + v2 * w2.b(),
        ]
    }

    pub fn predict(
        &self,
        dataset: &Dataset,
        new_locations: &[Location],
        new_x: &DMatrix<f64>,
    ) -> Result<PredictiveDistribution, InferenceError> {
        check_new_points(dataset, new_locations, new_x)?;
        let df = (self.n - self.p) as f64;
        let mut means = Vec::with_capacity(self.rule.len());
        let mut scales = Vec::with_capacity(self.rule.len());
        for u in &self.rule.u {
            let ws = build_workspace(dataset, &self.kernel, u[0].exp(), u[1].exp())?;
            let parts = kriging_parts(&ws, dataset, &self.kernel, new_locations, new_x);
            scales.push(parts.r22_inv * (parts.s2 / df));
            means.push(parts.mean);
        }
        Ok(PredictiveDistribution {
            df,
            weights: self.rule.weights.clone(),
            means,
            scales,
        })
    }

    /// Inverse-gamma mixture for `σ²`.
    pub fn sigma2_marginal(&self) -> Result<MixtureMarginal, InferenceError> {
        let shape = 0.5 * (self.n - self.p) as f64;
        let comps = self
            .stats
            .iter()
            .map(|s| InvGammaComponent::new(shape, 0.5 * s.s2))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MixtureMarginal::inverse_gamma(comps, self.rule.weights.clone())?)
    }

    /// t mixture for the regression coefficient `β_j` (0-based).
    pub fn beta_marginal(&self, j: usize) -> Result<MixtureMarginal, InferenceError> {
        if j >= self.p {
            return Err(InferenceError::BadCoefficient { index: j, p: self.p });
        }
        let df = (self.n - self.p) as f64;
        let comps = self
            .stats
            .iter()
            .map(|s| TComponent::new(df, s.beta_bar[j], (s.a_inv_diag[j] * s.s2 / df).sqrt()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MixtureMarginal::student_t(comps, self.rule.weights.clone())?)
    }

    pub fn length_marginal(&self) -> Result<MixtureMarginal, InferenceError> {
        self.log_marginal(0)
    }

    pub fn noise_marginal(&self) -> Result<MixtureMarginal, InferenceError> {
        self.log_marginal(1)
    }

    /// Density of `u[axis]` integrated over the other coordinate inside the
    /// bracketed rectangle, interpolated in Chebyshev form.
    fn log_marginal(&self, axis: usize) -> Result<MixtureMarginal, InferenceError> {
        let other = 1 - axis;
        let corners = self.corners();
        let lo = corners.iter().map(|c| c[axis]).fold(f64::INFINITY, f64::min);
        let hi = corners.iter().map(|c| c[axis]).fold(f64::NEG_INFINITY, f64::max);
        let center = self.u_map.as_vector();
        let rule = GaussLegendre::new(NonZeroUsize::new(MARGINAL_GL_ORDER).expect("nonzero"));
        let pairs = rule.as_node_weight_pairs();
        let density = |a: f64| -> f64 {
            // δ_k = v_k[axis](a − c[axis]) + v_k[other](s − c[other]) must lie in [a_k, b_k]
            let (mut s_lo, mut s_hi) = (f64::NEG_INFINITY, f64::INFINITY);
            for k in 0..2 {
                let v = self.eigenvectors[k];
                let base = v[axis] * (a - center[axis]);
                let (wa, wb) = (self.warps[k].a(), self.warps[k].b());
                if v[other].abs() < 1e-14 {
                    if base < wa || base > wb {
                        return 0.0;
                    }
                    continue;
                }
                let t1 = center[other] + (wa - base) / v[other];
                let t2 = center[other] + (wb - base) / v[other];
                s_lo = s_lo.max(t1.min(t2));
                s_hi = s_hi.min(t1.max(t2));
            }
            if !(s_hi > s_lo) {
                return 0.0;
            }
            let half = 0.5 * (s_hi - s_lo);
            let mid = 0.5 * (s_hi + s_lo);
            pairs
                .iter()
                .map(|&(t, w)| {
                    let mut u = Vector2::zeros();
                    u[axis] = a;
                    u[other] = mid + half * t;
                    w * self.density_u(&u)
                })
                .sum::<f64>()
                * half
        };
        let tol = 1e-6 / (hi - lo);
        let (cheb, _) = ChebInterpolant::adaptive(density, lo, hi, tol, CHEB_DEGREE, 256);
        Ok(MixtureMarginal::log_grid(LogGridDensity::new(cheb)?))
    }
}
