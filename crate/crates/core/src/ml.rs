//! Maximum-likelihood fit with `β` and `σ²` profiled out, and the plug-in
//! normal predictive used as a baseline against the Bayesian predictive.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::inference::{check_locations, default_starts, InferenceError};
use crate::linalg::trace_prod;
use crate::model::{corr_matrix_all, Dataset, FullParams, KernelSpec, Location, ModelError};
use crate::optimizer::{minimize_multistart, Evaluation, TrustRegionOptions};
use crate::posterior::{HyperPoint, PosteriorError};

/// Mean structure used by the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanModel {
    /// `E[y] = Xβ` with `β` profiled out by generalized least squares.
    Regression,
    /// `E[y] = 0`; the design matrix is ignored.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlFit {
    pub params: FullParams,
    pub u: HyperPoint,
    pub mean: MeanModel,
    /// Log-likelihood at the optimum, up to the `−(n/2)(1 + log 2π − log n)` constant.
    pub profile_value: f64,
    pub gradient_norm: f64,
    pub converged: bool,
}

/// Pieces of the profile likelihood at one `(ℓ, η)`.
struct ProfileParts {
    g_inv: DMatrix<f64>,
    /// `G⁻¹` for the zero mean, the residual projector `R` otherwise.
    proj: DMatrix<f64>,
    log_det_g: f64,
    s2: f64,
    beta: DVector<f64>,
}

fn profile_parts(
    dataset: &Dataset,
    g: DMatrix<f64>,
    mean: MeanModel,
    (ell, eta): (f64, f64),
) -> Result<ProfileParts, InferenceError> {
    let n = dataset.n();
    let chol = g.cholesky().ok_or(PosteriorError::CovarianceNotPd { ell, eta })?;
    let log_det_g = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let g_inv = chol.inverse();
    let (proj, beta) = match mean {
        MeanModel::Zero => (g_inv.clone(), DVector::zeros(0)),
        MeanModel::Regression => {
            let x = dataset.x();
            let w = &g_inv * x;
            let a = x.transpose() * &w;
            let a_chol = a.cholesky().ok_or(PosteriorError::DesignDegenerate)?;
            let beta = a_chol.solve(&(w.transpose() * dataset.y()));
            let proj = &g_inv - &w * a_chol.solve(&w.transpose());
            (proj, beta)
        }
    };
    let s2 = dataset.y().dot(&(&proj * dataset.y()));
    if !(s2 > 0.0 && s2.is_finite()) || n == 0 {
        return Err(PosteriorError::NonPositiveS2(s2).into());
    }
    Ok(ProfileParts {
        g_inv,
        proj,
        log_det_g,
        s2,
        beta,
    })
}

fn covariance(k: &DMatrix<f64>, eta: f64) -> DMatrix<f64> {
    let mut g = k.clone();
    for i in 0..g.nrows() {
        g[(i, i)] += eta;
    }
    g
}

/// `½ log|G| + (n/2) log S²` with gradient and Hessian in `u = (log ℓ, log η)`.
pub fn neg_profile_eval(
    dataset: &Dataset,
    kernel: &KernelSpec,
    mean: MeanModel,
    u: HyperPoint,
) -> Result<Evaluation, InferenceError> {
    let (ell, eta) = (u.ell(), u.eta());
    if !(ell.is_finite() && ell > 0.0 && eta.is_finite() && eta > 0.0) {
        return Err(PosteriorError::InvalidPoint { ell, eta }.into());
    }
    let [k, k1, k2, _] = corr_matrix_all(kernel, ell, dataset.distances())?;
    let parts = profile_parts(dataset, covariance(&k, eta), mean, (ell, eta))?;
    let n = dataset.n() as f64;
    let s2 = parts.s2;
    let a = &parts.proj * dataset.y();

    // derivatives of G: ℓ → K̇, η → I; only ∂²G/∂ℓ² is nonzero
    let gi = &parts.g_inv;
    let gi_k1 = gi * &k1;
    let tr_first = [gi_k1.trace(), gi.trace()];
    let tr_second = [
        [trace_prod(&gi_k1, &gi_k1), trace_prod(&gi_k1, gi)],
        [0.0, trace_prod(gi, gi)],
    ];
    let k1a = &k1 * &a;
    let ds = [-a.dot(&k1a), -a.dot(&a)];
    let pk1a = &parts.proj * &k1a;
    let pa = &parts.proj * &a;
    let dds = [
        [2.0 * k1a.dot(&pk1a) - a.dot(&(&k2 * &a)), 2.0 * a.dot(&pk1a)],
        [0.0, 2.0 * a.dot(&pa)],
    ];

    let mut grad = Vector2::zeros();
    let mut hess = Matrix2::zeros();
    for i in 0..2 {
        grad[i] = 0.5 * tr_first[i] + 0.5 * n * ds[i] / s2;
        for j in i..2 {
            let second_g = if i == 0 && j == 0 { trace_prod(gi, &k2) } else { 0.0 };
            let v = 0.5 * second_g - 0.5 * tr_second[i][j]
                + 0.5 * n * (dds[i][j] / s2 - ds[i] * ds[j] / (s2 * s2));
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    let value = 0.5 * parts.log_det_g + 0.5 * n * s2.ln();
    let phi = Vector2::new(ell, eta);
    let grad_u = phi.component_mul(&grad);
    let mut hess_u = Matrix2::from_fn(|i, j| phi[i] * phi[j] * hess[(i, j)]);
    for i in 0..2 {
        hess_u[(i, i)] += grad_u[i];
    }
    Ok(Evaluation {
        value,
        gradient: DVector::from_column_slice(grad_u.as_slice()),
        hessian: DMatrix::from_column_slice(2, 2, hess_u.as_slice()),
    })
}

/// Gradient tolerance (log-parameter space) for [`ml_fit`].
pub const ML_GRAD_TOL: f64 = 1e-5;

/// Maximizes the likelihood over `(β, σ², ℓ, η)`; `β̂` is the GLS estimate and
/// `σ̂² = S²/n`. The likelihood is often flat as `η → 0`; the reported `η` is
/// then wherever the gradient first drops below [`ML_GRAD_TOL`].
pub fn ml_fit(
    dataset: &Dataset,
    kernel: &KernelSpec,
    mean: MeanModel,
) -> Result<MlFit, InferenceError> {
    let opts = TrustRegionOptions {
        grad_tol: ML_GRAD_TOL,
        ..TrustRegionOptions::default()
    };
    ml_fit_with(dataset, kernel, mean, &opts)
}

pub fn ml_fit_with(
    dataset: &Dataset,
    kernel: &KernelSpec,
    mean: MeanModel,
    opts: &TrustRegionOptions,
) -> Result<MlFit, InferenceError> {
    let objective = |v: &DVector<f64>| {
        neg_profile_eval(dataset, kernel, mean, HyperPoint::new(v[0], v[1]))
    };
    let starts: Vec<DVector<f64>> = default_starts()
        .iter()
        .map(|s| DVector::from_column_slice(s.as_slice()))
        .collect();
    let opt = minimize_multistart(objective, &starts, opts)?;
    let u = HyperPoint::new(opt.x[0], opt.x[1]);
    let [k, ..] = corr_matrix_all(kernel, u.ell(), dataset.distances())?;
    let parts = profile_parts(dataset, covariance(&k, u.eta()), mean, (u.ell(), u.eta()))?;
    let sigma2 = parts.s2 / dataset.n() as f64;
    Ok(MlFit {
        params: FullParams::new(parts.beta, sigma2, u.ell(), u.eta())?,
        u,
        mean,
        profile_value: -opt.eval.value,
        gradient_norm: opt.eval.gradient.amax(),
        converged: opt.converged(),
    })
}

/// Plug-in normal predictive `(mean, sd)` at each new location. `new_x` is
/// ignored under the zero mean.
pub fn ml_predict(
    dataset: &Dataset,
    kernel: &KernelSpec,
    fit: &MlFit,
    new_locations: &[Location],
    new_x: &DMatrix<f64>,
) -> Result<Vec<(f64, f64)>, InferenceError> {
    check_locations(dataset, new_locations)?;
    let params = &fit.params;
    if fit.mean == MeanModel::Regression && !new_locations.is_empty() {
        if new_x.ncols() != dataset.p() {
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
    }
    let [k, ..] = corr_matrix_all(kernel, params.ell, dataset.distances())?;
    let g_inv = covariance(&k, params.eta)
        .cholesky()
        .ok_or(ModelError::NotPositiveDefinite)?
        .inverse();
    let resid = match fit.mean {
        MeanModel::Zero => dataset.y().clone(),
        MeanModel::Regression => dataset.y() - dataset.x() * &params.beta,
    };
    let gi_resid = &g_inv * resid;
    Ok(new_locations
        .iter()
        .enumerate()
        .map(|(i, loc)| {
            let kv = DVector::from_iterator(
                dataset.n(),
                dataset
                    .locations()
                    .iter()
                    .map(|o| kernel.eval(loc.distance(o), params.ell)),
            );
            let trend = match fit.mean {
                MeanModel::Zero => 0.0,
                MeanModel::Regression => (new_x.row(i) * &params.beta)[(0, 0)],
            };
            let mean = trend + kv.dot(&gi_resid);
            let var = params.sigma2 * (1.0 + params.eta - kv.dot(&(&g_inv * &kv)));
            (mean, var.max(0.0).sqrt())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample20;

    fn naive_value(ds: &Dataset, kernel: &KernelSpec, mean: MeanModel, u: HyperPoint) -> f64 {
        // direct inverse, no Cholesky
        let n = ds.n();
        let mut g = DMatrix::from_fn(n, n, |i, j| {
            kernel.eval(ds.locations()[i].distance(&ds.locations()[j]), u.ell())
        });
        for i in 0..n {
            g[(i, i)] += u.eta();
        }
        let gi = g.clone().try_inverse().unwrap();
        let resid = match mean {
            MeanModel::Zero => ds.y().clone(),
            MeanModel::Regression => {
                let x = ds.x();
                let beta = (x.transpose() * &gi * x).try_inverse().unwrap() * x.transpose() * &gi * ds.y();
                ds.y() - x * beta
            }
        };
        let s2 = resid.dot(&(&gi * &resid));
        0.5 * g.determinant().ln() + 0.5 * n as f64 * s2.ln()
    }

    #[test]
    fn value_matches_naive_oracle() {
        let ds = sample20();
        let kernel = KernelSpec::squared_exponential();
        for mean in [MeanModel::Zero, MeanModel::Regression] {
            for (u1, u2) in [(-3.0, -2.0), (-2.5, -0.5), (-3.5, -4.0)] {
                let u = HyperPoint::new(u1, u2);
                let got = neg_profile_eval(&ds, &kernel, mean, u).unwrap().value;
                let want = naive_value(&ds, &kernel, mean, u);
                assert!((got - want).abs() < 1e-8 * want.abs().max(1.0), "{mean:?} {got} {want}");
            }
        }
    }

    #[test]
    fn derivatives_match_differences() {
        let ds = sample20();
        for kernel in [KernelSpec::squared_exponential(), KernelSpec::exponential()] {
            for mean in [MeanModel::Zero, MeanModel::Regression] {
                for (u1, u2) in [(-3.0, -2.0), (-2.0, 0.5), (-1.0, -1.0)] {
                    let at = |a: f64, b: f64| neg_profile_eval(&ds, &kernel, mean, HyperPoint::new(a, b)).unwrap();
                    let e = at(u1, u2);
                    let h = 1e-5;
                    for i in 0..2 {
                        let (dp, dm) = if i == 0 {
                            (at(u1 + h, u2), at(u1 - h, u2))
                        } else {
                            (at(u1, u2 + h), at(u1, u2 - h))
                        };
                        let fd = (dp.value - dm.value) / (2.0 * h);
                        assert!((fd - e.gradient[i]).abs() < 1e-5 * (1.0 + fd.abs()), "grad {i}: {fd} {}", e.gradient[i]);
                        for j in 0..2 {
                            let fd2 = (dp.gradient[j] - dm.gradient[j]) / (2.0 * h);
                            assert!(
                                (fd2 - e.hessian[(i, j)]).abs() < 1e-4 * (1.0 + fd2.abs()),
                                "hess {i}{j}: {fd2} {}",
                                e.hessian[(i, j)]
                            );
                        }
                    }
                    assert_eq!(e.hessian[(0, 1)], e.hessian[(1, 0)]);
                }
            }
        }
    }

    #[test]
    fn scale_invariance() {
        let ds = sample20();
        let kernel = KernelSpec::squared_exponential();
        let a = ml_fit(&ds, &kernel, MeanModel::Regression).unwrap();
        let scaled = ds.with_y(ds.y() * 3.0).unwrap();
        let b = ml_fit(&scaled, &kernel, MeanModel::Regression).unwrap();
        assert!((b.params.sigma2 / a.params.sigma2 - 9.0).abs() < 1e-3 * 9.0);
        assert!((b.u.u1 - a.u.u1).abs() < 1e-4);
        assert!((b.params.beta[0] / a.params.beta[0] - 3.0).abs() < 1e-3 * 3.0);
    }

    #[test]
    fn predictive_interpolates_without_noise() {
        let ds = sample20();
        let kernel = KernelSpec::squared_exponential();
        let fit = ml_fit(&ds, &kernel, MeanModel::Zero).unwrap();
        // just off a training point: mean near its response, sd small relative to σ̂
        let x0 = ds.locations()[5].coords[0];
        let out = ml_predict(&ds, &kernel, &fit, &[Location::from(x0 + 1e-7)], &DMatrix::zeros(1, 0)).unwrap();
        assert!((out[0].0 - ds.y()[5]).abs() < 1e-2);
        assert!(out[0].1 < 1e-2 * fit.params.sigma2.sqrt());
        let none = ml_predict(&ds, &kernel, &fit, &[], &DMatrix::zeros(0, 0)).unwrap();
        assert!(none.is_empty());
    }
}
