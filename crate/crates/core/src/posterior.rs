//! Negative log posterior of `(ℓ, η)` under the reference prior, with exact
//! gradient and Hessian.
//!
//! With `G = ηI + K(ℓ)`, `A = XᵀG⁻¹X`, `R = G⁻¹ − G⁻¹XA⁻¹XᵀG⁻¹` and
//! `S² = yᵀRy`, the objective in `u = (log ℓ, log η)` is
//!
//! ```text
//! f(u) = ½ log|G| + ½ log|A| + ((n−p)/2) log S² − ½ log|Σ(ℓ, η)| − u₁ − u₂
//! ```
//!
//! where `Σ` is the 3×3 trace matrix built from `R` and `K̇ = ∂K/∂ℓ`.
//!
//! The reference prior is `π(β, σ², ℓ, η) ∝ σ⁻² |Σ|^{1/2}`. Its `σ⁻²` factor
//! and the flat `β` block are consumed by integrating `β` and `σ²` out of the
//! likelihood analytically, so they must not be added to `f` again.
//!
//! Factorization path: `G = L Lᵀ` (Cholesky), `L⁻¹X = Q R_A` (thin QR), so
//! `A = R_AᵀR_A` and, with `F = R_A⁻ᵀ XᵀG⁻¹`, the projection term is `H = FᵀF`
//! and `R = G⁻¹ − FᵀF`. Log-determinants come from factor diagonals.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2};
use thiserror::Error;

use crate::linalg::{opt_trace, sym_sum, trace_prod, Factor};
use crate::model::{corr_matrix_all, Dataset, KernelSpec, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PosteriorError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("hyperparameters must be finite and positive (ell = {ell}, eta = {eta})")]
    InvalidPoint { ell: f64, eta: f64 },
    #[error("G = eta*I + K(ell) is not numerically positive definite (ell = {ell}, eta = {eta})")]
    CovarianceNotPd { ell: f64, eta: f64 },
    #[error("whitened design L^-1 X is rank deficient")]
    DesignDegenerate,
    #[error("S^2 = y'Ry is not positive ({0})")]
    NonPositiveS2(f64),
    #[error("reference-prior matrix Sigma is not positive definite")]
    SigmaNotPd,
}

/// `u = (log ℓ, log η)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperPoint {
    pub u1: f64,
    pub u2: f64,
}

impl HyperPoint {
    pub fn new(u1: f64, u2: f64) -> Self {
        Self { u1, u2 }
    }

    pub fn from_params(ell: f64, eta: f64) -> Self {
        Self {
            u1: ell.ln(),
            u2: eta.ln(),
        }
    }

    pub fn ell(&self) -> f64 {
        self.u1.exp()
    }

    pub fn eta(&self) -> f64 {
        self.u2.exp()
    }

    pub fn as_vector(&self) -> Vector2<f64> {
        Vector2::new(self.u1, self.u2)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self { u1: v[0], u2: v[1] }
    }
}

/// Value, gradient and Hessian with respect to `u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorEval {
    pub value: f64,
    pub gradient: Vector2<f64>,
    pub hessian: Matrix2<f64>,
}

/// Which objective to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `f(u)`: integrated likelihood, reference prior, and the `exp`
    /// reparameterization Jacobian.
    ReferencePosterior,
    /// Negative log integrated likelihood only (restricted likelihood).
    IntegratedLikelihood,
}

/// Factorizations and derived matrices at a fixed `(ℓ, η)`.
#[derive(Debug, Clone)]
pub struct PosteriorWorkspace {
    n: usize,
    p: usize,
    pub ell: f64,
    pub eta: f64,
    /// Lower Cholesky factor of `G`.
    pub l_g: DMatrix<f64>,
    /// Upper triangular factor of the QR of `L⁻¹X`.
    pub r_a: DMatrix<f64>,
    pub g_inv: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub s2: f64,
    pub a_inv: DMatrix<f64>,
    pub sigma: Matrix3<f64>,
    pub beta_bar: DVector<f64>,
    pub log_det_g: f64,
    pub log_det_a: f64,
    /// `K, ∂K/∂ℓ, ∂²K/∂ℓ², ∂³K/∂ℓ³`.
    kmats: [DMatrix<f64>; 4],
    /// `F = R_A⁻ᵀ XᵀG⁻¹` (p×n).
    f_h: DMatrix<f64>,
    /// `G⁻¹X` (n×p).
    gi_x: DMatrix<f64>,
    /// `R K̇`.
    r_kdot: DMatrix<f64>,
    y: DVector<f64>,
}

impl PosteriorWorkspace {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// `H = G⁻¹XA⁻¹XᵀG⁻¹ = FᵀF`.
    pub fn h(&self) -> DMatrix<f64> {
        self.f_h.transpose() * &self.f_h
    }

    pub fn kdot(&self) -> &DMatrix<f64> {
        &self.kmats[1]
    }
}

pub fn build_workspace(
    dataset: &Dataset,
    kernel: &KernelSpec,
    ell: f64,
    eta: f64,
) -> Result<PosteriorWorkspace, PosteriorError> {
    if !(ell > 0.0 && ell.is_finite() && eta > 0.0 && eta.is_finite()) {
        return Err(PosteriorError::InvalidPoint { ell, eta });
    }
    let n = dataset.n();
    let p = dataset.p();
    let x = dataset.x();
    let y = dataset.y();
    let kmats = corr_matrix_all(kernel, ell, dataset.distances())?;

    let mut g = kmats[0].clone();
    for i in 0..n {
        g[(i, i)] += eta;
    }
    let chol = g
        .cholesky()
        .ok_or(PosteriorError::CovarianceNotPd { ell, eta })?;
    let l_g = chol.l();
    let log_det_g = 2.0 * l_g.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let g_inv = chol.inverse();

    let whitened = l_g
        .solve_lower_triangular(x)
        .ok_or(PosteriorError::CovarianceNotPd { ell, eta })?;
    let r_a = whitened.qr().r();
    let diag: Vec<f64> = r_a.diagonal().iter().map(|d| d.abs()).collect();
    let dmax = diag.iter().cloned().fold(0.0, f64::max);
    if !(dmax > 0.0) || diag.iter().any(|&d| d <= dmax * 1e-13) {
        return Err(PosteriorError::DesignDegenerate);
    }
    let log_det_a = 2.0 * diag.iter().map(|d| d.ln()).sum::<f64>();

    let gi_x = &g_inv * x;
    let f_h = r_a
        .transpose()
        .solve_lower_triangular(&gi_x.transpose())
        .ok_or(PosteriorError::DesignDegenerate)?;
    let mut r = &g_inv - f_h.transpose() * &f_h;
    r = (&r + r.transpose()) * 0.5;

    let s2 = (y.transpose() * &r * y)[(0, 0)];
    let y_scale = (y.transpose() * &g_inv * y)[(0, 0)];
    if !(s2 > 1e-12 * y_scale) || !s2.is_finite() {
        return Err(PosteriorError::NonPositiveS2(s2));
    }

    let r_a_inv = r_a
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or(PosteriorError::DesignDegenerate)?;
    let a_inv = &r_a_inv * r_a_inv.transpose();
    let beta_bar = &a_inv * (gi_x.transpose() * y);

    let r_kdot = &r * &kmats[1];
    let sigma = assemble_sigma(&r, &r_kdot, n, p);

    Ok(PosteriorWorkspace {
        n,
        p,
        ell,
        eta,
        l_g,
        r_a,
        g_inv,
        r,
        s2,
        a_inv,
        sigma,
        beta_bar,
        log_det_g,
        log_det_a,
        kmats,
        f_h,
        gi_x,
        r_kdot,
        y: y.clone(),
    })
}

fn assemble_sigma(r: &DMatrix<f64>, r_kdot: &DMatrix<f64>, n: usize, p: usize) -> Matrix3<f64> {
    let s11 = trace_prod(r_kdot, r_kdot);
    let s12 = trace_prod(r, r_kdot);
    let s13 = r_kdot.trace();
    let s22 = trace_prod(r, r);
    let s23 = r.trace();
    let s33 = (n - p) as f64;
    Matrix3::new(s11, s12, s13, s12, s22, s23, s13, s23, s33)
}

/// `½ log|G| + ½ log|XᵀG⁻¹X| + ((n−p)/2) log S²`.
pub fn neg_log_integrated_likelihood(ws: &PosteriorWorkspace) -> f64 {
    0.5 * ws.log_det_g + 0.5 * ws.log_det_a + 0.5 * (ws.n - ws.p) as f64 * ws.s2.ln()
}

/// `−½ log|Σ(ℓ, η)|`.
pub fn neg_log_reference_prior(ws: &PosteriorWorkspace) -> Result<f64, PosteriorError> {
    neg_half_log_det3(&ws.sigma)
}

pub(crate) fn neg_half_log_det3(sigma: &Matrix3<f64>) -> Result<f64, PosteriorError> {
    let chol = sigma.cholesky().ok_or(PosteriorError::SigmaNotPd)?;
    let l = chol.l();
    let v = -(0..3).map(|i| l[(i, i)].ln()).sum::<f64>();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(PosteriorError::SigmaNotPd)
    }
}

/// `f(u)`, the negative log of the reparameterized posterior (up to a constant).
pub fn f_value(
    dataset: &Dataset,
    kernel: &KernelSpec,
    u: HyperPoint,
) -> Result<f64, PosteriorError> {
    objective_value(dataset, kernel, u, Objective::ReferencePosterior)
}

pub fn objective_value(
    dataset: &Dataset,
    kernel: &KernelSpec,
    u: HyperPoint,
    objective: Objective,
) -> Result<f64, PosteriorError> {
    let ws = build_workspace(dataset, kernel, u.ell(), u.eta())?;
    value_from_workspace(&ws, u, objective)
}

pub(crate) fn value_from_workspace(
    ws: &PosteriorWorkspace,
    u: HyperPoint,
    objective: Objective,
) -> Result<f64, PosteriorError> {
    let il = neg_log_integrated_likelihood(ws);
    match objective {
        Objective::IntegratedLikelihood => Ok(il),
        Objective::ReferencePosterior => Ok(il + neg_log_reference_prior(ws)? - u.u1 - u.u2),
    }
}

/// Value, gradient and Hessian of `f` with respect to `u`.
///
/// When `ℓ` is large against the spread of the locations `Σ` is nearly
/// singular and the prior's Hessian loses digits (condition numbers past
/// ~1e9 leave it unreliable).
pub fn f_eval_full(
    dataset: &Dataset,
    kernel: &KernelSpec,
    u: HyperPoint,
) -> Result<PosteriorEval, PosteriorError> {
    objective_eval_full(dataset, kernel, u, Objective::ReferencePosterior)
}

pub fn objective_eval_full(
    dataset: &Dataset,
    kernel: &KernelSpec,
    u: HyperPoint,
    objective: Objective,
) -> Result<PosteriorEval, PosteriorError> {
    let ws = build_workspace(dataset, kernel, u.ell(), u.eta())?;
    let value = value_from_workspace(&ws, u, objective)?;
    let (grad_phi, hess_phi) = phi_derivatives(&ws, dataset.x(), objective)?;

    // chain rule through φ = exp(u); the Jacobian term −u₁ − u₂ adds −1 per component
    let phi = [ws.ell, ws.eta];
    let jac = match objective {
        Objective::ReferencePosterior => 1.0,
        Objective::IntegratedLikelihood => 0.0,
    };
    let mut gradient = Vector2::zeros();
    let mut hessian = Matrix2::zeros();
    for s in 0..2 {
        gradient[s] = phi[s] * grad_phi[s] - jac;
        for t in 0..2 {
            hessian[(s, t)] = phi[s] * phi[t] * hess_phi[(s, t)];
        }
        hessian[(s, s)] += phi[s] * grad_phi[s];
    }
    hessian = (hessian + hessian.transpose()) * 0.5;
    Ok(PosteriorEval {
        value,
        gradient,
        hessian,
    })
}

/// First-order pieces for one hyperparameter `φ_s`.
struct FirstOrder {
    /// `G⁻¹Ġ`
    gi_gdot: DMatrix<f64>,
    /// `∂G⁻¹ = −G⁻¹ĠG⁻¹`
    gi_dot: DMatrix<f64>,
    /// `Ġ G⁻¹X`
    gdot_w: DMatrix<f64>,
    /// `Ȧ = −XᵀG⁻¹ĠG⁻¹X`
    a_dot: DMatrix<f64>,
    /// `U = M Ġ Fᵀ`, with `M = G⁻¹ − ½H`
    u: DMatrix<f64>,
    /// `Ḣ = −(U F + Fᵀ Uᵀ)`
    h_dot: DMatrix<f64>,
    /// `Ṙ = ∂G⁻¹ − Ḣ`
    r_dot: DMatrix<f64>,
    s2_dot: f64,
    /// `Ṙ K̇`
    r_dot_kdot: DMatrix<f64>,
    /// `R ∂K̇/∂φ_s`
    r_kdd: Option<DMatrix<f64>>,
    /// `∂(R K̇)/∂φ_s`
    p_dot: DMatrix<f64>,
    sigma_dot: Matrix3<f64>,
}

fn phi_derivatives(
    ws: &PosteriorWorkspace,
    x: &DMatrix<f64>,
    objective: Objective,
) -> Result<(Vector2<f64>, Matrix2<f64>), PosteriorError> {
    let n = ws.n;
    let np = (ws.n - ws.p) as f64;
    let gi = &ws.g_inv;
    let r = &ws.r;
    let f = &ws.f_h;
    let ft = f.transpose();
    let w = &ws.gi_x;
    let y = &ws.y;
    let s2 = ws.s2;
    let [_, kd, kdd, kddd] = &ws.kmats;
    let h = &ft * f;
    let m = gi - &h * 0.5;
    let p_mat = &ws.r_kdot;
    let p_sym = sym_sum(p_mat);
    let with_prior = objective == Objective::ReferencePosterior;

    // ∂G/∂φ and ∂K̇/∂φ for φ = (ℓ, η)
    let gdot = [Factor::Dense(kd), Factor::Identity];
    let kdot_d = [Factor::Dense(kdd), Factor::Zero];
    let g2 = |s: usize, t: usize| {
        if s == 0 && t == 0 {
            Factor::Dense(kdd)
        } else {
            Factor::Zero
        }
    };
    let k3 = |s: usize, t: usize| {
        if s == 0 && t == 0 {
            Factor::Dense(kddd)
        } else {
            Factor::Zero
        }
    };

    let first: Vec<FirstOrder> = (0..2)
        .map(|s| {
            let gd = gdot[s];
            let gi_gdot = gd.right_of(gi).expect("nonzero");
            let gi_dot = -(&gi_gdot * gi);
            let gdot_w = gd.left_of(w).expect("nonzero");
            let a_dot = -(w.transpose() * &gdot_w);
            let gdot_ft = gd.left_of(&ft).expect("nonzero");
            let u = &m * &gdot_ft;
            let uf = &u * f;
            let h_dot = -sym_sum(&uf);
            let mut r_dot = &gi_dot - &h_dot;
            r_dot = (&r_dot + r_dot.transpose()) * 0.5;
            let s2_dot = (y.transpose() * &r_dot * y)[(0, 0)];
            let r_dot_kdot = &r_dot * kd;
            let r_kdd = kdot_d[s].right_of(r);
            let p_dot = match &r_kdd {
                Some(rk) => &r_dot_kdot + rk,
                None => r_dot_kdot.clone(),
            };
            let s11 = 2.0 * trace_prod(p_mat, &p_dot);
            let s12 = trace_prod(&r_dot, &p_sym) + opt_trace(&r_kdd, r);
            let s13 = p_dot.trace();
            let s22 = 2.0 * trace_prod(&r_dot, r);
            let s23 = r_dot.trace();
            let sigma_dot = Matrix3::new(s11, s12, s13, s12, s22, s23, s13, s23, 0.0);
            FirstOrder {
                gi_gdot,
                gi_dot,
                gdot_w,
                a_dot,
                u,
                h_dot,
                r_dot,
                s2_dot,
                r_dot_kdot,
                r_kdd,
                p_dot,
                sigma_dot,
            }
        })
        .collect();

    let sigma_inv = if with_prior {
        Some(ws.sigma.try_inverse().ok_or(PosteriorError::SigmaNotPd)?)
    } else {
        None
    };

    let mut grad = Vector2::zeros();
    for (s, fo) in first.iter().enumerate() {
        let t1 = 0.5 * fo.gi_gdot.trace();
        let t2 = 0.5 * trace_prod(&ws.a_inv, &fo.a_dot);
        let t3 = 0.5 * np * fo.s2_dot / s2;
        let t4 = sigma_inv.map_or(0.0, |si| 0.5 * (si * fo.sigma_dot).trace());
        grad[s] = t1 + t2 + t3 - t4;
    }

    // products shared by the second-order Σ terms
    let kd_p = kd * p_mat;
    let p_r = p_mat * r;
    let rr = r * r;

    let mut hess = Matrix2::zeros();
    for s in 0..2 {
        for t in s..2 {
            let (fs, ft_) = (&first[s], &first[t]);
            let g2st = g2(s, t);
            let k3st = k3(s, t);

            // ∂²/∂φ_s∂φ_t of ½ log|G|
            let t1 = 0.5 * (-trace_prod(&fs.gi_gdot, &ft_.gi_gdot) + g2st.trace_with(gi));

            // ∂²G⁻¹ = B + Bᵀ − G⁻¹G̈G⁻¹,  B = G⁻¹Ġ_s G⁻¹Ġ_t G⁻¹
            let b = -(&fs.gi_gdot * &ft_.gi_dot);
            let mut gi_dd = sym_sum(&b);
            let gi_g2 = g2st.right_of(gi);
            if let Some(gg) = &gi_g2 {
                gi_dd -= gg * gi;
            }

            // Ä = XᵀG̈⁻¹X, assembled from p-column blocks
            let vgv = fs.gdot_w.transpose() * gi * &ft_.gdot_w;
            let mut a_dd = sym_sum(&vgv);
            if let Some(g2w) = g2st.left_of(w) {
                a_dd -= w.transpose() * g2w;
            }
            let _ = x;
            let t2 = 0.5
                * (-trace_prod(&(&ws.a_inv * &fs.a_dot), &(&ws.a_inv * &ft_.a_dot))
                    + trace_prod(&ws.a_inv, &a_dd));

            // Ḧ = D2H1 + D2H2 + D2H3
            let n_s = &fs.gi_dot - &fs.h_dot * 0.5;
            let gdt_ft = gdot[t].left_of(&ft).expect("nonzero");
            let q1 = (&n_s * &gdt_ft) * f;
            let mgt_us = &m * gdot[t].left_of(&fs.u).expect("nonzero");
            let q2 = -(&mgt_us * f) - &ft_.u * fs.u.transpose();
            let mut h_dd = -(sym_sum(&q1) + sym_sum(&q2));
            if let Some(g2ft) = g2st.left_of(&ft) {
                let q3 = (&m * g2ft) * f;
                h_dd -= sym_sum(&q3);
            }

            let mut r_dd = gi_dd - h_dd;
            r_dd = (&r_dd + r_dd.transpose()) * 0.5;
            let s2_dd = (y.transpose() * &r_dd * y)[(0, 0)];
            let t3 = 0.5 * np * (-fs.s2_dot * ft_.s2_dot / (s2 * s2) + s2_dd / s2);

            let t4 = if let Some(si) = sigma_inv {
                let kdd_t_p = kdot_d[t].left_of(p_mat);
                let kdd_s_p = kdot_d[s].left_of(p_mat);
                let e11 = 2.0
                    * (trace_prod(&fs.p_dot, &ft_.p_dot)
                        + trace_prod(&r_dd, &kd_p)
                        + opt_trace(&kdd_t_p, &fs.r_dot)
                        + opt_trace(&kdd_s_p, &ft_.r_dot)
                        + k3st.trace_with(&p_r));
                let r2dot_kdd = |r_dot: &DMatrix<f64>, other: &Option<DMatrix<f64>>| {
                    other
                        .as_ref()
                        .map_or(0.0, |rk| trace_prod(r_dot, &sym_sum(rk)))
                };
                let e12 = trace_prod(&r_dd, &p_sym)
                    + trace_prod(&fs.r_dot, &ft_.r_dot_kdot)
                    + trace_prod(&ft_.r_dot, &fs.r_dot_kdot)
                    + r2dot_kdd(&fs.r_dot, &ft_.r_kdd)
                    + r2dot_kdd(&ft_.r_dot, &fs.r_kdd)
                    + k3st.trace_with(&rr);
                let e13 = trace_prod(&r_dd, kd)
                    + kdot_d[t].trace_with(&fs.r_dot)
                    + kdot_d[s].trace_with(&ft_.r_dot)
                    + k3st.trace_with(r);
                let e22 = 2.0 * trace_prod(&r_dd, r) + 2.0 * trace_prod(&fs.r_dot, &ft_.r_dot);
                let e23 = r_dd.trace();
                let sigma_dd = Matrix3::new(e11, e12, e13, e12, e22, e23, e13, e23, 0.0);
                0.5 * (-(si * fs.sigma_dot * si * ft_.sigma_dot).trace()
                    + (si * sigma_dd).trace())
            } else {
                0.0
            };

            hess[(s, t)] = t1 + t2 + t3 - t4;
            hess[(t, s)] = hess[(s, t)];
        }
    }
    debug_assert_eq!(n, ws.r.nrows());
    Ok((grad, hess))
}
