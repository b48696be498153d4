//! Trust-region Newton minimization with an exact subproblem solver.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("objective could not be evaluated at the starting point: {0}")]
    InitialEvaluation(String),
    #[error("objective is not finite at the starting point")]
    NonFiniteStart,
    #[error("trust radius must be positive and finite, got {0}")]
    BadRadius(f64),
    #[error("gradient and Hessian dimensions disagree")]
    Dimension,
    #[error("no starting points supplied")]
    NoStarts,
}

/// Objective value with first and second derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

impl Evaluation {
    fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.gradient.iter().all(|v| v.is_finite())
            && self.hessian.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubproblemSolution {
    pub step: DVector<f64>,
    /// Lagrange multiplier of the norm constraint.
    pub lambda: f64,
    pub hard_case: bool,
}

/// Solves `min gᵀs + ½ sᵀHs` subject to `‖s‖ ≤ radius`.
///
/// Works in the eigenbasis of `H` and runs a safeguarded Newton iteration on
/// `1/‖s(λ)‖ − 1/radius`.
pub fn solve_subproblem(
    g: &DVector<f64>,
    h: &DMatrix<f64>,
    radius: f64,
) -> Result<SubproblemSolution, OptimizerError> {
    let n = g.len();
    if h.nrows() != n || h.ncols() != n {
        return Err(OptimizerError::Dimension);
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(OptimizerError::BadRadius(radius));
    }
    let hs = (h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(hs);
    let q = &eig.eigenvectors;
    let lam = &eig.eigenvalues;
    let gh = q.transpose() * g;
    let lam_min = lam.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = lam.amax().max(g.norm()).max(1e-300);

    let step_at = |shift: f64, skip: &dyn Fn(usize) -> bool| -> DVector<f64> {
        let mut coef = DVector::zeros(n);
        for i in 0..n {
            if !skip(i) {
                coef[i] = -gh[i] / (lam[i] + shift);
            }
        }
        q * coef
    };

    // interior Newton step
    if lam_min > 0.0 {
        let s = step_at(0.0, &|_| false);
        if s.norm() <= radius {
            return Ok(SubproblemSolution {
                step: s,
                lambda: 0.0,
                hard_case: false,
            });
        }
    }

    let lo = (-lam_min).max(0.0);
    let degenerate_tol = 1e-12 * scale;
    let in_min_space = |i: usize| lam[i] - lam_min <= degenerate_tol;
    let g_min2: f64 = (0..n)
        .filter(|&i| in_min_space(i))
        .map(|i| gh[i] * gh[i])
        .sum();

    if g_min2.sqrt() <= 1e-10 * g.norm().max(1e-300) && lam_min <= 0.0 {
        let s0 = step_at(lo, &in_min_space);
        let s0n = s0.norm();
        if s0n < radius {
            // hard case: move along the leftmost eigenvector to the boundary
            let idx = (0..n).find(|&i| in_min_space(i))
                .expect("minimum eigenvalue index");
            let z = q.column(idx).into_owned();
            let zs = z.dot(&s0);
            let tau = -zs + (zs * zs + radius * radius - s0n * s0n).sqrt();
            return Ok(SubproblemSolution {
                step: s0 + z * tau,
                lambda: lo,
                hard_case: true,
            });
        }
    }

    // boundary solution, λ in (lo, hi]
    let norm_at = |shift: f64| -> (f64, f64) {
        let mut s2 = 0.0;
        let mut ds2 = 0.0;
        for i in 0..n {
            let d = lam[i] + shift;
            s2 += gh[i] * gh[i] / (d * d);
            ds2 += gh[i] * gh[i] / (d * d * d);
        }
        (s2.sqrt(), ds2)
    };
    let mut a = lo;
    let mut b = lo + g.norm() / radius + degenerate_tol;
    let mut shift = if lo > 0.0 || lam_min <= 0.0 {
        lo + 1e-10 * scale.max(1.0)
    } else {
        lo
    };
    shift = shift.min(b);
    for _ in 0..200 {
        let (sn, ds2) = norm_at(shift);
        if !sn.is_finite() {
            a = shift;
            shift = 0.5 * (a + b);
            continue;
        }
        if (sn - radius).abs() <= 1e-12 * radius {
            break;
        }
        if sn > radius {
            a = shift;
        } else {
            b = shift;
        }
        let phi = 1.0 / sn - 1.0 / radius;
        let dphi = ds2 / (sn * sn * sn);
        let mut next = shift - phi / dphi;
        if !(next > a && next < b) || !next.is_finite() {
            next = 0.5 * (a + b);
        }
        if (next - shift).abs() <= 1e-16 * shift.abs().max(1e-300) {
            break;
        }
        shift = next;
    }
    Ok(SubproblemSolution {
        step: step_at(shift, &|_| false),
        lambda: shift,
        hard_case: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustRegionOptions {
    pub initial_radius: f64,
    pub max_radius: f64,
    pub grad_tol: f64,
    /// Total number of subproblem solves.
    pub max_iters: usize,
}

impl Default for TrustRegionOptions {
    fn default() -> Self {
        Self {
            initial_radius: 1.0,
            max_radius: 100.0,
            grad_tol: 1e-8,
            max_iters: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Small gradient at a positive definite Hessian.
    Converged,
    MaxIterations,
    /// Trust radius collapsed or no further predicted decrease.
    Stalled,
    /// A trial point produced NaN.
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub x: DVector<f64>,
    pub eval: Evaluation,
    pub iterations: usize,
    pub termination: Termination,
}

impl OptimizeResult {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }
}

fn is_pd(h: &DMatrix<f64>) -> bool {
    h.clone().cholesky().is_some()
}

/// Minimizes `objective` from `x0`.
///
/// Evaluation errors at trial points shrink the radius like a rejected step.
pub fn minimize<F, E>(
    mut objective: F,
    x0: &DVector<f64>,
    opts: &TrustRegionOptions,
) -> Result<OptimizeResult, OptimizerError>
where
    F: FnMut(&DVector<f64>) -> Result<Evaluation, E>,
    E: std::fmt::Display,
{
    if !(opts.initial_radius > 0.0 && opts.initial_radius.is_finite()) {
        return Err(OptimizerError::BadRadius(opts.initial_radius));
    }
    let mut x = x0.clone();
    let mut cur = objective(&x).map_err(|e| OptimizerError::InitialEvaluation(e.to_string()))?;
    if !cur.is_finite() {
        return Err(OptimizerError::NonFiniteStart);
    }
    if cur.gradient.len() != x.len() {
        return Err(OptimizerError::Dimension);
    }
    let mut radius = opts.initial_radius;
    let mut iterations = 0;
    let termination = loop {
        if cur.gradient.amax() <= opts.grad_tol && is_pd(&cur.hessian) {
            break Termination::Converged;
        }
        if iterations >= opts.max_iters {
            break Termination::MaxIterations;
        }
        iterations += 1;
        let sub = solve_subproblem(&cur.gradient, &cur.hessian, radius)?;
        let s = sub.step;
        let snorm = s.norm();
        let predicted = -(cur.gradient.dot(&s) + 0.5 * s.dot(&(&cur.hessian * &s)));
        if !(predicted > 0.0) || snorm <= 1e-15 * x.norm().max(1.0) {
            break Termination::Stalled;
        }
        let trial_x = &x + &s;
        let trial = objective(&trial_x);
        let (rho, trial) = match trial {
            Ok(ev) if ev.value.is_nan() => break Termination::NonFinite,
            Ok(ev) if ev.is_finite() => ((cur.value - ev.value) / predicted, Some(ev)),
            Ok(ev) if ev.value == f64::NEG_INFINITY => break Termination::NonFinite,
            _ => (f64::NEG_INFINITY, None),
        };
        log::trace!("iter {iterations}: f = {}, rho = {rho:.3}, radius = {radius:.3e}", cur.value);
        if rho < 0.25 {
            radius = 0.25 * snorm.min(radius);
        } else if rho > 0.75 && snorm >= 0.99 * radius {
            radius = (2.0 * radius).min(opts.max_radius);
        }
        if rho > 0.25 {
            if let Some(ev) = trial {
                x = trial_x;
                cur = ev;
            }
        }
        if radius < 1e-14 * x.norm().max(1.0) {
            break Termination::Stalled;
        }
    };
    Ok(OptimizeResult {
        x,
        eval: cur,
        iterations,
        termination,
    })
}

/// Runs [`minimize`] from each start and returns the best result, preferring
/// converged runs. Starts whose initial evaluation fails are skipped.
pub fn minimize_multistart<F, E>(
    mut objective: F,
    starts: &[DVector<f64>],
    opts: &TrustRegionOptions,
) -> Result<OptimizeResult, OptimizerError>
where
    F: FnMut(&DVector<f64>) -> Result<Evaluation, E>,
    E: std::fmt::Display,
{
    if starts.is_empty() {
        return Err(OptimizerError::NoStarts);
    }
    let mut best: Option<OptimizeResult> = None;
    let mut last_err = None;
    for x0 in starts {
        match minimize(&mut objective, x0, opts) {
            Ok(res) => {
                let better = match &best {
                    None => true,
                    Some(b) => match (res.converged(), b.converged()) {
                        (true, false) => true,
                        (false, true) => false,
                        _ => res.eval.value < b.eval.value,
                    },
                };
                if better {
                    best = Some(res);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or(OptimizerError::NoStarts))
}
