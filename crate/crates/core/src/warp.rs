//! Level-set brackets along Hessian eigenvectors and the monotone cubic warps
//! that map `[0, 1]` onto them.

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use thiserror::Error;

/// Largest distance searched along a direction before declaring a flat tail.
pub const MAX_EXTENT: f64 = 50.0;
/// Residual tolerance on the level-set equation.
pub const ROOT_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WarpError {
    #[error("eps must lie in (0, 1), got {0}")]
    BadEps(f64),
    #[error("objective did not rise by log(1/eps) within distance {0} of the mode")]
    FlatTail(f64),
    #[error("objective could not be evaluated at the mode: {0}")]
    ModeEvaluation(String),
    #[error("degenerate bracket (a = {a}, b = {b})")]
    DegenerateBracket { a: f64, b: f64 },
    #[error("warp argument {0} outside [0, 1]")]
    OutOfDomain(f64),
    #[error("direction must be a finite nonzero vector")]
    BadDirection,
}

/// Signed distances `a < 0 < b` along a direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracket {
    a: f64,
    b: f64,
}

impl Bracket {
    pub fn new(a: f64, b: f64) -> Result<Self, WarpError> {
        if a < 0.0 && b > 0.0 && a.is_finite() && b.is_finite() {
            Ok(Self { a, b })
        } else {
            Err(WarpError::DegenerateBracket { a, b })
        }
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }
}

/// Eigen-decomposition of a symmetric 2×2 Hessian, eigenvalues descending and
/// each eigenvector oriented so its first nonzero component is positive.
pub fn principal_axes(hessian: &Matrix2<f64>) -> ([f64; 2], [Vector2<f64>; 2]) {
    let sym = (hessian + hessian.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order = [0usize, 1];
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let vals = [eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]];
    let vecs = order.map(|i| {
        let mut v: Vector2<f64> = eig.eigenvectors.column(i).into_owned();
        v /= v.norm();
        let lead = if v[0].abs() > 1e-14 { v[0] } else { v[1] };
        if lead < 0.0 {
            v = -v;
        }
        v
    });
    (vals, vecs)
}

/// Finds `t > 0` with `rise(t) = level`, given `rise(0) = 0`.
///
/// Failed evaluations count as lying above the level.
fn level_crossing<F, E>(mut rise: F, level: f64) -> Result<f64, WarpError>
where
    F: FnMut(f64) -> Result<f64, E>,
{
    let mut eval = |t: f64| -> f64 {
        match rise(t) {
            Ok(v) if !v.is_nan() => v - level,
            _ => f64::INFINITY,
        }
    };
    let (mut lo, mut h_lo) = (0.0, -level);
    let mut hi = 1.0;
    let mut h_hi = eval(hi);
    while h_hi < 0.0 {
        lo = hi;
        h_lo = h_hi;
        if hi >= MAX_EXTENT {
            return Err(WarpError::FlatTail(MAX_EXTENT));
        }
        hi = (2.0 * hi).min(MAX_EXTENT);
        h_hi = eval(hi);
    }
    if h_hi == 0.0 {
        return Ok(hi);
    }

    // Illinois false position, with bisection while the upper end is infinite
    let mut side = 0i8;
    for _ in 0..200 {
        let t = if h_hi.is_finite() {
            let t = (lo * h_hi - hi * h_lo) / (h_hi - h_lo);
            if t > lo && t < hi {
                t
            } else {
                0.5 * (lo + hi)
            }
        } else {
            0.5 * (lo + hi)
        };
        let h = eval(t);
        if h.abs() <= ROOT_TOL {
            return Ok(t);
        }
        if h < 0.0 {
            lo = t;
            h_lo = h;
            if side == -1 && h_hi.is_finite() {
                h_hi *= 0.5;
            }
            side = -1;
        } else {
            hi = t;
            h_hi = h;
            if side == 1 {
                h_lo *= 0.5;
            }
            side = 1;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
    }
    // unresolved: keep the side that could be evaluated
    Ok(if h_hi.is_finite() && h_hi.abs() < h_lo.abs() { hi } else { lo })
}

/// Distances along `v` from `u_map` at which `f` rises by `log(1/eps)`.
pub fn bracket_direction<F, E>(
    mut f: F,
    u_map: &Vector2<f64>,
    v: &Vector2<f64>,
    eps: f64,
) -> Result<Bracket, WarpError>
where
    F: FnMut(&Vector2<f64>) -> Result<f64, E>,
    E: std::fmt::Display,
{
    if !(eps > 0.0 && eps < 1.0) {
        return Err(WarpError::BadEps(eps));
    }
    let norm = v.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(WarpError::BadDirection);
    }
    let dir = v / norm;
    let f0 = f(u_map).map_err(|e| WarpError::ModeEvaluation(e.to_string()))?;
    if !f0.is_finite() {
        return Err(WarpError::ModeEvaluation(format!("value {f0}")));
    }
    let level = (1.0 / eps).ln();
    let b = level_crossing(|t| f(&(u_map + dir * t)).map(|v| v - f0), level)?;
    let a = -level_crossing(|t| f(&(u_map - dir * t)).map(|v| v - f0), level)?;
    Bracket::new(a, b)
}

/// Monotone piecewise-cubic Hermite interpolant through `(0, a)`, `(0.5, 0)`,
/// `(1, b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotoneCubic {
    values: [f64; 3],
    slopes: [f64; 3],
}

const KNOTS: [f64; 3] = [0.0, 0.5, 1.0];

impl MonotoneCubic {
    pub fn fit(bracket: &Bracket) -> Self {
        let values = [bracket.a, 0.0, bracket.b];
        let secants = [
            (values[1] - values[0]) / 0.5,
            (values[2] - values[1]) / 0.5,
        ];
        let mut slopes = [secants[0], 0.5 * (secants[0] + secants[1]), secants[1]];
        for (k, &d) in secants.iter().enumerate() {
            let alpha = slopes[k] / d;
            let beta = slopes[k + 1] / d;
            let r2 = alpha * alpha + beta * beta;
            if r2 > 9.0 {
                let tau = 3.0 / r2.sqrt();
                slopes[k] = tau * alpha * d;
                slopes[k + 1] = tau * beta * d;
            }
        }
        Self { values, slopes }
    }

    pub fn a(&self) -> f64 {
        self.values[0]
    }

    pub fn b(&self) -> f64 {
        self.values[2]
    }

    pub fn slopes(&self) -> [f64; 3] {
        self.slopes
    }

    fn segment(x: f64) -> usize {
        if x < 0.5 {
            0
        } else {
            1
        }
    }

    fn check(x: f64) -> Result<(), WarpError> {
        if (0.0..=1.0).contains(&x) {
            Ok(())
        } else {
            Err(WarpError::OutOfDomain(x))
        }
    }

    fn eval_unchecked(&self, x: f64) -> f64 {
        let k = Self::segment(x);
        let h = 0.5;
        let t = (x - KNOTS[k]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.values[k]
            + h * h10 * self.slopes[k]
            + h01 * self.values[k + 1]
            + h * h11 * self.slopes[k + 1]
    }

    fn deriv_unchecked(&self, x: f64) -> f64 {
        let k = Self::segment(x);
        let h = 0.5;
        let t = (x - KNOTS[k]) / h;
        let t2 = t * t;
        let d00 = 6.0 * t2 - 6.0 * t;
        let d10 = 3.0 * t2 - 4.0 * t + 1.0;
        let d01 = -6.0 * t2 + 6.0 * t;
        let d11 = 3.0 * t2 - 2.0 * t;
        (d00 * self.values[k] + d01 * self.values[k + 1]) / h
            + d10 * self.slopes[k]
            + d11 * self.slopes[k + 1]
    }

    pub fn eval(&self, x: f64) -> Result<f64, WarpError> {
        Self::check(x)?;
        Ok(self.eval_unchecked(x))
    }

    pub fn deriv(&self, x: f64) -> Result<f64, WarpError> {
        Self::check(x)?;
        Ok(self.deriv_unchecked(x).max(0.0))
    }

    /// Inverse map from `[a, b]` back to `[0, 1]`.
    pub fn inverse(&self, w: f64) -> Result<f64, WarpError> {
        if !(w >= self.a() && w <= self.b()) {
            return Err(WarpError::OutOfDomain(w));
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut x = 0.5;
        for _ in 0..100 {
            let r = self.eval_unchecked(x) - w;
            if r.abs() <= 1e-15 * (self.b() - self.a()) {
                return Ok(x);
            }
            if r < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let d = self.deriv_unchecked(x);
            let next = x - r / d;
            x = if d > 0.0 && next > lo && next < hi {
                next
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo < 1e-16 {
                break;
            }
        }
        Ok(x)
    }

    /// Breakpoints between polynomial pieces, endpoints included.
    pub fn breakpoints(&self) -> [f64; 3] {
        KNOTS
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gauss_quad::GaussLegendre;
    use proptest::prelude::*;
    use std::num::NonZeroUsize;

    fn quadratic(u: &Vector2<f64>) -> Result<f64, String> {
        Ok(u[0] * u[0] + 4.0 * u[1] * u[1])
    }

    #[test]
    fn quadratic_bracket() {
        let eps = (-4.0f64).exp();
        let br = bracket_direction(
            quadratic,
            &Vector2::zeros(),
            &Vector2::new(1.0, 0.0),
            eps,
        )
        .unwrap();
        assert!((br.a() + 2.0).abs() < 1e-8);
        assert!((br.b() - 2.0).abs() < 1e-8);
        let br2 = bracket_direction(quadratic, &Vector2::zeros(), &Vector2::new(0.0, 3.0), eps)
            .unwrap();
        assert!((br2.b() - 1.0).abs() < 1e-8);
        assert!((br2.a() + br2.b()).abs() < 1e-8);
    }

    #[test]
    fn asymmetric_bracket_satisfies_level_equation() {
        let f = |u: &Vector2<f64>| -> Result<f64, String> { Ok(u[0].exp() - 1.0 - u[0]) };
        let eps = 1e-5;
        let br = bracket_direction(f, &Vector2::zeros(), &Vector2::new(1.0, 0.0), eps).unwrap();
        let level = (1.0 / eps).ln();
        for t in [br.a(), br.b()] {
            let r = f(&Vector2::new(t, 0.0)).unwrap() - level;
            assert!(r.abs() <= ROOT_TOL, "residual {r}");
        }
        assert!(br.a() < -10.0 && br.b() < 3.0);
    }

    #[test]
    fn flat_direction_is_an_error() {
        let f = |u: &Vector2<f64>| -> Result<f64, String> { Ok(1e-6 * u[0] * u[0]) };
        let err =
            bracket_direction(f, &Vector2::zeros(), &Vector2::new(1.0, 0.0), 1e-5).unwrap_err();
        assert_eq!(err, WarpError::FlatTail(MAX_EXTENT));
    }

    #[test]
    fn evaluation_failures_act_as_walls() {
        let f = |u: &Vector2<f64>| -> Result<f64, String> {
            if u[0] > 1.5 {
                Err("out of range".into())
            } else {
                Ok(u[0] * u[0])
            }
        };
        let br = bracket_direction(f, &Vector2::zeros(), &Vector2::new(1.0, 0.0), 1e-5).unwrap();
        assert!(br.b() > 1.5 - 1e-6 && br.b() <= 1.5);
        assert!((br.a() + (1e5f64).ln().sqrt()).abs() < 1e-8);
    }

    #[test]
    fn bad_eps_rejected() {
        assert!(bracket_direction(quadratic, &Vector2::zeros(), &Vector2::x(), 1.0).is_err());
        assert!(bracket_direction(quadratic, &Vector2::zeros(), &Vector2::x(), 0.0).is_err());
    }

    #[test]
    fn symmetric_bracket_gives_linear_warp() {
        let w = MonotoneCubic::fit(&Bracket::new(-1.0, 1.0).unwrap());
        for i in 0..=100 {
            let x = i as f64 / 100.0;
            assert!((w.eval(x).unwrap() - (2.0 * x - 1.0)).abs() < 1e-14);
            assert!((w.deriv(x).unwrap() - 2.0).abs() < 1e-13);
        }
    }

    #[test]
    fn skewed_bracket_is_monotone() {
        let w = MonotoneCubic::fit(&Bracket::new(-3.0, 1.0).unwrap());
        let mut prev = w.eval(0.0).unwrap();
        for i in 1..=1000 {
            let v = w.eval(i as f64 / 1000.0).unwrap();
            assert!(v > prev);
            prev = v;
        }
        assert_eq!(w.eval(0.5).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_bracket_and_domain_errors() {
        assert!(Bracket::new(0.0, 1.0).is_err());
        assert!(Bracket::new(-1.0, -0.5).is_err());
        let w = MonotoneCubic::fit(&Bracket::new(-1.0, 2.0).unwrap());
        assert!(w.eval(1.5).is_err());
        assert!(w.deriv(-0.1).is_err());
    }

    #[test]
    fn principal_axes_are_sorted_and_oriented() {
        let h = Matrix2::new(1.0, 0.0, 0.0, 5.0);
        let (vals, vecs) = principal_axes(&h);
        assert_eq!(vals, [5.0, 1.0]);
        assert!((vecs[0] - Vector2::new(0.0, 1.0)).norm() < 1e-14);
        assert!((vecs[1] - Vector2::new(1.0, 0.0)).norm() < 1e-14);
        let h = Matrix2::new(2.0, -1.0, -1.0, 2.0);
        let (_, vecs) = principal_axes(&h);
        for v in vecs {
            assert!(v[0] > 0.0);
        }
    }

    proptest! {
        #[test]
        fn fitted_warps_are_monotone_and_interpolate(a in -20.0f64..-1e-3, b in 1e-3f64..20.0) {
            let w = MonotoneCubic::fit(&Bracket::new(a, b).unwrap());
            prop_assert!((w.eval(0.0).unwrap() - a).abs() <= 1e-12 * a.abs());
            prop_assert!(w.eval(0.5).unwrap().abs() <= 1e-12);
            prop_assert!((w.eval(1.0).unwrap() - b).abs() <= 1e-12 * b.abs());
            let mut prev = a;
            for i in 1..=10_000 {
                let x = i as f64 / 10_000.0;
                let v = w.eval(x).unwrap();
                prop_assert!(v > prev);
                prop_assert!(w.deriv(x).unwrap() >= 0.0);
                prev = v;
            }
        }

        #[test]
        fn warp_derivative_matches_fd(a in -20.0f64..-1e-2, b in 1e-2f64..20.0, x in 0.001f64..0.999) {
            let w = MonotoneCubic::fit(&Bracket::new(a, b).unwrap());
            let h = 1e-6;
            let (lo, hi) = if (x - 0.5).abs() < h { (x - 2.0 * h, x - h) } else { (x - h, x + h) };
            let fd = (w.eval(hi).unwrap() - w.eval(lo).unwrap()) / (hi - lo);
            let at = 0.5 * (lo + hi);
            prop_assert!((fd - w.deriv(at).unwrap()).abs() <= 1e-8 * (b - a).max(1.0));
        }

        #[test]
        fn derivative_integrates_to_span(a in -20.0f64..-1e-3, b in 1e-3f64..20.0) {
            let w = MonotoneCubic::fit(&Bracket::new(a, b).unwrap());
            let rule = GaussLegendre::new(NonZeroUsize::new(3).unwrap());
            let total: f64 = rule.integrate(0.0, 0.5, |x| w.deriv(x).unwrap())
                + rule.integrate(0.5, 1.0, |x| w.deriv(x).unwrap());
            prop_assert!((total - (b - a)).abs() <= 1e-12 * (b - a));
        }

        #[test]
        fn inverse_round_trips(a in -20.0f64..-1e-3, b in 1e-3f64..20.0, x in 0.0f64..=1.0) {
            let w = MonotoneCubic::fit(&Bracket::new(a, b).unwrap());
            let back = w.inverse(w.eval(x).unwrap()).unwrap();
            prop_assert!((back - x).abs() < 1e-10);
        }
    }
}
