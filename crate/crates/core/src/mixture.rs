//! Finite mixtures used for parameter marginals and predictive distributions.

use statrs::function::beta::beta_reg;
use statrs::function::gamma::{gamma_ur, ln_gamma};
use thiserror::Error;

use crate::cheb::ChebInterpolant;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MixtureError {
    #[error("mixture has no components")]
    Empty,
    #[error("invalid component parameters: {0}")]
    BadComponent(String),
    #[error("probability {0} outside (0, 1)")]
    BadProbability(f64),
    #[error("weights and components differ in length")]
    LengthMismatch,
}

/// Location-scale Student t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TComponent {
    pub df: f64,
    pub location: f64,
    pub scale: f64,
}

impl TComponent {
    pub fn new(df: f64, location: f64, scale: f64) -> Result<Self, MixtureError> {
        if df > 0.0 && scale > 0.0 && location.is_finite() && scale.is_finite() {
            Ok(Self { df, location, scale })
        } else {
            Err(MixtureError::BadComponent(format!(
                "t(df = {df}, location = {location}, scale = {scale})"
            )))
        }
    }

    /// Uses `½ ± ½ I_{z²/(ν+z²)}(½, ν/2)`, which stays accurate near the center.
    pub fn cdf(&self, x: f64) -> f64 {
        let z = (x - self.location) / self.scale;
        if z.is_infinite() {
            return if z > 0.0 { 1.0 } else { 0.0 };
        }
        let z2 = z * z;
        let tail = beta_reg(0.5, 0.5 * self.df, z2 / (self.df + z2));
        if z >= 0.0 {
            0.5 + 0.5 * tail
        } else {
            0.5 - 0.5 * tail
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let z = (x - self.location) / self.scale;
        let nu = self.df;
        let log_norm = ln_gamma(0.5 * (nu + 1.0))
            - ln_gamma(0.5 * nu)
            - 0.5 * (nu * std::f64::consts::PI).ln()
            - self.scale.ln();
        (log_norm - 0.5 * (nu + 1.0) * (z * z / nu).ln_1p()).exp()
    }
}

/// Inverse gamma with density `∝ x^{−shape−1} exp(−scale/x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvGammaComponent {
    pub shape: f64,
    pub scale: f64,
}

impl InvGammaComponent {
    pub fn new(shape: f64, scale: f64) -> Result<Self, MixtureError> {
        if shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite() {
            Ok(Self { shape, scale })
        } else {
            Err(MixtureError::BadComponent(format!(
                "inverse-gamma(shape = {shape}, scale = {scale})"
            )))
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else {
            gamma_ur(self.shape, self.scale / x)
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let a = self.shape;
        (a * self.scale.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - self.scale / x).exp()
    }
}

/// Density of `u = log θ` held as a Chebyshev interpolant on `[u_lo, u_hi]`;
/// the marginal itself is reported on the `θ = exp(u)` scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LogGridDensity {
    density: ChebInterpolant,
    cumulative: ChebInterpolant,
    total: f64,
}

impl LogGridDensity {
    pub fn new(density: ChebInterpolant) -> Result<Self, MixtureError> {
        let cumulative = density.antiderivative();
        let total = cumulative.eval(density.hi());
        if !(total > 0.0 && total.is_finite()) {
            return Err(MixtureError::BadComponent(format!("density integrates to {total}")));
        }
        Ok(Self {
            density,
            cumulative,
            total,
        })
    }

    pub fn u_range(&self) -> (f64, f64) {
        (self.density.lo(), self.density.hi())
    }

    /// Density of `u`, clamped at zero.
    pub fn pdf_u(&self, u: f64) -> f64 {
        let (lo, hi) = self.u_range();
        if u < lo || u > hi {
            0.0
        } else {
            (self.density.eval(u) / self.total).max(0.0)
        }
    }

    pub fn cdf_u(&self, u: f64) -> f64 {
        let (lo, hi) = self.u_range();
        if u <= lo {
            0.0
        } else if u >= hi {
            1.0
        } else {
            (self.cumulative.eval(u) / self.total).clamp(0.0, 1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Components {
    StudentT(Vec<TComponent>),
    InverseGamma(Vec<InvGammaComponent>),
    LogGrid(LogGridDensity),
}

/// Weighted mixture with CDF, density and quantile accessors.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureMarginal {
    components: Components,
    weights: Vec<f64>,
}

impl MixtureMarginal {
    pub fn student_t(components: Vec<TComponent>, weights: Vec<f64>) -> Result<Self, MixtureError> {
        Self::checked(components.len(), &weights)?;
        Ok(Self {
            components: Components::StudentT(components),
            weights,
        })
    }

    pub fn inverse_gamma(
        components: Vec<InvGammaComponent>,
        weights: Vec<f64>,
    ) -> Result<Self, MixtureError> {
        Self::checked(components.len(), &weights)?;
        Ok(Self {
            components: Components::InverseGamma(components),
            weights,
        })
    }

    pub fn log_grid(density: LogGridDensity) -> Self {
        Self {
            components: Components::LogGrid(density),
            weights: vec![1.0],
        }
    }

    fn checked(len: usize, weights: &[f64]) -> Result<(), MixtureError> {
        if len == 0 {
            return Err(MixtureError::Empty);
        }
        if weights.len() != len {
            return Err(MixtureError::LengthMismatch);
        }
        Ok(())
    }

    pub fn components(&self) -> &Components {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mixture CDF, clamped to `[0, 1]`.
    pub fn cdf(&self, x: f64) -> f64 {
        let raw = match &self.components {
            Components::StudentT(cs) => cs.iter().zip(&self.weights).map(|(c, w)| w * c.cdf(x)).sum(),
            Components::InverseGamma(cs) => {
                cs.iter().zip(&self.weights).map(|(c, w)| w * c.cdf(x)).sum()
            }
            Components::LogGrid(g) => {
                if x <= 0.0 {
                    0.0
                } else {
                    g.cdf_u(x.ln())
                }
            }
        };
        f64::clamp(raw, 0.0, 1.0)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let raw: f64 = match &self.components {
            Components::StudentT(cs) => cs.iter().zip(&self.weights).map(|(c, w)| w * c.pdf(x)).sum(),
            Components::InverseGamma(cs) => {
                cs.iter().zip(&self.weights).map(|(c, w)| w * c.pdf(x)).sum()
            }
            Components::LogGrid(g) => {
                if x <= 0.0 {
                    0.0
                } else {
                    g.pdf_u(x.ln()) / x
                }
            }
        };
        raw.max(0.0)
    }

    /// Mean of a t mixture; `None` for the other kinds or when `df ≤ 1`.
    pub fn mean(&self) -> Option<f64> {
        match &self.components {
            Components::StudentT(cs) if cs.iter().all(|c| c.df > 1.0) => Some(
                cs.iter()
                    .zip(&self.weights)
                    .map(|(c, w)| w * c.location)
                    .sum(),
            ),
            _ => None,
        }
    }

    /// Smallest `x` with `cdf(x) ≥ p`, found by bisection.
    pub fn quantile(&self, p: f64) -> Result<f64, MixtureError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(MixtureError::BadProbability(p));
        }
        let (mut lo, mut hi) = match &self.components {
            Components::StudentT(cs) => {
                let lo = cs.iter().map(|c| c.location - c.scale).fold(f64::INFINITY, f64::min);
                let hi = cs.iter().map(|c| c.location + c.scale).fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            }
            Components::InverseGamma(cs) => {
                let mid = cs.iter().map(|c| c.scale / c.shape).fold(f64::INFINITY, f64::min);
                (0.5 * mid, 2.0 * mid)
            }
            Components::LogGrid(g) => {
                let (a, b) = g.u_range();
                (a.exp(), b.exp())
            }
        };
        let positive = !matches!(self.components, Components::StudentT(_));
        let mut step = (hi - lo).abs().max(1e-12);
        let mut guard = 0;
        while self.cdf(lo) >= p && guard < 2000 {
            if positive {
                lo *= 0.5;
            } else {
                lo -= step;
                step *= 2.0;
            }
            guard += 1;
        }
        step = (hi - lo).abs().max(1e-12);
        while self.cdf(hi) < p && guard < 4000 {
            if positive {
                hi *= 2.0;
            } else {
                hi += step;
                step *= 2.0;
            }
            guard += 1;
        }
        for _ in 0..200 {
            let mid = if positive && lo > 0.0 && hi / lo > 4.0 {
                (lo * hi).sqrt()
            } else {
                0.5 * (lo + hi)
            };
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(mid) >= p {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5).expect("0.5 is a valid probability")
    }

    /// Equal-tailed interval with `alpha/2` in each tail.
    pub fn credible_interval(&self, alpha: f64) -> Result<(f64, f64), MixtureError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(MixtureError::BadProbability(alpha));
        }
        Ok((self.quantile(0.5 * alpha)?, self.quantile(1.0 - 0.5 * alpha)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{Continuous, ContinuousCDF, InverseGamma, StudentsT};

    #[test]
    fn single_t_is_symmetric_about_location() {
        let m = MixtureMarginal::student_t(vec![TComponent::new(7.0, 2.5, 0.3).unwrap()], vec![1.0])
            .unwrap();
        assert!((m.cdf(2.5) - 0.5).abs() < 1e-14);
        assert!((m.median() - 2.5).abs() < 1e-10);
        let d = StudentsT::new(2.5, 0.3, 7.0).unwrap();
        for x in [1.9, 2.4, 3.3] {
            assert!((m.pdf(x) - d.pdf(x)).abs() < 1e-12);
        }
        let (lo, hi) = m.credible_interval(0.05).unwrap();
        assert!((d.cdf(lo) - 0.025).abs() < 1e-9 && (d.cdf(hi) - 0.975).abs() < 1e-9);
    }

    #[test]
    fn inverse_gamma_matches_reference() {
        let c = InvGammaComponent::new(9.5, 160.0).unwrap();
        let d = InverseGamma::new(9.5, 160.0).unwrap();
        for x in [5.0, 15.0, 40.0] {
            assert!((c.cdf(x) - d.cdf(x)).abs() < 1e-12);
            assert!((c.pdf(x) - d.pdf(x)).abs() < 1e-12);
        }
        let m = MixtureMarginal::inverse_gamma(vec![c], vec![1.0]).unwrap();
        let med = m.median();
        assert!((c.cdf(med) - 0.5).abs() < 1e-10);
    }

    #[test]
    fn mixture_cdf_is_monotone_and_bounded() {
        let cs = vec![
            TComponent::new(4.0, -1.0, 0.5).unwrap(),
            TComponent::new(4.0, 2.0, 1.5).unwrap(),
        ];
        let m = MixtureMarginal::student_t(cs, vec![0.3, 0.7]).unwrap();
        let mut prev = 0.0;
        for i in 0..1000 {
            let x = -10.0 + 20.0 * i as f64 / 999.0;
            let c = m.cdf(x);
            assert!(c >= prev && (0.0..=1.0).contains(&c));
            prev = c;
        }
        assert!((m.mean().unwrap() - (-0.3 + 0.7 * 2.0)).abs() < 1e-14);
        let q = m.quantile(0.8).unwrap();
        assert!((m.cdf(q) - 0.8).abs() < 1e-10);
    }

    #[test]
    fn log_grid_round_trip() {
        // u ~ uniform on [-1, 1] → θ = e^u
        let dens = ChebInterpolant::from_values(-1.0, 1.0, &[1.0, 1.0, 1.0]);
        let m = MixtureMarginal::log_grid(LogGridDensity::new(dens).unwrap());
        assert!((m.median() - 1.0).abs() < 1e-10);
        assert!((m.cdf(1.0f64.exp()) - 1.0).abs() < 1e-14);
        assert!((m.cdf(0.5f64.exp()) - 0.75).abs() < 1e-12);
        assert!((m.pdf(1.0) - 0.5).abs() < 1e-12);
        assert!(m.mean().is_none());
    }

    #[test]
    fn invalid_inputs() {
        assert!(TComponent::new(0.0, 0.0, 1.0).is_err());
        assert!(InvGammaComponent::new(1.0, -1.0).is_err());
        assert_eq!(
            MixtureMarginal::student_t(vec![], vec![]).unwrap_err(),
            MixtureError::Empty
        );
        let m = MixtureMarginal::student_t(vec![TComponent::new(3.0, 0.0, 1.0).unwrap()], vec![1.0])
            .unwrap();
        assert!(m.quantile(1.0).is_err());
    }
}
