//! One-dimensional Chebyshev interpolation on Chebyshev-Gauss-Lobatto points.

use std::f64::consts::PI;

/// Polynomial `Σ c_k T_k(s)` with `s` the affine image of `[lo, hi]` on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebInterpolant {
    lo: f64,
    hi: f64,
    coeffs: Vec<f64>,
}

/// `n + 1` Lobatto points on `[lo, hi]`, ascending.
pub fn lobatto_points(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 0 {
        return vec![0.5 * (lo + hi)];
    }
    (0..=n)
        .map(|j| {
            let s = -(PI * j as f64 / n as f64).cos();
            0.5 * (lo + hi) + 0.5 * (hi - lo) * s
        })
        .collect()
}

impl ChebInterpolant {
    /// Interpolates values given at [`lobatto_points`].
    pub fn from_values(lo: f64, hi: f64, values: &[f64]) -> Self {
        let n = values.len() - 1;
        if n == 0 {
            return Self {
                lo,
                hi,
                coeffs: vec![values[0]],
            };
        }
        // points ascend, so value j sits at s = −cos(πj/n) = cos(π(n−j)/n)
        let coeffs = (0..=n)
            .map(|k| {
                let mut acc = 0.0;
                for (j, &v) in values.iter().enumerate() {
                    let jj = n - j;
                    let w = if jj == 0 || jj == n { 0.5 } else { 1.0 };
                    acc += w * v * (PI * (jj * k) as f64 / n as f64).cos();
                }
                let scale = if k == 0 || k == n { 1.0 } else { 2.0 };
                acc * scale / n as f64
            })
            .collect();
        Self { lo, hi, coeffs }
    }

    pub fn from_fn<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, n: usize) -> Self {
        let values: Vec<f64> = lobatto_points(lo, hi, n).into_iter().map(&mut f).collect();
        Self::from_values(lo, hi, &values)
    }

    /// Starts at degree `n0` and doubles until the residual at the next level's
    /// new points is at most `tol` or the degree reaches `n_max`.
    /// Returns the interpolant and whether the residual test passed.
    pub fn adaptive<F: FnMut(f64) -> f64>(
        mut f: F,
        lo: f64,
        hi: f64,
        tol: f64,
        n0: usize,
        n_max: usize,
    ) -> (Self, bool) {
        let mut n = n0.max(1);
        let mut values: Vec<f64> = lobatto_points(lo, hi, n).into_iter().map(&mut f).collect();
        loop {
            let interp = Self::from_values(lo, hi, &values);
            let fine = lobatto_points(lo, hi, 2 * n);
            let mut next = Vec::with_capacity(2 * n + 1);
            let mut resid: f64 = 0.0;
            for (j, &x) in fine.iter().enumerate() {
                if j % 2 == 0 {
                    next.push(values[j / 2]);
                } else {
                    let v = f(x);
                    resid = resid.max((v - interp.eval(x)).abs());
                    next.push(v);
                }
            }
            if resid <= tol {
                return (interp, true);
            }
            if 2 * n > n_max {
                log::warn!("Chebyshev interpolant did not reach tolerance {tol} (residual {resid})");
                return (Self::from_values(lo, hi, &next), false);
            }
            n *= 2;
            values = next;
        }
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    fn to_unit(&self, x: f64) -> f64 {
        if self.hi == self.lo {
            0.0
        } else {
            (2.0 * x - self.lo - self.hi) / (self.hi - self.lo)
        }
    }

    /// Clenshaw evaluation; `x` outside `[lo, hi]` extrapolates.
    pub fn eval(&self, x: f64) -> f64 {
        let s = self.to_unit(x);
        let (mut b1, mut b2) = (0.0, 0.0);
        for &c in self.coeffs.iter().skip(1).rev() {
            let b0 = 2.0 * s * b1 - b2 + c;
            b2 = b1;
            b1 = b0;
        }
        s * b1 - b2 + self.coeffs[0]
    }

    /// Antiderivative vanishing at `lo`.
    pub fn antiderivative(&self) -> Self {
        let a = &self.coeffs;
        let n = a.len();
        let get = |k: usize| if k < n { a[k] } else { 0.0 };
        let half_width = 0.5 * (self.hi - self.lo);
        let mut b = vec![0.0; n + 1];
        if n >= 1 {
            b[1] = get(0) - 0.5 * get(2);
        }
        for (k, bk) in b.iter_mut().enumerate().skip(2) {
            *bk = (get(k - 1) - get(k + 1)) / (2.0 * k as f64);
        }
        for bk in b.iter_mut() {
            *bk *= half_width;
        }
        // T_k(−1) = (−1)^k
        let at_lo: f64 = b
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, &c)| if k % 2 == 0 { c } else { -c })
            .sum();
        b[0] = -at_lo;
        Self {
            lo: self.lo,
            hi: self.hi,
            coeffs: b,
        }
    }

    /// `∫_lo^hi p(x) dx`.
    pub fn integral(&self) -> f64 {
        self.antiderivative().eval(self.hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_polynomials() {
        let f = |x: f64| 3.0 * x.powi(3) - x + 0.5;
        let p = ChebInterpolant::from_fn(f, -1.0, 2.0, 5);
        for i in 0..=50 {
            let x = -1.0 + 3.0 * i as f64 / 50.0;
            assert!((p.eval(x) - f(x)).abs() < 1e-12);
        }
        // ∫_{-1}^{2} = 3(16 − 1)/4 − (4 − 1)/2 + 1.5
        assert!((p.integral() - (45.0 / 4.0 - 1.5 + 1.5)).abs() < 1e-12);
        let anti = p.antiderivative();
        assert!(anti.eval(-1.0).abs() < 1e-13);
        let exact = |x: f64| 0.75 * x.powi(4) - 0.5 * x * x + 0.5 * x;
        assert!((anti.eval(0.7) - (exact(0.7) - exact(-1.0))).abs() < 1e-12);
    }

    #[test]
    fn interpolates_at_nodes() {
        let pts = lobatto_points(0.0, 1.0, 8);
        assert_eq!(pts[0], 0.0);
        assert!((pts[8] - 1.0).abs() < 1e-15);
        assert!(pts.windows(2).all(|w| w[0] < w[1]));
        let p = ChebInterpolant::from_fn(f64::exp, 0.0, 1.0, 8);
        for &x in &pts {
            assert!((p.eval(x) - x.exp()).abs() < 1e-13);
        }
    }

    #[test]
    fn adaptive_doubles_until_resolved() {
        let f = |x: f64| (-50.0 * (x - 0.3).powi(2)).exp();
        let (p, ok) = ChebInterpolant::adaptive(f, 0.0, 1.0, 1e-10, 8, 1024);
        assert!(ok);
        assert!(p.degree() > 8);
        let exact = (std::f64::consts::PI / 50.0).sqrt()
            * 0.5
            * (statrs::function::erf::erf(0.7 * 50f64.sqrt())
                + statrs::function::erf::erf(0.3 * 50f64.sqrt()));
        assert!((p.integral() - exact).abs() < 1e-9);
    }

    #[test]
    fn constant_interpolant() {
        let p = ChebInterpolant::from_values(2.0, 4.0, &[3.0]);
        assert_eq!(p.eval(3.3), 3.0);
        assert!((p.integral() - 6.0).abs() < 1e-14);
    }
}
