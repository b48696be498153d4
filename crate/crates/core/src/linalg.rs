use nalgebra::DMatrix;

/// `tr(AB)` without forming the product.
pub(crate) fn trace_prod(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// `M + Mᵀ`.
pub(crate) fn sym_sum(m: &DMatrix<f64>) -> DMatrix<f64> {
    m + m.transpose()
}

/// A matrix that may be structurally zero or the identity, so products can
/// skip the dense multiply.
#[derive(Clone, Copy)]
pub(crate) enum Factor<'a> {
    Zero,
    Identity,
    Dense(&'a DMatrix<f64>),
}

impl Factor<'_> {
    /// `a · self`
    pub(crate) fn right_of(&self, a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        match self {
            Factor::Zero => None,
            Factor::Identity => Some(a.clone()),
            Factor::Dense(m) => Some(a * *m),
        }
    }

    /// `self · a`
    pub(crate) fn left_of(&self, a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        match self {
            Factor::Zero => None,
            Factor::Identity => Some(a.clone()),
            Factor::Dense(m) => Some(*m * a),
        }
    }

    /// `tr(self · a)`
    pub(crate) fn trace_with(&self, a: &DMatrix<f64>) -> f64 {
        match self {
            Factor::Zero => 0.0,
            Factor::Identity => a.trace(),
            Factor::Dense(m) => trace_prod(m, a),
        }
    }
}

pub(crate) fn opt_trace(a: &Option<DMatrix<f64>>, b: &DMatrix<f64>) -> f64 {
    a.as_ref().map_or(0.0, |a| trace_prod(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_of_product_matches_dense() {
        let a = DMatrix::from_fn(4, 3, |i, j| (i as f64 + 1.0) * 0.3 - j as f64);
        let b = DMatrix::from_fn(3, 4, |i, j| (i * j) as f64 + 0.5);
        assert!((trace_prod(&a, &b) - (&a * &b).trace()).abs() < 1e-12);
    }
}
