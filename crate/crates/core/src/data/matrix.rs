use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Largest asymmetry repaired on load; anything above is rejected.
pub const SYMMETRIZE_TOLERANCE: f64 = 1e-6;
/// Asymmetry accepted as already symmetric.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// Regional time series, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    values: Array2<f64>,
}

impl TimeSeries {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::ShapeMismatch("time series has no nodes".into()));
        }
        if values.ncols() < 2 {
            return Err(Error::ShapeMismatch(format!(
                "time series needs at least 2 timepoints, got {}",
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("time series".into()));
        }
        Ok(Self { values })
    }

    pub fn node_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn timepoint_count(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }
}

/// Symmetric correlation matrix with unit diagonal and entries in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityMatrix {
    values: Array2<f64>,
}

impl ConnectivityMatrix {
    /// Validates `values` strictly: symmetric within [`SYMMETRY_TOLERANCE`],
    /// unit diagonal, bounded entries.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        Self::validate(values, "<unnamed>", SYMMETRY_TOLERANCE)
    }

    /// Validation used on load: small asymmetries are averaged out.
    pub fn validate(mut values: Array2<f64>, subject: &str, sym_tol: f64) -> Result<Self> {
        let violation = |reason: String| Error::InvariantViolation {
            subject: subject.to_string(),
            reason,
        };
        let (rows, cols) = values.dim();
        if rows != cols || rows == 0 {
            return Err(Error::ShapeMismatch(format!(
                "subject {subject}: matrix is {rows}x{cols}, expected square"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(violation("non-finite entry".into()));
        }
        let mut max_asym = 0.0f64;
        for i in 0..rows {
            for j in (i + 1)..rows {
                max_asym = max_asym.max((values[[i, j]] - values[[j, i]]).abs());
            }
        }
        if max_asym > sym_tol {
            return Err(violation(format!("asymmetry {max_asym:e} exceeds {sym_tol:e}")));
        }
        if max_asym > 0.0 {
            let t = values.t().to_owned();
            values = (&values + &t) * 0.5;
        }
        for i in 0..rows {
            if (values[[i, i]] - 1.0).abs() > SYMMETRIZE_TOLERANCE {
                return Err(violation(format!(
                    "diagonal entry {i} is {}, expected 1",
                    values[[i, i]]
                )));
            }
            values[[i, i]] = 1.0;
        }
        for ((i, j), v) in values.indexed_iter() {
            if v.abs() > 1.0 + SYMMETRY_TOLERANCE {
                return Err(violation(format!("entry ({i},{j}) = {v} outside [-1, 1]")));
            }
        }
        values.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        Ok(Self { values })
    }

    /// Wraps a matrix the caller has already made valid.
    pub(crate) fn from_trusted(values: Array2<f64>) -> Self {
        debug_assert_eq!(values.nrows(), values.ncols());
        Self { values }
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }
}

/// Pearson correlation between every pair of node series.
pub fn compute_pcc(ts: &TimeSeries) -> Result<ConnectivityMatrix> {
    let x = ts.values();
    let (n, t) = x.dim();
    let mut centered = Array2::<f64>::zeros((n, t));
    let mut norms = vec![0.0; n];
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / t as f64;
        let c = row.mapv(|v| v - mean);
        let ss = c.dot(&c);
        if ss == 0.0 {
            return Err(Error::ZeroVarianceNode(i));
        }
        norms[i] = ss.sqrt();
        centered.row_mut(i).assign(&c);
    }
    let mut r = centered.dot(&centered.t());
    for i in 0..n {
        for j in 0..n {
            r[[i, j]] = if i == j {
                1.0
            } else {
                (r[[i, j]] / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
        }
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("correlation overflow".into()));
    }
    // Floating-point products are symmetric already; make it exact.
    for i in 0..n {
        for j in (i + 1)..n {
            r[[j, i]] = r[[i, j]];
        }
    }
    Ok(ConnectivityMatrix::from_trusted(r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    /// Two-pass covariance formula, written independently of `compute_pcc`.
    fn direct_pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for (a, b) in x.iter().zip(y) {
            sxy += (a - mx) * (b - my);
            sxx += (a - mx) * (a - mx);
            syy += (b - my) * (b - my);
        }
        sxy / (sxx * syy).sqrt()
    }

    fn pcc(rows: Array2<f64>) -> Array2<f64> {
        compute_pcc(&TimeSeries::new(rows).unwrap())
            .unwrap()
            .into_inner()
    }

    #[test]
    fn perfect_correlation() {
        let r = pcc(array![[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]]);
        assert_abs_diff_eq!(r[[0, 1]], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn perfect_anticorrelation() {
        let r = pcc(array![[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]]);
        assert_abs_diff_eq!(r[[0, 1]], -1.0, epsilon = 1e-15);
    }

    #[test]
    fn matches_direct_formula() {
        let x = [1.0, 2.0, 4.0, 3.0];
        let y = [2.0, 1.0, 3.0, 4.0];
        let r = pcc(array![[1.0, 2.0, 4.0, 3.0], [2.0, 1.0, 3.0, 4.0]]);
        let expected = direct_pearson(&x, &y);
        // 0.6 by hand: cov 3 / sqrt(5 * 5)
        assert_abs_diff_eq!(expected, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(r[[0, 1]], expected, epsilon = 1e-12);
        assert_eq!(r[[0, 0]], 1.0);
        assert_eq!(r[[0, 1]], r[[1, 0]]);
    }

    #[test]
    fn constant_row_rejected() {
        let ts = TimeSeries::new(array![[1.0, 2.0, 3.0], [5.0, 5.0, 5.0]]).unwrap();
        assert!(matches!(compute_pcc(&ts), Err(Error::ZeroVarianceNode(1))));
    }

    #[test]
    fn time_series_validation() {
        assert!(TimeSeries::new(array![[1.0], [2.0]]).is_err());
        assert!(matches!(
            TimeSeries::new(array![[1.0, f64::NAN]]),
            Err(Error::NonFiniteInput(_))
        ));
    }

    #[test]
    fn connectivity_validation() {
        assert!(ConnectivityMatrix::new(array![[1.0, 0.2], [0.2, 1.0]]).is_ok());
        assert!(matches!(
            ConnectivityMatrix::new(array![[1.0, 1.5], [1.5, 1.0]]),
            Err(Error::InvariantViolation { .. })
        ));
        assert!(matches!(
            ConnectivityMatrix::new(array![[0.5, 0.2], [0.2, 1.0]]),
            Err(Error::InvariantViolation { .. })
        ));
        assert!(matches!(
            ConnectivityMatrix::new(Array2::zeros((2, 3))),
            Err(Error::ShapeMismatch(_))
        ));
        let repaired =
            ConnectivityMatrix::validate(array![[1.0, 0.2], [0.2 + 5e-7, 1.0]], "s", 1e-6)
                .unwrap();
        assert_eq!(repaired.values()[[0, 1]], repaired.values()[[1, 0]]);
        assert!(ConnectivityMatrix::validate(array![[1.0, 0.2], [0.21, 1.0]], "s", 1e-6).is_err());
    }

    proptest! {
        #[test]
        fn pcc_invariant_to_positive_affine_maps(
            data in proptest::collection::vec(-10.0f64..10.0, 3 * 12),
            a in 0.01f64..100.0,
            b in -50.0f64..50.0,
        ) {
            let x = Array2::from_shape_vec((3, 12), data).unwrap();
            let Ok(ts) = TimeSeries::new(x.clone()) else { return Ok(()); };
            let Ok(base) = compute_pcc(&ts) else { return Ok(()); };
            let mut y = x;
            y.row_mut(0).mapv_inplace(|v| a * v + b);
            let moved = compute_pcc(&TimeSeries::new(y).unwrap()).unwrap();
            for (u, v) in base.values().iter().zip(moved.values().iter()) {
                prop_assert!((u - v).abs() < 1e-9);
            }
            // the result always satisfies the matrix invariants
            prop_assert!(ConnectivityMatrix::new(base.into_inner()).is_ok());
        }
    }
}
