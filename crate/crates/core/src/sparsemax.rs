//! Sparsemax: Euclidean projection onto the probability simplex.
//!
//! For an input `z` the projection is `p_i = max(z_i - threshold, 0)`, where the
//! threshold is found by sorting `z` in descending order and taking the largest
//! support size `k` with `1 + k * z_(k) > sum_{j <= k} z_(j)`. Unlike softmax the
//! result can contain exact zeros.
//!
//! The Jacobian is piecewise constant: on the support `S` it equals
//! `I - 1 1^T / |S|`, and it is zero on every row or column outside `S`.

use crate::error::{Error, Result};

/// Result of projecting one score vector onto the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexProjection {
    pub probabilities: Vec<f64>,
    /// Indices with strictly positive probability, ascending.
    pub support: Vec<usize>,
    /// The cut applied to the max-shifted input: `p_i = max(z_i - max(z) - threshold, 0)`.
    /// Add `max(z)` to recover the cut on the raw input.
    pub threshold: f64,
    /// `max(z)`, the shift used internally.
    pub shift: f64,
}

impl SimplexProjection {
    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    /// Threshold expressed on the original (unshifted) scores.
    pub fn raw_threshold(&self) -> f64 {
        self.threshold + self.shift
    }
}

pub fn sparsemax_forward(z: &[f64]) -> Result<SimplexProjection> {
    if z.is_empty() {
        return Err(Error::EmptyVector);
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("sparsemax scores".into()));
    }

    // Shifting by the max keeps the computation exactly shift-invariant
    // whenever z + c is itself representable.
    let shift = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = z.iter().map(|v| v - shift).collect();

    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| shifted[b].total_cmp(&shifted[a]).then(a.cmp(&b)));

    let mut cumsum = 0.0;
    let mut support_size = 0;
    let mut support_sum = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        let k = (rank + 1) as f64;
        cumsum += shifted[idx];
        if 1.0 + k * shifted[idx] > cumsum {
            support_size = rank + 1;
            support_sum = cumsum;
        }
    }
    // The top element always satisfies the condition (1 + z_(1) > z_(1)).
    debug_assert!(support_size >= 1);
    let threshold = (support_sum - 1.0) / support_size as f64;

    let probabilities: Vec<f64> = shifted.iter().map(|v| (v - threshold).max(0.0)).collect();
    let support = probabilities
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > 0.0)
        .map(|(i, _)| i)
        .collect();

    Ok(SimplexProjection {
        probabilities,
        support,
        threshold,
        shift,
    })
}

/// Vector-Jacobian product `J^T upstream` for the projection `proj`.
pub fn sparsemax_backward(proj: &SimplexProjection, upstream: &[f64]) -> Result<Vec<f64>> {
    if upstream.len() != proj.len() {
        return Err(Error::ShapeMismatch(format!(
            "sparsemax backward: upstream length {} vs projection length {}",
            upstream.len(),
            proj.len()
        )));
    }
    let mut grad = vec![0.0; upstream.len()];
    if proj.support.is_empty() {
        return Ok(grad);
    }
    let mean = proj.support.iter().map(|&i| upstream[i]).sum::<f64>() / proj.support.len() as f64;
    for &i in &proj.support {
        grad[i] = upstream[i] - mean;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn probs(z: &[f64]) -> Vec<f64> {
        sparsemax_forward(z).unwrap().probabilities
    }

    #[test]
    fn symmetric_pair_is_uniform() {
        assert_eq!(probs(&[0.5, 0.5]), vec![0.5, 0.5]);
    }

    #[test]
    fn dominant_entry_gives_one_hot() {
        let p = sparsemax_forward(&[2.0, 1.0, 0.5]).unwrap();
        assert_eq!(p.probabilities, vec![1.0, 0.0, 0.0]);
        assert_eq!(p.support, vec![0]);
        assert_abs_diff_eq!(p.raw_threshold(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn two_element_support() {
        let p = sparsemax_forward(&[1.2, 0.8, -3.0]).unwrap();
        assert_abs_diff_eq!(p.probabilities[0], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(p.probabilities[1], 0.3, epsilon = 1e-12);
        assert_eq!(p.probabilities[2], 0.0);
        assert_abs_diff_eq!(p.raw_threshold(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(matches!(sparsemax_forward(&[]), Err(Error::EmptyVector)));
        assert!(matches!(
            sparsemax_forward(&[1.0, f64::NAN]),
            Err(Error::NonFiniteInput(_))
        ));
        assert!(matches!(
            sparsemax_forward(&[f64::INFINITY]),
            Err(Error::NonFiniteInput(_))
        ));
    }

    #[test]
    fn single_element_is_one() {
        assert_eq!(probs(&[-42.0]), vec![1.0]);
    }

    #[test]
    fn backward_full_support_kills_constant_upstream() {
        let p = sparsemax_forward(&[0.1, 0.2, 0.15]).unwrap();
        assert_eq!(p.support.len(), 3);
        let g = sparsemax_backward(&p, &[3.0, 3.0, 3.0]).unwrap();
        for v in g {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn backward_singleton_support_is_zero() {
        let p = sparsemax_forward(&[2.0, 1.0, 0.5]).unwrap();
        let g = sparsemax_backward(&p, &[0.3, -1.7, 2.2]).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_shape_mismatch() {
        let p = sparsemax_forward(&[1.0, 2.0]).unwrap();
        assert!(matches!(
            sparsemax_backward(&p, &[1.0]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn tie_at_boundary_is_excluded() {
        // sorted [1, 0]: k=2 gives 1 + 2*0 > 1 false, so support {0}; p = [1, 0].
        let p = sparsemax_forward(&[0.0, 1.0]).unwrap();
        assert_eq!(p.probabilities, vec![0.0, 1.0]);
        assert_eq!(p.support, vec![1]);
    }
}
