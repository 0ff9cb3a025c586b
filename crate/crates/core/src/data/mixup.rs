use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};

/// `(lambda * x_i + (1 - lambda) * x_j, lambda * y_i + (1 - lambda) * y_j)`.
pub fn mixup(
    x_i: ArrayView2<'_, f64>,
    x_j: ArrayView2<'_, f64>,
    y_i: &[f64],
    y_j: &[f64],
    lambda: f64,
) -> Result<(Array2<f64>, Vec<f64>)> {
    if x_i.dim() != x_j.dim() || y_i.len() != y_j.len() {
        return Err(Error::ShapeMismatch(format!(
            "mixup inputs {:?}/{:?}, labels {}/{}",
            x_i.dim(),
            x_j.dim(),
            y_i.len(),
            y_j.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidValue {
            key: "lambda".into(),
            msg: format!("{lambda} outside [0, 1]"),
        });
    }
    let mut x = x_i.to_owned();
    x.zip_mut_with(&x_j, |a, b| *a = lambda * *a + (1.0 - lambda) * b);
    let y = y_i
        .iter()
        .zip(y_j)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Ok((x, y))
}

/// Draws mixing coefficients from `Beta(alpha, alpha)`.
#[derive(Debug, Clone, Copy)]
pub struct MixupSampler {
    beta: Beta<f64>,
}

impl MixupSampler {
    pub fn new(alpha: f64) -> Result<Self> {
        let beta = Beta::new(alpha, alpha).map_err(|e| Error::InvalidValue {
            key: "mixup_alpha".into(),
            msg: e.to_string(),
        })?;
        Ok(Self { beta })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.beta.sample(rng)
    }
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lambda_one_is_identity() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let b = array![[5.0, 6.0], [7.0, 8.0]];
        let (x, y) = mixup(a.view(), b.view(), &[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap();
        assert_eq!(x, a);
        assert_eq!(y, vec![1.0, 0.0]);
    }

    #[test]
    fn midpoint() {
        let a = Array2::zeros((3, 3));
        let b = Array2::ones((3, 3));
        let (x, y) = mixup(a.view(), b.view(), &[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap();
        assert!(x.iter().all(|&v| v == 0.5));
        assert_eq!(y, vec![0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch() {
        let a = Array2::zeros((2, 2));
        let b = Array2::zeros((2, 3));
        assert!(matches!(
            mixup(a.view(), b.view(), &[1.0], &[1.0], 0.3),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn seeded_sampler_replays() {
        let sampler = MixupSampler::new(1.0).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| sampler.sample(&mut rng)).collect::<Vec<_>>()
        };
        let first = draw(17);
        assert_eq!(first, draw(17));
        assert!(first.iter().all(|l| (0.0..=1.0).contains(l)));
        assert_ne!(first, draw(18));
    }

    proptest! {
        #[test]
        fn mixing_with_itself_is_identity(
            data in proptest::collection::vec(-1.0f64..1.0, 9),
            lambda in 0.0f64..=1.0,
        ) {
            let x = Array2::from_shape_vec((3, 3), data).unwrap();
            let (m, y) = mixup(x.view(), x.view(), &[0.0, 1.0], &[0.0, 1.0], lambda).unwrap();
            for (a, b) in m.iter().zip(x.iter()) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
            prop_assert_eq!(y, vec![0.0, 1.0]);
        }
    }
}
