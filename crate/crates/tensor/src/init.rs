use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::{Dims, Tensor};

/// Fan-in of a kernel laid out as (out, in, kh, kw).
pub fn fan_in(dims: Dims) -> usize {
    dims.channels * dims.height * dims.width
}

/// Zero-mean Gaussian weights with variance `2 / fan_in`.
pub fn he_init<T: Real, R: Rng + ?Sized>(dims: impl Into<Dims>, rng: &mut R) -> Result<Tensor<T>> {
    let dims = dims.into();
    let fan = fan_in(dims);
    if fan == 0 {
        return Err(TensorError::ZeroFanIn(dims.as_array()));
    }
    let normal = Normal::new(0.0, (2.0 / fan as f64).sqrt()).expect("finite std");
    let data = (0..dims.len()).map(|_| T::of(normal.sample(rng))).collect();
    Tensor::from_vec(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_seed_same_tensor() {
        let a: Tensor<f64> = he_init([4, 2, 3, 3], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b: Tensor<f64> = he_init([4, 2, 3, 3], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_fan_in_rejected() {
        let r: Result<Tensor<f32>> = he_init([4, 0, 3, 3], &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(r.unwrap_err(), TensorError::ZeroFanIn([4, 0, 3, 3]));
    }

    #[test]
    fn empirical_variance() {
        // fan_in 8 -> 0.25; fan_in 18 -> 1/9
        assert_eq!(fan_in(Dims::new(1, 2, 2, 2)), 8);
        let n = 100_000 / 18 + 1;
        let t: Tensor<f64> = he_init([n, 2, 3, 3], &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let len = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / len;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len;
        assert!((var - 1.0 / 9.0).abs() < 0.05 / 9.0, "variance {var}");
    }
}
