//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{Real, Tensor};

/// He-normal draws from `N(0, 2 / fan_in)`, used for convolution kernels.
pub fn he_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    assert!(fan_in > 0, "fan_in must be positive");
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    fill(shape, || dist.sample(rng))
}

/// Glorot-uniform draws from `U(-l, l)` with `l = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    assert!(fan_in > 0 && fan_out > 0, "fans must be positive");
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    fill(shape, || dist.sample(rng))
}

fn fill<T: Real>(shape: &[usize], mut draw: impl FnMut() -> f64) -> Tensor<T> {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| T::lit(draw())).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn he_normal_variance_matches_two_over_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t: Tensor<f64> = he_normal(&[100_000], 50, &mut rng);
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.04).abs() < 0.004, "variance {var}");
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f32> = glorot_uniform(&[10_000], 3, 3, &mut rng);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn same_seed_same_tensor() {
        let a: Tensor<f32> = he_normal(&[3, 3, 3, 2, 4], 54, &mut ChaCha8Rng::seed_from_u64(5));
        let b: Tensor<f32> = he_normal(&[3, 3, 3, 2, 4], 54, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }
}
