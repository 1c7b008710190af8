//! Seeded weight initialisers.

use rand::Rng;

use super::tensor::Tensor;
use crate::scalar::Scalar;

fn uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Uniform Kaiming (He) init for a `[fan_in × fan_out]` weight feeding a ReLU.
pub fn kaiming_uniform<T: Scalar, R: Rng + ?Sized>(
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    uniform(&[fan_in, fan_out], bound, rng)
}

/// Uniform Xavier (Glorot) init.
pub fn xavier_uniform<T: Scalar, R: Rng + ?Sized>(
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    uniform(&[fan_in, fan_out], bound, rng)
}
