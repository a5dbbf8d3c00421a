//! Weight initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::{Float, Tensor};

/// He/Kaiming normal initialization scaled by fan-in, for ReLU networks.
pub fn kaiming_normal<T: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64c(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data)
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform<T: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64c(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data)
}
