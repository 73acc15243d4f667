use rand::Rng;

use crate::tensor::{Real, Tensor};

/// Uniform on `±√(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-limit..=limit))).collect();
    Tensor::new(shape, data).expect("shape matches element count")
}
