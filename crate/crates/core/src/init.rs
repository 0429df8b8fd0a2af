use rand::Rng;
use rand_distr::{Distribution, Normal};
use vlground_numerics::{Scalar, Tensor};

/// Weight initialization scale for every learned matrix and table.
pub const INIT_STD: f64 = 0.02;

/// Draws in f64 and rounds to `T`, so f32 and f64 models built from the same
/// seed agree up to rounding.
pub fn normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape)
}

pub fn ones<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::full(shape, T::one())
}
