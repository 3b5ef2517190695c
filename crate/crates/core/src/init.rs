use rand::Rng;

use crate::tensor::{Scalar, Shape, Tensor};

/// Uniform in `±sqrt(1/fan_in)`.
pub fn fan_in_uniform<T: Scalar, R: Rng + ?Sized>(shape: impl Into<Shape>, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}

/// Kernel `(out, in, kh, kw)` initialised from its own fan-in `in·kh·kw`.
pub fn conv_kernel<T: Scalar, R: Rng + ?Sized>(shape: impl Into<Shape>, rng: &mut R) -> Tensor<T> {
    let shape = shape.into();
    fan_in_uniform(shape, shape.channels * shape.plane(), rng)
}
