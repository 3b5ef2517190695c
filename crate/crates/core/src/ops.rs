//! Elementwise algebra, channel concatenation and average pooling.
//!
//! Each forward function has a matching `*_backward` that maps an output
//! gradient to input gradients; the tape in [`crate::autograd`] wires them up.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // Split on sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "hadamard", |x, y| x * y)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "sub", |x, y| x - y)
}

pub fn one_minus<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() - v)
}

/// Gradient of sigmoid given its output `y`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    y.zip_map(grad, "sigmoid_backward", |s, g| g * s * (T::one() - s))
        .expect("same shape")
}

/// Gradient of tanh given its output `y`.
pub fn tanh_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    y.zip_map(grad, "tanh_backward", |t, g| g * (T::one() - t * t))
        .expect("same shape")
}

pub fn relu_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    y.zip_map(grad, "relu_backward", |v, g| if v > T::zero() { g } else { T::zero() })
        .expect("same shape")
}

/// Stacks `a` then `b` along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.batch != sb.batch || sa.height != sb.height || sa.width != sb.width {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            expected: format!("{}x*x{}x{}", sa.batch, sa.height, sa.width),
            actual: sb.to_string(),
        });
    }
    let out_shape = sa.with_channels(sa.channels + sb.channels);
    let (na, nb) = (sa.channels * sa.plane(), sb.channels * sb.plane());
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..sa.batch {
        data.extend_from_slice(&a.data()[n * na..(n + 1) * na]);
        data.extend_from_slice(&b.data()[n * nb..(n + 1) * nb]);
    }
    Tensor::from_vec(out_shape, data)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels<T: Scalar>(
    grad: &Tensor<T>,
    first: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = grad.shape();
    if first > s.channels {
        return Err(Error::invalid(format!(
            "split_channels: {first} exceeds {} channels",
            s.channels
        )));
    }
    let second = s.channels - first;
    let (na, nb) = (first * s.plane(), second * s.plane());
    let mut a = Vec::with_capacity(s.batch * na);
    let mut b = Vec::with_capacity(s.batch * nb);
    for n in 0..s.batch {
        let base = n * (na + nb);
        a.extend_from_slice(&grad.data()[base..base + na]);
        b.extend_from_slice(&grad.data()[base + na..base + na + nb]);
    }
    Ok((
        Tensor::from_vec(s.with_channels(first), a)?,
        Tensor::from_vec(s.with_channels(second), b)?,
    ))
}

/// Channels `start..start + len`.
pub fn narrow_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if start + len > s.channels {
        return Err(Error::invalid(format!(
            "narrow_channels: {start}..{} out of range for {s}",
            start + len
        )));
    }
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.batch * len * plane);
    for n in 0..s.batch {
        let base = x.offset(n, start, 0, 0);
        data.extend_from_slice(&x.data()[base..base + len * plane]);
    }
    Tensor::from_vec(s.with_channels(len), data)
}

pub fn narrow_channels_backward<T: Scalar>(grad: &Tensor<T>, input_shape: Shape, start: usize) -> Tensor<T> {
    let g = grad.shape();
    let plane = g.plane();
    let mut out = Tensor::zeros(input_shape);
    for n in 0..g.batch {
        let dst = out.offset(n, start, 0, 0);
        let src = grad.offset(n, 0, 0, 0);
        out.data_mut()[dst..dst + g.channels * plane]
            .copy_from_slice(&grad.data()[src..src + g.channels * plane]);
    }
    out
}

/// Averages non-overlapping `factor`×`factor` blocks.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if factor == 0 || !s.height.is_multiple_of(factor) || !s.width.is_multiple_of(factor) {
        return Err(Error::invalid(format!(
            "avg_pool: factor {factor} does not divide spatial dims {}x{}",
            s.height, s.width
        )));
    }
    let (oh, ow) = (s.height / factor, s.width / factor);
    let out_shape = Shape::new(s.batch, s.channels, oh, ow);
    let inv = T::one() / T::from_f64((factor * factor) as f64);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.batch {
        for c in 0..s.channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += x.at(n, c, oy * factor + dy, ox * factor + dx);
                        }
                    }
                    out.set(n, c, oy, ox, acc * inv);
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward<T: Scalar>(grad: &Tensor<T>, input_shape: Shape, factor: usize) -> Tensor<T> {
    let inv = T::one() / T::from_f64((factor * factor) as f64);
    let mut out = Tensor::zeros(input_shape);
    for n in 0..input_shape.batch {
        for c in 0..input_shape.channels {
            for y in 0..input_shape.height {
                for x in 0..input_shape.width {
                    out.set(n, c, y, x, grad.at(n, c, y / factor, x / factor) * inv);
                }
            }
        }
    }
    out
}

/// Multiplies every channel of `x` by a single-channel `gate` of the same
/// batch and spatial size.
pub fn scale_channels<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let (s, g) = (x.shape(), gate.shape());
    let expected = Shape::new(s.batch, 1, s.height, s.width);
    if g != expected {
        return Err(Error::shapes("scale_channels", expected, g));
    }
    let plane = s.plane();
    let mut out = x.clone();
    for n in 0..s.batch {
        let gp = gate.plane(n, 0);
        for c in 0..s.channels {
            let start = x.offset(n, c, 0, 0);
            for (v, &gv) in out.data_mut()[start..start + plane].iter_mut().zip(gp) {
                *v *= gv;
            }
        }
    }
    Ok(out)
}
