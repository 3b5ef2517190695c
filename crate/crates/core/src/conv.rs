//! Direct 2-D convolution (standard, depthwise and pointwise) with its
//! reverse-mode gradient.
//!
//! Inputs are padded into a scratch buffer first so the inner loops run
//! without bounds checks. Every output element is accumulated as
//! `bias + Σ_(c, ky, kx)` in that fixed order, independent of how the loops
//! are scheduled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingKind {
    Zero,
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Padding {
    pub kind: PaddingKind,
    pub size: usize,
}

impl Padding {
    pub const NONE: Padding = Padding {
        kind: PaddingKind::Zero,
        size: 0,
    };

    pub const fn zero(size: usize) -> Self {
        Padding {
            kind: PaddingKind::Zero,
            size,
        }
    }

    pub const fn replicate(size: usize) -> Self {
        Padding {
            kind: PaddingKind::Replicate,
            size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    Standard,
    /// One `kh×kw` filter per channel; kernel shape `(C, 1, kh, kw)`.
    Depthwise,
    /// `1×1` cross-channel mixing.
    Pointwise,
}

impl ConvMode {
    pub fn name(self) -> &'static str {
        match self {
            ConvMode::Standard => "standard",
            ConvMode::Depthwise => "depthwise",
            ConvMode::Pointwise => "pointwise",
        }
    }
}

/// Stride, padding and mode: everything about a convolution except its
/// learnable tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: Padding,
    pub mode: ConvMode,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: Padding, mode: ConvMode) -> Self {
        ConvGeometry {
            stride,
            padding,
            mode,
        }
    }

    /// Stride 1 with zero padding that keeps spatial dims for odd `k`.
    pub const fn same(k: usize, mode: ConvMode) -> Self {
        ConvGeometry::new(1, Padding::zero(k / 2), mode)
    }

    pub const fn pointwise() -> Self {
        ConvGeometry::new(1, Padding::NONE, ConvMode::Pointwise)
    }
}

/// A convolution together with its kernel and optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec<T = f32> {
    /// `(out_channels, in_channels / groups, kh, kw)`.
    pub kernel: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub geometry: ConvGeometry,
}

impl<T: Scalar> ConvSpec<T> {
    pub fn new(kernel: Tensor<T>, bias: Option<Vec<T>>, geometry: ConvGeometry) -> Result<Self> {
        let k = kernel.shape();
        if geometry.stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        match geometry.mode {
            ConvMode::Pointwise if k.height != 1 || k.width != 1 => {
                return Err(Error::invalid(format!(
                    "conv2d: pointwise mode requires a 1x1 kernel, got {}x{}",
                    k.height, k.width
                )));
            }
            ConvMode::Depthwise if k.channels != 1 => {
                return Err(Error::invalid(format!(
                    "conv2d: depthwise mode requires per-channel kernels (in/groups = 1), got kernel {k}"
                )));
            }
            _ => {}
        }
        if let Some(b) = &bias {
            if b.len() != k.batch {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    expected: format!("bias of length {}", k.batch),
                    actual: format!("bias of length {}", b.len()),
                });
            }
        }
        Ok(ConvSpec {
            kernel,
            bias,
            geometry,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape().batch
    }

    pub fn mode(&self) -> ConvMode {
        self.geometry.mode
    }
}

pub fn conv2d<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    conv2d_raw(input, &spec.kernel, spec.bias.as_deref(), spec.geometry)
}

/// Depthwise convolution followed by a pointwise one.
pub fn depthwise_separable<T: Scalar>(
    input: &Tensor<T>,
    dw: &ConvSpec<T>,
    pw: &ConvSpec<T>,
) -> Result<Tensor<T>> {
    if dw.mode() != ConvMode::Depthwise {
        return Err(Error::ModeMismatch {
            op: "depthwise_separable",
            expected: ConvMode::Depthwise.name(),
            actual: dw.mode().name(),
        });
    }
    if pw.mode() != ConvMode::Pointwise {
        return Err(Error::ModeMismatch {
            op: "depthwise_separable",
            expected: ConvMode::Pointwise.name(),
            actual: pw.mode().name(),
        });
    }
    conv2d(&conv2d(input, dw)?, pw)
}

#[derive(Clone, Copy, Debug)]
struct Plan {
    input: Shape,
    padded_h: usize,
    padded_w: usize,
    out: Shape,
    in_per_group: usize,
    out_per_group: usize,
    kh: usize,
    kw: usize,
    stride: usize,
}

fn plan<T: Scalar>(input: Shape, kernel: &Tensor<T>, geom: ConvGeometry) -> Result<Plan> {
    let k = kernel.shape();
    let (out_c, kh, kw) = (k.batch, k.height, k.width);
    if geom.stride == 0 {
        return Err(Error::invalid("conv2d: stride must be positive"));
    }
    let groups = match geom.mode {
        ConvMode::Standard | ConvMode::Pointwise => {
            if geom.mode == ConvMode::Pointwise && (kh != 1 || kw != 1) {
                return Err(Error::invalid(format!(
                    "conv2d: pointwise mode requires a 1x1 kernel, got {kh}x{kw}"
                )));
            }
            if k.channels != input.channels {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    expected: format!("input with {} channels for kernel {}", k.channels, k),
                    actual: format!("input {input}"),
                });
            }
            1
        }
        ConvMode::Depthwise => {
            if k.channels != 1 || out_c != input.channels {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    expected: format!(
                        "depthwise kernel {}x1x{}x{} for input {}",
                        input.channels, kh, kw, input
                    ),
                    actual: format!("kernel {k}"),
                });
            }
            input.channels
        }
    };
    let p = geom.padding.size;
    let (ph, pw) = (input.height + 2 * p, input.width + 2 * p);
    if kh == 0 || kw == 0 || ph < kh || pw < kw {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: format!("padded input at least {kh}x{kw}"),
            actual: format!("input {input} with padding {p}"),
        });
    }
    let out = Shape::new(
        input.batch,
        out_c,
        (ph - kh) / geom.stride + 1,
        (pw - kw) / geom.stride + 1,
    );
    Ok(Plan {
        input,
        padded_h: ph,
        padded_w: pw,
        out,
        in_per_group: input.channels / groups,
        out_per_group: out_c / groups,
        kh,
        kw,
        stride: geom.stride,
    })
}

#[inline]
fn source_index(pos: usize, pad: usize, len: usize, kind: PaddingKind) -> Option<usize> {
    let i = pos as isize - pad as isize;
    if i >= 0 && (i as usize) < len {
        return Some(i as usize);
    }
    match kind {
        PaddingKind::Zero => None,
        PaddingKind::Replicate => Some(i.clamp(0, len as isize - 1) as usize),
    }
}

fn pad_input<T: Scalar>(input: &Tensor<T>, plan: &Plan, padding: Padding) -> Vec<T> {
    let s = plan.input;
    let (ph, pw) = (plan.padded_h, plan.padded_w);
    if padding.size == 0 {
        return input.data().to_vec();
    }
    let mut out = vec![T::zero(); s.batch * s.channels * ph * pw];
    for n in 0..s.batch {
        for c in 0..s.channels {
            let src = input.plane(n, c);
            let dst = &mut out[(n * s.channels + c) * ph * pw..][..ph * pw];
            for y in 0..ph {
                let Some(sy) = source_index(y, padding.size, s.height, padding.kind) else {
                    continue;
                };
                for x in 0..pw {
                    if let Some(sx) = source_index(x, padding.size, s.width, padding.kind) {
                        dst[y * pw + x] = src[sy * s.width + sx];
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_raw<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&[T]>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let plan = plan(input.shape(), kernel, geom)?;
    if let Some(b) = bias {
        if b.len() != plan.out.channels {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: format!("bias of length {}", plan.out.channels),
                actual: format!("bias of length {}", b.len()),
            });
        }
    }
    let padded = pad_input(input, &plan, geom.padding);
    let s = plan.input;
    let o = plan.out;
    let (ph, pw) = (plan.padded_h, plan.padded_w);
    let (oh, ow, stride) = (o.height, o.width, plan.stride);
    let kd = kernel.data();
    let ksz = plan.kh * plan.kw;
    let mut out = vec![T::zero(); o.numel()];

    for n in 0..s.batch {
        for oc in 0..o.channels {
            let g = oc / plan.out_per_group;
            let plane = &mut out[(n * o.channels + oc) * oh * ow..][..oh * ow];
            if let Some(b) = bias {
                plane.iter_mut().for_each(|v| *v = b[oc]);
            }
            for ci in 0..plan.in_per_group {
                let c = g * plan.in_per_group + ci;
                let src = &padded[(n * s.channels + c) * ph * pw..][..ph * pw];
                let kbase = (oc * plan.in_per_group + ci) * ksz;
                for ky in 0..plan.kh {
                    for kx in 0..plan.kw {
                        let w = kd[kbase + ky * plan.kw + kx];
                        for y in 0..oh {
                            let row = &src[(y * stride + ky) * pw + kx..];
                            let orow = &mut plane[y * ow..(y + 1) * ow];
                            if stride == 1 {
                                for (ov, &iv) in orow.iter_mut().zip(&row[..ow]) {
                                    *ov += w * iv;
                                }
                            } else {
                                for (x, ov) in orow.iter_mut().enumerate() {
                                    *ov += w * row[x * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(o, out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    with_bias: bool,
    geom: ConvGeometry,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let plan = plan(input.shape(), kernel, geom)?;
    grad_out.expect_shape("conv2d_backward", plan.out)?;
    let padded = pad_input(input, &plan, geom.padding);
    let s = plan.input;
    let o = plan.out;
    let (ph, pw) = (plan.padded_h, plan.padded_w);
    let (oh, ow, stride) = (o.height, o.width, plan.stride);
    let kd = kernel.data();
    let gd = grad_out.data();
    let ksz = plan.kh * plan.kw;

    let mut gk = vec![T::zero(); kernel.len()];
    let mut gpad = vec![T::zero(); padded.len()];

    for n in 0..s.batch {
        for oc in 0..o.channels {
            let g = oc / plan.out_per_group;
            let gplane = &gd[(n * o.channels + oc) * oh * ow..][..oh * ow];
            for ci in 0..plan.in_per_group {
                let c = g * plan.in_per_group + ci;
                let base = (n * s.channels + c) * ph * pw;
                let src = &padded[base..base + ph * pw];
                let gsrc = &mut gpad[base..base + ph * pw];
                let kbase = (oc * plan.in_per_group + ci) * ksz;
                for ky in 0..plan.kh {
                    for kx in 0..plan.kw {
                        let w = kd[kbase + ky * plan.kw + kx];
                        let mut acc = T::zero();
                        for y in 0..oh {
                            let off = (y * stride + ky) * pw + kx;
                            let grow = &gplane[y * ow..(y + 1) * ow];
                            if stride == 1 {
                                let row = &src[off..off + ow];
                                let growp = &mut gsrc[off..off + ow];
                                for x in 0..ow {
                                    acc += grow[x] * row[x];
                                    growp[x] += w * grow[x];
                                }
                            } else {
                                for (x, &gv) in grow.iter().enumerate() {
                                    acc += gv * src[off + x * stride];
                                    gsrc[off + x * stride] += w * gv;
                                }
                            }
                        }
                        gk[kbase + ky * plan.kw + kx] += acc;
                    }
                }
            }
        }
    }

    let gbias = with_bias.then(|| {
        (0..o.channels)
            .map(|oc| {
                let mut acc = T::zero();
                for n in 0..s.batch {
                    acc += gd[(n * o.channels + oc) * oh * ow..][..oh * ow]
                        .iter()
                        .copied()
                        .sum::<T>();
                }
                acc
            })
            .collect()
    });

    let ginput = unpad_grad(&gpad, &plan, geom.padding);
    Ok(ConvGrads {
        input: ginput,
        kernel: Tensor::from_vec(kernel.shape(), gk)?,
        bias: gbias,
    })
}

fn unpad_grad<T: Scalar>(gpad: &[T], plan: &Plan, padding: Padding) -> Tensor<T> {
    let s = plan.input;
    if padding.size == 0 {
        return Tensor::from_vec(s, gpad.to_vec()).expect("unpadded gradient");
    }
    let (ph, pw) = (plan.padded_h, plan.padded_w);
    let mut out = Tensor::zeros(s);
    for n in 0..s.batch {
        for c in 0..s.channels {
            let src = &gpad[(n * s.channels + c) * ph * pw..][..ph * pw];
            for y in 0..ph {
                let Some(sy) = source_index(y, padding.size, s.height, padding.kind) else {
                    continue;
                };
                for x in 0..pw {
                    if let Some(sx) = source_index(x, padding.size, s.width, padding.kind) {
                        let i = out.offset(n, c, sy, sx);
                        out.data_mut()[i] += src[y * pw + x];
                    }
                }
            }
        }
    }
    out
}
