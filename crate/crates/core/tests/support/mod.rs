//! Independent reference implementations used as test oracles. Everything
//! here is written as plain nested loops over `f64` with explicit bounds
//! checks, sharing no code with the library kernels.

#![allow(dead_code)]

use std::collections::BTreeMap;

use tdet_core::cells::{ConvGruWeights, DenseCellWeights, GruWeights, SqueezeFactorization, SqueezedGate};
use tdet_core::entropy::{EntropyMap, GrayImage};
use tdet_core::{Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Border {
    Zero,
    Replicate,
}

/// Direct convolution. `groups` splits input and output channels evenly.
pub fn conv_ref(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    border: Border,
    groups: usize,
) -> Tensor<f64> {
    let s = x.shape();
    let ks = k.shape();
    let (oc, icg, kh, kw) = (ks.batch, ks.channels, ks.height, ks.width);
    let ocg = oc / groups;
    let oh = (s.height + 2 * pad - kh) / stride + 1;
    let ow = (s.width + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([s.batch, oc, oh, ow]);
    for n in 0..s.batch {
        for o in 0..oc {
            let g = o / ocg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for ci in 0..icg {
                        let c = g * icg + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let inside = iy >= 0 && ix >= 0 && (iy as usize) < s.height && (ix as usize) < s.width;
                                let v = if inside {
                                    x.at(n, c, iy as usize, ix as usize)
                                } else if border == Border::Replicate {
                                    let cy = iy.clamp(0, s.height as isize - 1) as usize;
                                    let cx = ix.clamp(0, s.width as isize - 1) as usize;
                                    x.at(n, c, cy, cx)
                                } else {
                                    0.0
                                };
                                acc += v * k.at(o, ci, ky, kx);
                            }
                        }
                    }
                    out.set(n, o, oy, ox, acc);
                }
            }
        }
    }
    out
}

fn same_zero(x: &Tensor<f64>, k: &Tensor<f64>, bias: Option<&[f64]>, groups: usize) -> Tensor<f64> {
    let pad = k.shape().height / 2;
    conv_ref(x, k, bias, 1, pad, Border::Zero, groups)
}

fn cat(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (sa, sb) = (a.shape(), b.shape());
    let mut out = Tensor::zeros([sa.batch, sa.channels + sb.channels, sa.height, sa.width]);
    for n in 0..sa.batch {
        for y in 0..sa.height {
            for x in 0..sa.width {
                for c in 0..sa.channels {
                    out.set(n, c, y, x, a.at(n, c, y, x));
                }
                for c in 0..sb.channels {
                    out.set(n, sa.channels + c, y, x, b.at(n, c, y, x));
                }
            }
        }
    }
    out
}

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn each(t: &Tensor<f64>, f: impl Fn(f64) -> f64) -> Tensor<f64> {
    Tensor::from_vec(t.shape(), t.data().iter().map(|&v| f(v)).collect()).unwrap()
}

fn each2(a: &Tensor<f64>, b: &Tensor<f64>, f: impl Fn(f64, f64) -> f64) -> Tensor<f64> {
    assert_eq!(a.shape(), b.shape());
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()).unwrap()
}

fn gru_update(z: &Tensor<f64>, h: &Tensor<f64>, cand: &Tensor<f64>) -> Tensor<f64> {
    let keep = each2(z, h, |z, h| (1.0 - z) * h);
    let add = each2(z, cand, |z, c| z * c);
    each2(&keep, &add, |a, b| a + b)
}

fn squeezed_gate_ref(input: &Tensor<f64>, g: &SqueezedGate<f64>) -> Tensor<f64> {
    let reduced = match &g.reduce {
        Some(r) => same_zero(input, r, None, 1),
        None => input.clone(),
    };
    let c = reduced.shape().channels;
    let dw = same_zero(&reduced, &g.depthwise, None, c);
    same_zero(&dw, &g.pointwise, Some(g.bias.data()), 1)
}

pub struct GateTrace {
    pub z: Tensor<f64>,
    pub r: Tensor<f64>,
    pub candidate: Tensor<f64>,
    pub h: Tensor<f64>,
}

pub fn squeezed_gru_ref(x: &Tensor<f64>, h: &Tensor<f64>, w: &GruWeights<f64>) -> GateTrace {
    let xin = match (&w.factorization, &w.input_reduce) {
        (SqueezeFactorization::SharedInput, Some(k)) => same_zero(x, k, None, 1),
        _ => x.clone(),
    };
    let xh = cat(&xin, h);
    let z = each(&squeezed_gate_ref(&xh, &w.z), sig);
    let r = each(&squeezed_gate_ref(&xh, &w.r), sig);
    let rh = each2(&r, h, |a, b| a * b);
    let candidate = each(&squeezed_gate_ref(&cat(&xin, &rh), &w.h), f64::tanh);
    let h = gru_update(&z, h, &candidate);
    GateTrace { z, r, candidate, h }
}

pub fn conv_gru_ref(x: &Tensor<f64>, h: &Tensor<f64>, w: &ConvGruWeights<f64>) -> Tensor<f64> {
    let xh = cat(x, h);
    let z = each(&same_zero(&xh, &w.kernels[0], Some(w.biases[0].data()), 1), sig);
    let r = each(&same_zero(&xh, &w.kernels[1], Some(w.biases[1].data()), 1), sig);
    let rh = each2(&r, h, |a, b| a * b);
    let cand = each(&same_zero(&cat(x, &rh), &w.kernels[2], Some(w.biases[2].data()), 1), f64::tanh);
    gru_update(&z, h, &cand)
}

/// `W · v + b` with `W` stored as `(rows, cols, 1, 1)`.
fn matvec(w: &Tensor<f64>, b: &Tensor<f64>, v: &[f64]) -> Vec<f64> {
    let s = w.shape();
    (0..s.batch)
        .map(|r| b.data()[r] + (0..s.channels).map(|c| w.at(r, c, 0, 0) * v[c]).sum::<f64>())
        .collect()
}

pub fn dense_gru_ref(x: &[f64], h: &[f64], w: &DenseCellWeights<f64>) -> Vec<f64> {
    let xh: Vec<f64> = x.iter().chain(h).copied().collect();
    let z: Vec<f64> = matvec(&w.matrices[0], &w.biases[0], &xh).into_iter().map(sig).collect();
    let r: Vec<f64> = matvec(&w.matrices[1], &w.biases[1], &xh).into_iter().map(sig).collect();
    let xrh: Vec<f64> = x.iter().copied().chain(r.iter().zip(h).map(|(a, b)| a * b)).collect();
    let c: Vec<f64> = matvec(&w.matrices[2], &w.biases[2], &xrh).into_iter().map(f64::tanh).collect();
    (0..h.len()).map(|i| (1.0 - z[i]) * h[i] + z[i] * c[i]).collect()
}

pub fn dense_lstm_ref(x: &[f64], h: &[f64], c: &[f64], w: &DenseCellWeights<f64>) -> (Vec<f64>, Vec<f64>) {
    let xh: Vec<f64> = x.iter().chain(h).copied().collect();
    let gate = |k: usize| matvec(&w.matrices[k], &w.biases[k], &xh);
    let (i, f, g, o) = (gate(0), gate(1), gate(2), gate(3));
    let c_new: Vec<f64> = (0..c.len()).map(|k| sig(f[k]) * c[k] + sig(i[k]) * g[k].tanh()).collect();
    let h_new = (0..c.len()).map(|k| sig(o[k]) * c_new[k].tanh()).collect();
    (h_new, c_new)
}

pub fn window_means_ref(img: &GrayImage, window: usize) -> Vec<(u8, u8)> {
    let r = (window / 2) as isize;
    let (w, h) = (img.width() as isize, img.height() as isize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    sum += img.get((x + dx).clamp(0, w - 1) as usize, (y + dy).clamp(0, h - 1) as usize) as f64;
                }
            }
            let mean = (sum / (window * window) as f64).round();
            out.push((img.get(x as usize, y as usize), mean as u8));
        }
    }
    out
}

/// Pair entropy per pixel by enumerating each window into a map.
pub fn pair_entropy_ref(field: &[(u8, u8)], width: usize, height: usize, window: usize) -> Vec<f64> {
    let r = (window / 2) as isize;
    let (w, h) = (width as isize, height as isize);
    let n = (window * window) as f64;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut counts: BTreeMap<(u8, u8), usize> = BTreeMap::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    let sx = (x + dx).clamp(0, w - 1);
                    let sy = (y + dy).clamp(0, h - 1);
                    *counts.entry(field[(sy * w + sx) as usize]).or_default() += 1;
                }
            }
            let mut e = 0.0;
            for &c in counts.values() {
                let p = c as f64 / n;
                e -= p * p.log2();
            }
            out.push(e.max(0.0));
        }
    }
    out
}

/// 3×3 minimum sweep then 3×3 maximum sweep, clamped borders.
pub fn open_ref(values: &[f64], width: usize, height: usize) -> Vec<f64> {
    let sweep = |src: &[f64], take_max: bool| -> Vec<f64> {
        let mut dst = vec![0.0; src.len()];
        for y in 0..height {
            for x in 0..width {
                let mut best = src[y * width + x];
                for yy in y.saturating_sub(1)..=(y + 1).min(height - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(width - 1) {
                        let v = src[yy * width + xx];
                        if (take_max && v > best) || (!take_max && v < best) {
                            best = v;
                        }
                    }
                }
                dst[y * width + x] = best;
            }
        }
        dst
    };
    sweep(&sweep(values, false), true)
}

pub fn histogram_ref(pixels: &[u8]) -> Vec<f64> {
    let mut counts = [0usize; 256];
    for &p in pixels {
        counts[p as usize] += 1;
    }
    counts.iter().map(|&c| c as f64 / pixels.len() as f64).collect()
}

pub fn feature_enhance_ref(f: &Tensor<f64>, m: &EntropyMap) -> Tensor<f64> {
    let s = f.shape();
    let factor = m.height() / s.height;
    let mut out = f.clone();
    for y in 0..s.height {
        for x in 0..s.width {
            let mut acc = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += m.get(x * factor + dx, y * factor + dy);
                }
            }
            let gate = sig(acc / (factor * factor) as f64);
            for n in 0..s.batch {
                for c in 0..s.channels {
                    out.set(n, c, y, x, f.at(n, c, y, x) * gate);
                }
            }
        }
    }
    out
}

/// Shifts every plane by `(dy, dx)`, filling vacated pixels with zero.
pub fn shift(t: &Tensor<f64>, dy: isize, dx: isize) -> Tensor<f64> {
    let s: Shape = t.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.batch {
        for c in 0..s.channels {
            for y in 0..s.height as isize {
                for x in 0..s.width as isize {
                    let (sy, sx) = (y - dy, x - dx);
                    if sy >= 0 && sx >= 0 && sy < s.height as isize && sx < s.width as isize {
                        out.set(n, c, y as usize, x as usize, t.at(n, c, sy as usize, sx as usize));
                    }
                }
            }
        }
    }
    out
}
