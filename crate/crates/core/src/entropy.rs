//! Information-entropy maps of grayscale images and their use as a
//! parameter-free attention over feature maps.
//!
//! The 2-D map is built from two sliding passes over the image. The first
//! pairs every pixel's gray value `i` with the rounded mean `j` of its
//! window. The second counts the `(i, j)` pairs inside each window and takes
//! their Shannon entropy in bits. A grayscale opening (3×3 min then max)
//! finally suppresses isolated peaks. Borders replicate the edge pixels in
//! every pass so the map has the same size as the image.

use crate::error::{Error, Result};
use crate::io::{encode_pgm, Netpbm};
use crate::ops::sigmoid_scalar;
use crate::tensor::{Scalar, Shape, Tensor};

/// Maximum 8-bit gray level.
pub const MAX_GRAY: usize = 255;
pub const DEFAULT_WINDOW: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved `r, g, b` bytes, row-major.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "rgb image {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(RgbImage { width, height, pixels })
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// `(1, 3, h, w)` tensor scaled to `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        let mut data = vec![T::zero(); 3 * plane];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = T::from_f64(px[c] as f64 / 255.0);
            }
        }
        Tensor::from_vec([1, 3, self.height, self.width], data).expect("rgb tensor")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "gray image {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    fn get_clamped(&self, x: isize, y: isize) -> u8 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }
}

impl TryFrom<Netpbm> for GrayImage {
    type Error = Error;

    fn try_from(img: Netpbm) -> Result<Self> {
        match img {
            Netpbm::Gray { width, height, pixels } => GrayImage::new(width, height, pixels),
            Netpbm::Rgb { width, height, pixels } => Ok(to_grayscale(&RgbImage::new(width, height, pixels)?)),
        }
    }
}

/// ITU-R BT.601 luma, rounded.
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    y.round().clamp(0.0, 255.0) as u8
}

pub fn to_grayscale(rgb: &RgbImage) -> GrayImage {
    let pixels = rgb.pixels.chunks_exact(3).map(|p| luma(p[0], p[1], p[2])).collect();
    GrayImage {
        width: rgb.width,
        height: rgb.height,
        pixels,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    bins: Vec<f64>,
}

impl Histogram {
    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if counts.len() != MAX_GRAY + 1 || total == 0 {
            return Err(Error::invalid("histogram needs 256 bins with positive total"));
        }
        Ok(Histogram {
            bins: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        })
    }
}

pub fn histogram(img: &GrayImage) -> Result<Histogram> {
    if img.pixels.is_empty() {
        return Err(Error::invalid("histogram of an empty image"));
    }
    let mut counts = vec![0usize; MAX_GRAY + 1];
    for &p in &img.pixels {
        counts[p as usize] += 1;
    }
    Histogram::from_counts(&counts)
}

/// `−Σ p log2 p` with `0·log 0 = 0`.
pub fn unary_entropy(h: &Histogram) -> f64 {
    shannon_bits(h.bins.iter().copied())
}

fn shannon_bits(probs: impl Iterator<Item = f64>) -> f64 {
    let mut h = 0.0;
    for p in probs {
        if p > 0.0 {
            h -= p * p.log2();
        }
    }
    // -0.0 for a single certain outcome
    h.max(0.0)
}

fn check_window(window: usize) -> Result<()> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "window must be an odd integer >= 3, got {window}"
        )));
    }
    Ok(())
}

/// Per-pixel `(gray value, rounded window mean)` pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairField {
    width: usize,
    height: usize,
    pairs: Vec<(u8, u8)>,
}

impl PairField {
    pub fn new(width: usize, height: usize, pairs: Vec<(u8, u8)>) -> Result<Self> {
        if pairs.len() != width * height || pairs.is_empty() {
            return Err(Error::invalid(format!(
                "pair field {width}x{height} needs {} pairs, got {}",
                width * height,
                pairs.len()
            )));
        }
        Ok(PairField { width, height, pairs })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pairs(&self) -> &[(u8, u8)] {
        &self.pairs
    }

    pub fn get(&self, x: usize, y: usize) -> (u8, u8) {
        self.pairs[y * self.width + x]
    }
}

/// First sliding pass. The window mean is rounded half up, computed in
/// integers as `(2·sum + n) / 2n`.
pub fn local_mean_pairs(img: &GrayImage, window: usize) -> Result<PairField> {
    check_window(window)?;
    let r = (window / 2) as isize;
    let n = window * window;
    let mut pairs = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height as isize {
        for x in 0..img.width as isize {
            let mut sum = 0usize;
            for dy in -r..=r {
                for dx in -r..=r {
                    sum += img.get_clamped(x + dx, y + dy) as usize;
                }
            }
            let mean = (2 * sum + n) / (2 * n);
            pairs.push((img.get(x as usize, y as usize), mean as u8));
        }
    }
    PairField::new(img.width, img.height, pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl EntropyMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::invalid(format!(
                "entropy map {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!("entropy values must be finite and >= 0, got {v}")));
        }
        Ok(EntropyMap { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// 8-bit rendering, `0 → 0` and `full_scale → 255`.
    pub fn to_gray(&self, full_scale: f64) -> GrayImage {
        let pixels = self
            .values
            .iter()
            .map(|v| (v / full_scale * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            pixels,
        }
    }

    /// PGM bytes scaled linearly so `full_scale` bits map to 255.
    pub fn to_pgm(&self, full_scale: f64) -> Vec<u8> {
        let note = format!("entropy map, linear scale: 0 bits -> 0, {full_scale:.6} bits -> 255");
        encode_pgm(self.width, self.height, &[&note], self.to_gray(full_scale).pixels())
    }

    /// `(1, 1, h, w)` tensor of the raw values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, 1, self.height, self.width],
            self.values.iter().map(|&v| T::from_f64(v)).collect(),
        )
        .expect("entropy tensor")
    }
}

/// Entropy in bits of a small multiset, summed in ascending key order.
fn window_entropy<K: Ord + Copy>(items: &mut [K]) -> f64 {
    items.sort_unstable();
    let n = items.len() as f64;
    let mut probs = Vec::with_capacity(items.len());
    let mut run = 1usize;
    for i in 1..=items.len() {
        if i < items.len() && items[i] == items[i - 1] {
            run += 1;
        } else {
            probs.push(run as f64 / n);
            run = 1;
        }
    }
    shannon_bits(probs.into_iter())
}

/// Second sliding pass: entropy of the `(i, j)` pairs inside each window,
/// with `p_ij = count / window²`.
pub fn window_2d_entropy(pairs: &PairField, window: usize) -> Result<EntropyMap> {
    check_window(window)?;
    let r = (window / 2) as isize;
    let (w, h) = (pairs.width as isize, pairs.height as isize);
    let mut scratch = Vec::with_capacity(window * window);
    let mut values = Vec::with_capacity(pairs.pairs.len());
    for y in 0..h {
        for x in 0..w {
            scratch.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    let sx = (x + dx).clamp(0, w - 1) as usize;
                    let sy = (y + dy).clamp(0, h - 1) as usize;
                    scratch.push(pairs.get(sx, sy));
                }
            }
            values.push(window_entropy(&mut scratch));
        }
    }
    EntropyMap::new(pairs.width, pairs.height, values)
}

/// One-pass variant: entropy of the raw gray values in each window.
pub fn window_1d_entropy(img: &GrayImage, window: usize) -> Result<EntropyMap> {
    check_window(window)?;
    let r = (window / 2) as isize;
    let mut scratch = Vec::with_capacity(window * window);
    let mut values = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height as isize {
        for x in 0..img.width as isize {
            scratch.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    scratch.push(img.get_clamped(x + dx, y + dy));
                }
            }
            values.push(window_entropy(&mut scratch));
        }
    }
    EntropyMap::new(img.width, img.height, values)
}

fn rank_filter(map: &EntropyMap, radius: isize, pick: fn(f64, f64) -> f64) -> EntropyMap {
    let mut values = Vec::with_capacity(map.values.len());
    for y in 0..map.height as isize {
        for x in 0..map.width as isize {
            let mut acc = map.get(x as usize, y as usize);
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    acc = pick(acc, map.get_clamped(x + dx, y + dy));
                }
            }
            values.push(acc);
        }
    }
    EntropyMap {
        width: map.width,
        height: map.height,
        values,
    }
}

pub fn erode(map: &EntropyMap) -> EntropyMap {
    rank_filter(map, 1, f64::min)
}

pub fn dilate(map: &EntropyMap) -> EntropyMap {
    rank_filter(map, 1, f64::max)
}

/// Grayscale opening with a 3×3 square structuring element.
pub fn morphological_open(map: &EntropyMap) -> EntropyMap {
    dilate(&erode(map))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IeOptions {
    pub window: usize,
    /// 2 for the pair-entropy map, 1 for plain per-window gray entropy.
    pub passes: usize,
    pub open: bool,
}

impl Default for IeOptions {
    fn default() -> Self {
        IeOptions {
            window: DEFAULT_WINDOW,
            passes: 2,
            open: true,
        }
    }
}

impl IeOptions {
    /// Largest value the map can hold: `log2(window²)`.
    pub fn max_bits(&self) -> f64 {
        ((self.window * self.window) as f64).log2()
    }
}

/// The default entropy map: 3×3 pair pass, 3×3 entropy pass, then opening.
pub fn ie_map(img: &GrayImage) -> Result<EntropyMap> {
    ie_map_with(img, &IeOptions::default())
}

pub fn ie_map_with(img: &GrayImage, opts: &IeOptions) -> Result<EntropyMap> {
    check_window(opts.window)?;
    if img.width < opts.window || img.height < opts.window {
        return Err(Error::invalid(format!(
            "image {}x{} is smaller than the minimum {w}x{w}",
            img.width,
            img.height,
            w = opts.window
        )));
    }
    let raw = match opts.passes {
        2 => window_2d_entropy(&local_mean_pairs(img, opts.window)?, opts.window)?,
        1 => window_1d_entropy(img, opts.window)?,
        p => return Err(Error::invalid(format!("passes must be 1 or 2, got {p}"))),
    };
    Ok(if opts.open { morphological_open(&raw) } else { raw })
}

/// `σ(avg_pool(m))` at `(height, width)`, repeated over `batch`.
pub fn attention_gate<T: Scalar>(m: &EntropyMap, height: usize, width: usize, batch: usize) -> Result<Tensor<T>> {
    let pooling_error = || Error::ShapeMismatch {
        op: "feature_enhance",
        expected: format!("entropy map an integer multiple of {height}x{width}"),
        actual: format!("entropy map {}x{}", m.height, m.width),
    };
    if height == 0 || width == 0 || !m.height.is_multiple_of(height) || !m.width.is_multiple_of(width) {
        return Err(pooling_error());
    }
    let factor = m.height / height;
    if m.width / width != factor {
        return Err(pooling_error());
    }
    let inv = 1.0 / (factor * factor) as f64;
    let mut gate = Vec::with_capacity(height * width);
    for oy in 0..height {
        for ox in 0..width {
            let mut acc = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += m.get(ox * factor + dx, oy * factor + dy);
                }
            }
            gate.push(T::from_f64(sigmoid_scalar(acc * inv)));
        }
    }
    let mut data = Vec::with_capacity(batch * gate.len());
    for _ in 0..batch {
        data.extend_from_slice(&gate);
    }
    Tensor::from_vec(Shape::new(batch, 1, height, width), data)
}

/// `f' = σ(pool(m)) ⊙ f`, the gate broadcast over every channel.
pub fn feature_enhance<T: Scalar>(f: &Tensor<T>, m: &EntropyMap) -> Result<Tensor<T>> {
    let s = f.shape();
    let gate = attention_gate(m, s.height, s.width, s.batch)?;
    crate::ops::scale_channels(f, &gate)
}
