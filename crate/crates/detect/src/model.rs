//! Tiny anchor-based detector with optional entropy attention and a squeezed
//! GRU spliced in at named attachment points.
//!
//! ```text
//! image ─ stage-1 ─ stage-2 ─ stage-3 ─ stage-4 ─ extra-map-1 ─ extra-map-2
//!                              │          │           │             │
//!                             head       head        head          head
//! ```
//!
//! Each stage is a stride-2 3×3 convolution with ReLU. At an attachment
//! point the feature map is first scaled by the entropy gate (if placed
//! there), then replaced by the GRU output (if placed there), and the result
//! feeds both the next stage and any head reading that point.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tdet_core::autograd::{Tape, Var};
use tdet_core::cells::{GruWeights, RecurrentCell, SqueezeFactorization};
use tdet_core::conv::{ConvGeometry, ConvMode, Padding};
use tdet_core::entropy::{attention_gate, EntropyMap};
use tdet_core::init::{conv_kernel, fan_in_uniform};
use tdet_core::io::{read_tensor, write_tensor};
use tdet_core::{Error, Result, Shape, Tensor};

use crate::boxes::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Placement {
    None,
    Stage(usize),
    ExtraMap(usize),
}

impl Placement {
    /// Every attachment point, shallow to deep, after `None`.
    pub const ALL: [Placement; 7] = [
        Placement::None,
        Placement::Stage(1),
        Placement::Stage(2),
        Placement::Stage(3),
        Placement::Stage(4),
        Placement::ExtraMap(1),
        Placement::ExtraMap(2),
    ];

    /// Position in the feature chain, or `None` for [`Placement::None`].
    pub fn level(self) -> Option<usize> {
        match self {
            Placement::None => None,
            Placement::Stage(k) => Some(k - 1),
            Placement::ExtraMap(k) => Some(3 + k),
        }
    }

    fn from_level(level: usize) -> Placement {
        if level < 4 {
            Placement::Stage(level + 1)
        } else {
            Placement::ExtraMap(level - 3)
        }
    }

    pub fn valid_names() -> String {
        Placement::ALL.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::None => write!(f, "none"),
            Placement::Stage(k) => write!(f, "stage-{k}"),
            Placement::ExtraMap(k) => write!(f, "extra-map-{k}"),
        }
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Placement::ALL
            .into_iter()
            .find(|p| p.to_string() == lower)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("unknown placement '{s}'; valid: {}", Placement::valid_names()))
            })
    }
}

impl Serialize for Placement {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Placement {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub stage_widths: [usize; 4],
    pub extra_widths: [usize; 2],
    /// Attachment points that carry a detection head.
    pub heads: Vec<Placement>,
    /// Square anchor side per head; each head gets `{s, 1.4·s} × {1:1, 2:1}`.
    pub anchor_sizes: Vec<f32>,
    pub gru_placement: Placement,
    pub ie_placement: Placement,
    pub gru_kernel: usize,
    pub gru_factorization: SqueezeFactorization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 48,
            num_classes: 3,
            stage_widths: [8, 16, 32, 64],
            extra_widths: [64, 64],
            heads: vec![
                Placement::Stage(3),
                Placement::Stage(4),
                Placement::ExtraMap(1),
                Placement::ExtraMap(2),
            ],
            anchor_sizes: vec![10.0, 17.0, 28.0, 40.0],
            gru_placement: Placement::None,
            ie_placement: Placement::None,
            gru_kernel: 3,
            gru_factorization: SqueezeFactorization::PerGate,
        }
    }
}

pub const ANCHORS_PER_CELL: usize = 4;
const ANCHOR_SCALE_STEP: f32 = 1.4;

impl ModelConfig {
    pub fn channels_at(&self, level: usize) -> usize {
        if level < 4 {
            self.stage_widths[level]
        } else {
            self.extra_widths[level - 4]
        }
    }

    /// Spatial side of the feature map at each level.
    pub fn map_sizes(&self) -> [usize; 6] {
        let mut sizes = [0; 6];
        let mut side = self.image_size;
        for s in &mut sizes {
            side = side.div_ceil(2);
            *s = side;
        }
        sizes
    }

    /// Channels per head cell: box offsets plus background and class logits.
    pub fn head_depth(&self) -> usize {
        4 + self.num_classes + 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.image_size < 32 {
            return fail(format!("image_size must be >= 32, got {}", self.image_size));
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if self.heads.is_empty() || self.heads.len() != self.anchor_sizes.len() {
            return fail(format!(
                "{} heads need as many anchor sizes, got {}",
                self.heads.len(),
                self.anchor_sizes.len()
            ));
        }
        if self.heads.contains(&Placement::None) {
            return fail("a head cannot sit at placement none".into());
        }
        if self.stage_widths.iter().chain(&self.extra_widths).any(|&w| w == 0) {
            return fail("layer widths must be positive".into());
        }
        let sizes = self.map_sizes();
        for p in [self.ie_placement, self.gru_placement] {
            if let Some(l) = p.level() {
                if !self.image_size.is_multiple_of(sizes[l]) {
                    return fail(format!("placement {p}: map {} does not divide image {}", sizes[l], self.image_size));
                }
            }
        }
        Ok(())
    }

    pub fn anchors(&self) -> Vec<BBox> {
        let sizes = self.map_sizes();
        let mut out = Vec::new();
        for (head, &base) in self.heads.iter().zip(&self.anchor_sizes) {
            let side = sizes[head.level().expect("head placement")];
            let stride = self.image_size as f32 / side as f32;
            for y in 0..side {
                for x in 0..side {
                    let (cx, cy) = ((x as f32 + 0.5) * stride, (y as f32 + 0.5) * stride);
                    for scale in [base, base * ANCHOR_SCALE_STEP] {
                        for ratio in [1.0f32, 2.0] {
                            let (w, h) = (scale * ratio.sqrt(), scale / ratio.sqrt());
                            out.push(BBox::from_center(cx, cy, w, h).expect("positive anchor"));
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor<f32>,
    pub bias: Tensor<f32>,
}

impl ConvLayer {
    fn random(out_c: usize, in_c: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvLayer {
            kernel: conv_kernel([out_c, in_c, k, k], rng),
            bias: fan_in_uniform(Shape::new(1, out_c, 1, 1), in_c * k * k, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// Four backbone stages then the two extra maps.
    pub layers: Vec<ConvLayer>,
    pub heads: Vec<ConvLayer>,
    pub gru: Option<GruWeights<f32>>,
}

const DOWNSAMPLE: ConvGeometry = ConvGeometry::new(2, Padding::zero(1), ConvMode::Standard);
const HEAD: ConvGeometry = ConvGeometry::new(1, Padding::zero(1), ConvMode::Standard);

/// Per-frame inputs for one batch of clips at one time step.
pub struct FrameBatch<'a> {
    /// `(batch, 3, size, size)` in `[-0.5, 0.5]`.
    pub images: &'a Tensor<f32>,
    /// Entropy map per image; required when the entropy gate is placed.
    pub entropy: &'a [&'a EntropyMap],
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(6);
        let mut in_c = 3;
        for level in 0..6 {
            let out_c = config.channels_at(level);
            layers.push(ConvLayer::random(out_c, in_c, 3, &mut rng));
            in_c = out_c;
        }
        let depth = ANCHORS_PER_CELL * config.head_depth();
        let heads = config
            .heads
            .iter()
            .map(|h| ConvLayer::random(depth, config.channels_at(h.level().expect("head")), 3, &mut rng))
            .collect();
        let gru = match config.gru_placement.level() {
            None => None,
            Some(l) => {
                let c = config.channels_at(l);
                Some(GruWeights::random(c, c, config.gru_kernel, config.gru_factorization, &mut rng)?)
            }
        };
        Ok(Model {
            config,
            layers,
            heads,
            gru,
        })
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let name = Placement::from_level(i);
            out.push((format!("{name}.kernel"), &l.kernel));
            out.push((format!("{name}.bias"), &l.bias));
        }
        for (h, l) in self.config.heads.iter().zip(&self.heads) {
            out.push((format!("head@{h}.kernel"), &l.kernel));
            out.push((format!("head@{h}.bias"), &l.bias));
        }
        if let Some(g) = &self.gru {
            for (n, t) in g.params() {
                out.push((format!("gru.{n}"), t));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut().chain(self.heads.iter_mut()) {
            out.push(&mut l.kernel);
            out.push(&mut l.bias);
        }
        if let Some(g) = &mut self.gru {
            out.extend(g.params_mut());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn param_leaves(&self, tape: &mut Tape<f32>) -> Vec<Var> {
        self.params().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect()
    }

    /// Hidden state shape for a batch, if the model has a GRU.
    pub fn state_shape(&self, batch: usize) -> Option<Shape> {
        let l = self.config.gru_placement.level()?;
        let side = self.config.map_sizes()[l];
        Some(Shape::new(batch, self.config.channels_at(l), side, side))
    }

    /// One frame through the network. Returns the gathered head outputs
    /// `(batch, 1, anchors, depth)` and the next hidden state.
    pub fn forward_frame(
        &self,
        tape: &mut Tape<f32>,
        leaves: &[Var],
        frame: &FrameBatch<'_>,
        state: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        let cfg = &self.config;
        let batch = frame.images.shape().batch;
        let head_base = 2 * self.layers.len();
        let gru_base = head_base + 2 * self.heads.len();
        let ie_level = cfg.ie_placement.level();
        let gru_level = cfg.gru_placement.level();

        let mut x = tape.leaf(frame.images.clone());
        let mut next_state = None;
        let mut head_out = Vec::with_capacity(self.heads.len());
        for level in 0..self.layers.len() {
            let conv = tape.conv2d(x, leaves[2 * level], Some(leaves[2 * level + 1]), DOWNSAMPLE)?;
            x = tape.relu(conv);
            if ie_level == Some(level) {
                if frame.entropy.len() != batch {
                    return Err(Error::InvalidArgument(format!(
                        "entropy gate at {}: {} maps for a batch of {batch}",
                        cfg.ie_placement,
                        frame.entropy.len()
                    )));
                }
                let s = tape.shape(x);
                let mut gate = Vec::with_capacity(batch * s.plane());
                for m in frame.entropy {
                    gate.extend_from_slice(attention_gate::<f32>(m, s.height, s.width, 1)?.data());
                }
                x = tape.scale_channels(x, Tensor::from_vec(Shape::new(batch, 1, s.height, s.width), gate)?)?;
            }
            if gru_level == Some(level) {
                let gru = self.gru.as_ref().expect("gru weights");
                let h_prev = match state {
                    Some(h) => h,
                    None => tape.leaf(Tensor::zeros(tape.shape(x))),
                };
                x = gru.step_on(tape, &leaves[gru_base..], x, h_prev)?;
                next_state = Some(x);
            }
            for (i, h) in cfg.heads.iter().enumerate() {
                if h.level() == Some(level) {
                    let k = head_base + 2 * i;
                    head_out.push((i, tape.conv2d(x, leaves[k], Some(leaves[k + 1]), HEAD)?));
                }
            }
        }
        head_out.sort_by_key(|&(i, _)| i);
        let outs: Vec<Var> = head_out.into_iter().map(|(_, v)| v).collect();
        let gathered = tape.gather_anchors(&outs, ANCHORS_PER_CELL, cfg.head_depth())?;
        Ok((gathered, next_state))
    }

    /// Writes `model.json` (configuration and parameter manifest) and one
    /// tensor dump per parameter into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (i, (name, t)) in self.params().into_iter().enumerate() {
            let file = format!("p{i:03}.bin");
            write_tensor(&dir.join(&file), t)?;
            entries.push(ParamRecord {
                name,
                shape: t.shape().dims(),
                file,
            });
        }
        let record = ModelRecord {
            config: self.config.clone(),
            params: entries,
        };
        fs::write(dir.join("model.json"), serde_json::to_string_pretty(&record)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let record: ModelRecord = serde_json::from_slice(&fs::read(dir.join("model.json"))?)?;
        let mut model = Model::new(record.config, 0)?;
        let expected: Vec<(String, Shape)> = model.params().into_iter().map(|(n, t)| (n, t.shape())).collect();
        if expected.len() != record.params.len() {
            return Err(Error::Format(format!(
                "model.json lists {} parameters, configuration needs {}",
                record.params.len(),
                expected.len()
            )));
        }
        let mut loaded = Vec::with_capacity(expected.len());
        for (rec, (name, shape)) in record.params.iter().zip(&expected) {
            let t: Tensor<f32> = read_tensor(&dir.join(&rec.file))?;
            if &rec.name != name || t.shape() != *shape {
                return Err(Error::Format(format!(
                    "parameter {} {} does not match expected {name} {shape}",
                    rec.name,
                    t.shape()
                )));
            }
            loaded.push(t);
        }
        for (slot, t) in model.params_mut().into_iter().zip(loaded) {
            *slot = t;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: [usize; 4],
    file: String,
}

#[derive(Serialize, Deserialize)]
struct ModelRecord {
    config: ModelConfig,
    params: Vec<ParamRecord>,
}
