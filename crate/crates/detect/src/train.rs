//! RMSprop training with backpropagation through whole clips.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tdet_core::autograd::{Tape, Var};
use tdet_core::entropy::{ie_map, to_grayscale, EntropyMap};
use tdet_core::{Error, Result, Shape, Tensor};

use crate::data::{Annotation, ToySequence};
use crate::loss::{ssd_loss, AnchorTargets, LossParts};
use crate::model::{FrameBatch, Model, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    /// Smoothing constant of the squared-gradient average.
    pub decay: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Clips per update.
    pub batch_size: usize,
    /// Frames per clip used for backpropagation through time.
    pub seq_len: usize,
    pub pos_iou: f32,
    /// Global gradient-norm ceiling, if any.
    pub grad_clip: Option<f64>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            lr: 3e-4,
            momentum: 0.9,
            decay: 0.9,
            eps: 1e-8,
            epochs: 60,
            batch_size: 4,
            seq_len: 10,
            pos_iou: 0.5,
            grad_clip: Some(10.0),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.decay) {
            return fail(format!("momentum {} and decay {} must lie in [0, 1)", self.momentum, self.decay));
        }
        if !(self.eps > 0.0) {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        if self.seq_len == 0 || self.batch_size == 0 {
            return fail("seq_len and batch_size must be >= 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail(format!("grad_clip must be positive, got {c}"));
            }
        }
        self.model.validate()
    }
}

/// A frame with everything the network and the loss need, computed once.
#[derive(Clone, Debug)]
pub struct PreparedFrame {
    /// `(1, 3, size, size)`, centred on zero.
    pub image: Tensor<f32>,
    pub entropy: EntropyMap,
    pub targets: AnchorTargets,
    pub objects: Vec<Annotation>,
    pub blurred: bool,
}

#[derive(Clone, Debug)]
pub struct PreparedClip {
    pub frames: Vec<PreparedFrame>,
}

/// Converts clips to network inputs and anchor targets for `cfg`.
pub fn prepare(sequences: &[ToySequence], cfg: &ModelConfig, pos_iou: f32) -> Result<Vec<PreparedClip>> {
    let anchors = cfg.anchors();
    sequences
        .iter()
        .map(|seq| {
            let frames = seq
                .frames
                .iter()
                .map(|f| {
                    if f.image.width != cfg.image_size || f.image.height != cfg.image_size {
                        return Err(Error::invalid(format!(
                            "frame is {}x{}, model expects {}x{}",
                            f.image.width, f.image.height, cfg.image_size, cfg.image_size
                        )));
                    }
                    Ok(PreparedFrame {
                        image: f.image.to_tensor::<f32>().map(|v| v - 0.5),
                        entropy: ie_map(&to_grayscale(&f.image))?,
                        targets: AnchorTargets::build(&anchors, &f.objects, pos_iou),
                        objects: f.objects.clone(),
                        blurred: f.blurred,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(PreparedClip { frames })
        })
        .collect()
}

/// Stacks frame `t` of every clip along the batch dimension.
pub(crate) fn stack_frame(clips: &[&PreparedClip], t: usize) -> Result<Tensor<f32>> {
    let s = clips[0].frames[t].image.shape();
    let mut data = Vec::with_capacity(clips.len() * s.numel());
    for c in clips {
        data.extend_from_slice(c.frames[t].image.data());
    }
    Tensor::from_vec(Shape::new(clips.len(), s.channels, s.height, s.width), data)
}

/// Runs `clips` through the model for `frames` steps, calling `per_frame`
/// with the gathered predictions of each step.
pub(crate) fn unroll(
    model: &Model,
    tape: &mut Tape<f32>,
    leaves: &[Var],
    clips: &[&PreparedClip],
    frames: usize,
    mut per_frame: impl FnMut(&mut Tape<f32>, usize, Var) -> Result<()>,
) -> Result<()> {
    let mut state = None;
    for t in 0..frames {
        let images = stack_frame(clips, t)?;
        let maps: Vec<&EntropyMap> = clips.iter().map(|c| &c.frames[t].entropy).collect();
        let batch = FrameBatch {
            images: &images,
            entropy: &maps,
        };
        let (pred, next) = model.forward_frame(tape, leaves, &batch, state)?;
        state = next;
        per_frame(tape, t, pred)?;
    }
    Ok(())
}

/// Mean per-frame loss over a batch of clips and its parameter gradients.
pub fn loss_and_grads(model: &Model, clips: &[&PreparedClip], frames: usize) -> Result<(LossParts, Vec<Tensor<f32>>)> {
    let mut tape = Tape::new();
    let leaves = model.param_leaves(&mut tape);
    let mut total: Option<Var> = None;
    let mut parts = LossParts::default();
    unroll(model, &mut tape, &leaves, clips, frames, |tape, t, pred| {
        let targets: Vec<AnchorTargets> = clips.iter().map(|c| c.frames[t].targets.clone()).collect();
        let (l, p) = ssd_loss(tape, pred, &targets)?;
        parts.loc += p.loc / frames as f64;
        parts.cls += p.cls / frames as f64;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
        Ok(())
    })?;
    let root = tape.scale(total.expect("at least one frame"), 1.0 / frames as f32);
    let grads = tape.backward(root)?;
    let out = leaves
        .iter()
        .map(|&v| grads.get_or_zeros(v, tape.shape(v)))
        .collect();
    Ok((parts, out))
}

/// PyTorch-style RMSprop with momentum.
#[derive(Clone, Debug)]
pub struct RmsProp {
    lr: f64,
    momentum: f64,
    decay: f64,
    eps: f64,
    square_avg: Vec<Vec<f64>>,
    buffer: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(cfg: &TrainConfig, params: &[&mut Tensor<f32>]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        RmsProp {
            lr: cfg.lr,
            momentum: cfg.momentum,
            decay: cfg.decay,
            eps: cfg.eps,
            square_avg: zeros.clone(),
            buffer: zeros,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<f32>>, grads: &[Tensor<f32>]) {
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (v, buf) = (&mut self.square_avg[i], &mut self.buffer[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj as f64;
                v[j] = self.decay * v[j] + (1.0 - self.decay) * gj * gj;
                buf[j] = self.momentum * buf[j] + gj / (v[j].sqrt() + self.eps);
                *w = (*w as f64 - self.lr * buf[j]) as f32;
            }
        }
    }
}

fn clip_gradients(grads: &mut [Tensor<f32>], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            *g = g.scale(k);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    pub epoch: usize,
    pub loc: f64,
    pub cls: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub loss_curve: Vec<LossPoint>,
}

/// Trains a fresh model initialised from `cfg.seed`.
pub fn train(clips: &[PreparedClip], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    train_model(model, clips, cfg)
}

pub fn train_model(mut model: Model, clips: &[PreparedClip], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if let Some(short) = clips.iter().find(|c| c.frames.len() < cfg.seq_len) {
        return Err(Error::invalid(format!(
            "clip has {} frames, seq_len is {}",
            short.frames.len(),
            cfg.seq_len
        )));
    }
    let mut opt = RmsProp::new(cfg, &model.params_mut());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut curve = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedClip> = chunk.iter().map(|&i| &clips[i]).collect();
            let (parts, mut grads) = loss_and_grads(&model, &batch, cfg.seq_len)?;
            let total = parts.total();
            if !total.is_finite() {
                return Err(Error::Diverged {
                    iteration: curve.len(),
                    loss: total,
                });
            }
            if let Some(c) = cfg.grad_clip {
                clip_gradients(&mut grads, c);
            }
            opt.step(model.params_mut(), &grads);
            curve.push(LossPoint {
                iteration: curve.len(),
                epoch,
                loc: parts.loc,
                cls: parts.cls,
                total,
            });
        }
    }
    Ok(TrainOutcome { model, loss_curve: curve })
}

pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut out = String::from("iteration,epoch,loc,cls,total\n");
    for p in curve {
        out.push_str(&format!("{},{},{},{},{}\n", p.iteration, p.epoch, p.loc, p.cls, p.total));
    }
    out
}
