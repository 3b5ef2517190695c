//! Decoding, average precision and blurred-frame recall.

use serde::{Deserialize, Serialize};
use tdet_core::autograd::Tape;
use tdet_core::{Result, Tensor};

use crate::boxes::{decode, iou, nms, Detection};
use crate::data::Annotation;
use crate::model::Model;
use crate::train::{unroll, PreparedClip};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f32,
    pub score_threshold: f32,
    pub nms_iou: f32,
    pub top_k: usize,
    /// Minimum score for a detection to count towards blurred-frame recall.
    pub recall_score: f32,
    /// Clips per forward batch; does not change any result.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            score_threshold: 0.01,
            nms_iou: 0.45,
            top_k: 20,
            recall_score: 0.5,
            batch_size: 10,
        }
    }
}

/// Detections for image `n` of a gathered prediction tensor.
pub fn decode_detections(pred: &Tensor<f32>, n: usize, model: &Model, cfg: &EvalConfig) -> Vec<Detection> {
    let anchors = model.config.anchors();
    let size = model.config.image_size as f32;
    let classes = model.config.num_classes;
    let mut per_class: Vec<Vec<Detection>> = vec![Vec::new(); classes];
    for (a, anchor) in anchors.iter().enumerate() {
        let logits: Vec<f64> = (4..5 + classes).map(|d| pred.at(n, 0, a, d) as f64).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let offsets = [0, 1, 2, 3].map(|d| pred.at(n, 0, a, d));
        let Some(bbox) = decode(offsets, anchor).ok().and_then(|b| b.clip(size)) else {
            continue;
        };
        for c in 0..classes {
            let score = (exps[c + 1] / z) as f32;
            if score > cfg.score_threshold {
                per_class[c].push(Detection { bbox, class: c, score });
            }
        }
    }
    let mut kept: Vec<Detection> = per_class.iter().flat_map(|d| nms(d, cfg.nms_iou)).collect();
    kept.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class.cmp(&b.class)));
    kept.truncate(cfg.top_k);
    kept
}

/// Per-frame detections for every frame of every clip, clip-major.
pub fn predict(model: &Model, clips: &[PreparedClip], cfg: &EvalConfig) -> Result<Vec<Vec<Vec<Detection>>>> {
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&PreparedClip> = chunk.iter().collect();
        let frames = chunk.iter().map(|c| c.frames.len()).min().unwrap_or(0);
        let mut dets = vec![Vec::with_capacity(frames); chunk.len()];
        if frames > 0 {
            let mut tape = Tape::new();
            let leaves = model.param_leaves(&mut tape);
            unroll(model, &mut tape, &leaves, &refs, frames, |tape, _, pred| {
                let value = tape.value(pred);
                for (n, d) in dets.iter_mut().enumerate() {
                    d.push(decode_detections(value, n, model, cfg));
                }
                Ok(())
            })?;
        }
        out.extend(dets);
    }
    Ok(out)
}

/// Area under the precision/recall curve with the precision envelope
/// (every recall point counted, no 11-point sampling).
///
/// `hits` lists detections sorted by descending score, `true` for a match.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.into_iter().zip(precision) {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub num_gt: usize,
    /// `None` when the class never appears in the ground truth.
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassAp>,
    /// Mean AP over the classes present in the ground truth.
    pub map: f64,
    pub excluded_classes: Vec<usize>,
    pub blurred_frames: usize,
    /// Fraction of ground-truth objects on blurred frames that have a
    /// confident, correctly classified detection; `None` without such frames.
    pub blurred_recall: Option<f64>,
}

/// One frame: its detections, ground truth and blur flag.
pub struct FrameResult<'a> {
    pub detections: &'a [Detection],
    pub objects: &'a [Annotation],
    pub blurred: bool,
}

pub fn evaluate_frames(frames: &[FrameResult<'_>], num_classes: usize, cfg: &EvalConfig) -> EvalReport {
    let mut per_class = Vec::with_capacity(num_classes);
    let mut aps = Vec::new();
    let mut excluded = Vec::new();
    for class in 0..num_classes {
        let num_gt: usize = frames
            .iter()
            .map(|f| f.objects.iter().filter(|o| o.class == class).count())
            .sum();
        if num_gt == 0 {
            excluded.push(class);
            per_class.push(ClassAp { class, num_gt, ap: None });
            continue;
        }
        // Global ranking: score descending, then frame and list order.
        let mut ranked: Vec<(usize, &Detection)> = frames
            .iter()
            .enumerate()
            .flat_map(|(i, f)| f.detections.iter().filter(|d| d.class == class).map(move |d| (i, d)))
            .collect();
        ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut taken: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.objects.len()]).collect();
        let hits: Vec<bool> = ranked
            .iter()
            .map(|&(i, d)| {
                let best = frames[i]
                    .objects
                    .iter()
                    .enumerate()
                    .filter(|(_, o)| o.class == class)
                    .map(|(g, o)| (g, iou(&d.bbox, &o.bbox)))
                    .max_by(|x, y| x.1.total_cmp(&y.1));
                match best {
                    Some((g, v)) if v >= cfg.iou_threshold && !taken[i][g] => {
                        taken[i][g] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        let ap = average_precision(&hits, num_gt);
        aps.push(ap);
        per_class.push(ClassAp {
            class,
            num_gt,
            ap: Some(ap),
        });
    }
    let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };

    let blurred: Vec<&FrameResult> = frames.iter().filter(|f| f.blurred).collect();
    let mut found = 0usize;
    let mut total = 0usize;
    for f in &blurred {
        for o in f.objects {
            total += 1;
            let hit = f.detections.iter().any(|d| {
                d.class == o.class && d.score >= cfg.recall_score && iou(&d.bbox, &o.bbox) >= cfg.iou_threshold
            });
            found += hit as usize;
        }
    }
    EvalReport {
        per_class,
        map,
        excluded_classes: excluded,
        blurred_frames: blurred.len(),
        blurred_recall: (total > 0).then(|| found as f64 / total as f64),
    }
}

pub fn evaluate_map(model: &Model, clips: &[PreparedClip], cfg: &EvalConfig) -> Result<EvalReport> {
    let preds = predict(model, clips, cfg)?;
    let frames: Vec<FrameResult> = clips
        .iter()
        .zip(&preds)
        .flat_map(|(c, p)| {
            c.frames.iter().zip(p).map(|(f, d)| FrameResult {
                detections: d,
                objects: &f.objects,
                blurred: f.blurred,
            })
        })
        .collect();
    Ok(evaluate_frames(&frames, model.config.num_classes, cfg))
}
