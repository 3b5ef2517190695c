//! SSD-style detection loss: L1 box regression over positive anchors plus
//! cross-entropy over positives and mined hard negatives.
//!
//! Predictions arrive as one `(batch, 1, anchors, 4 + K + 1)` tensor: four
//! box offsets, then logits with background at index 0.

use tdet_core::autograd::{Tape, Var};
use tdet_core::{Error, Result, Scalar, Tensor};

use crate::boxes::{encode, match_anchors, BBox};
use crate::data::Annotation;

pub const NEGATIVE_RATIO: usize = 3;
/// Negatives kept for an image without any positive anchor.
pub const EMPTY_IMAGE_NEGATIVES: usize = 3;

/// Per-anchor training targets for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTargets {
    /// 0 for background, `class + 1` otherwise.
    pub labels: Vec<usize>,
    /// Encoded offsets; only meaningful where `labels[a] > 0`.
    pub offsets: Vec<[f32; 4]>,
}

impl AnchorTargets {
    pub fn build(anchors: &[BBox], objects: &[Annotation], pos_iou: f32) -> Self {
        let gt: Vec<BBox> = objects.iter().map(|o| o.bbox).collect();
        let assignment = match_anchors(anchors, &gt, pos_iou);
        let mut labels = vec![0; anchors.len()];
        let mut offsets = vec![[0.0; 4]; anchors.len()];
        for (a, m) in assignment.iter().enumerate() {
            if let Some(g) = *m {
                labels[a] = objects[g].class + 1;
                offsets[a] = encode(&gt[g], &anchors[a]);
            }
        }
        AnchorTargets { labels, offsets }
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub loc: f64,
    pub cls: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.loc + self.cls
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Loss value and its gradient with respect to `pred`.
///
/// `loc` is the L1 distance summed over the four offsets and averaged over
/// positive anchors (0 when there are none). `cls` is the cross-entropy
/// averaged over the selected anchors: every positive plus the
/// `NEGATIVE_RATIO ×` positives highest-loss background anchors per image.
pub fn ssd_loss_with_grad<T: Scalar>(pred: &Tensor<T>, targets: &[AnchorTargets]) -> Result<(LossParts, Tensor<T>)> {
    let s = pred.shape();
    if s.channels != 1 || s.width < 6 || targets.len() != s.batch {
        return Err(Error::InvalidArgument(format!(
            "ssd_loss: predictions {s} need shape (batch, 1, anchors, 4 + classes + 1) and one target set per image, got {} target sets",
            targets.len()
        )));
    }
    let (anchors, depth) = (s.height, s.width);
    let classes = depth - 4;
    if let Some(t) = targets.iter().find(|t| t.labels.len() != anchors || t.offsets.len() != anchors) {
        return Err(Error::InvalidArgument(format!(
            "ssd_loss: {} anchors predicted, targets hold {}",
            anchors,
            t.labels.len()
        )));
    }
    if let Some(&l) = targets.iter().flat_map(|t| &t.labels).find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!("ssd_loss: label {l} out of range for {classes} logits")));
    }

    let row = |n: usize, a: usize| -> Vec<f64> { (0..depth).map(|d| pred.at(n, 0, a, d).as_f64()).collect() };

    // Select anchors and count normalizers first.
    let mut selected: Vec<Vec<usize>> = Vec::with_capacity(s.batch);
    let mut n_pos = 0usize;
    for (n, t) in targets.iter().enumerate() {
        let pos = t.positives();
        n_pos += pos;
        let mut negatives: Vec<(f64, usize)> = (0..anchors)
            .filter(|&a| t.labels[a] == 0)
            .map(|a| (-log_softmax(&row(n, a)[4..])[0], a))
            .collect();
        negatives.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        let keep = if pos == 0 { EMPTY_IMAGE_NEGATIVES } else { NEGATIVE_RATIO * pos };
        let mut chosen: Vec<usize> = (0..anchors).filter(|&a| t.labels[a] > 0).collect();
        chosen.extend(negatives.iter().take(keep).map(|&(_, a)| a));
        selected.push(chosen);
    }
    let n_sel: usize = selected.iter().map(Vec::len).sum();

    let mut parts = LossParts::default();
    let mut grad = Tensor::<T>::zeros(s);
    for (n, t) in targets.iter().enumerate() {
        for &a in &selected[n] {
            let r = row(n, a);
            let label = t.labels[a];
            let logp = log_softmax(&r[4..]);
            parts.cls -= logp[label];
            for k in 0..classes {
                let p = logp[k].exp();
                let g = (p - if k == label { 1.0 } else { 0.0 }) / n_sel as f64;
                grad.set(n, 0, a, 4 + k, T::from_f64(g));
            }
            if label > 0 {
                for k in 0..4 {
                    let diff = r[k] - t.offsets[a][k] as f64;
                    parts.loc += diff.abs();
                    let g = if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    grad.set(n, 0, a, k, T::from_f64(g / n_pos as f64));
                }
            }
        }
    }
    if n_sel > 0 {
        parts.cls /= n_sel as f64;
    }
    if n_pos > 0 {
        parts.loc /= n_pos as f64;
    }
    Ok((parts, grad))
}

/// Records the loss on the tape; the result is a scalar node whose backward
/// pass feeds the precomputed gradient into `pred`.
pub fn ssd_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, targets: &[AnchorTargets]) -> Result<(Var, LossParts)> {
    let (parts, grad) = ssd_loss_with_grad(tape.value(pred), targets)?;
    let v = tape.scalar_with_grads(T::from_f64(parts.total()), vec![(pred, grad)])?;
    Ok((v, parts))
}
