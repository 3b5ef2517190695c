#![allow(dead_code)]

use tdet_detect::boxes::{iou, Detection};
use tdet_detect::loss::{AnchorTargets, EMPTY_IMAGE_NEGATIVES, NEGATIVE_RATIO};

/// Repeatedly takes the best remaining box (earliest on ties) and drops
/// everything overlapping it by more than `thr`.
pub fn nms_ref(dets: &[Detection], thr: f32) -> Vec<Detection> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.is_none_or(|b| dets[i].score > dets[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        out.push(dets[b]);
        alive[b] = false;
        for i in 0..dets.len() {
            if alive[i] && iou(&dets[i].bbox, &dets[b].bbox) > thr {
                alive[i] = false;
            }
        }
    }
    out
}

/// Direct-sum loss over `pred[n][a][d]`.
pub fn ssd_loss_ref(pred: &[Vec<Vec<f64>>], targets: &[AnchorTargets]) -> (f64, f64) {
    let mut loc = 0.0;
    let mut cls = 0.0;
    let mut n_pos = 0;
    let mut n_sel = 0;
    for (rows, t) in pred.iter().zip(targets) {
        let ce = |row: &Vec<f64>, label: usize| {
            let mut z = 0.0;
            for v in &row[4..] {
                z += v.exp();
            }
            z.ln() - row[4 + label]
        };
        let mut negatives = Vec::new();
        let mut pos = 0;
        for (a, row) in rows.iter().enumerate() {
            let label = t.labels[a];
            if label == 0 {
                negatives.push((ce(row, 0), a));
                continue;
            }
            pos += 1;
            cls += ce(row, label);
            for k in 0..4 {
                loc += (row[k] - t.offsets[a][k] as f64).abs();
            }
        }
        negatives.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
        let keep = if pos == 0 { EMPTY_IMAGE_NEGATIVES } else { NEGATIVE_RATIO * pos };
        for &(l, _) in negatives.iter().take(keep) {
            cls += l;
            n_sel += 1;
        }
        n_sel += pos;
        n_pos += pos;
    }
    (
        if n_pos > 0 { loc / n_pos as f64 } else { 0.0 },
        if n_sel > 0 { cls / n_sel as f64 } else { 0.0 },
    )
}
