//! Axis-aligned boxes, non-maximum suppression, anchor matching and the
//! SSD offset encoding.

use serde::{Deserialize, Serialize};
use tdet_core::{Error, Result};

/// Offset scaling for centers and sizes.
pub const VARIANCES: [f32; 2] = [0.1, 0.2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

impl BBox {
    pub fn new(x_min: f32, y_min: f32, x_max: f32, y_max: f32) -> Result<Self> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min >= x_max || y_min >= y_max {
            return Err(Error::InvalidArgument(format!(
                "degenerate box ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Result<Self> {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Clipped to `[0, size]²`, or `None` if nothing remains.
    pub fn clip(&self, size: f32) -> Option<BBox> {
        BBox::new(
            self.x_min.max(0.0),
            self.y_min.max(0.0),
            self.x_max.min(size),
            self.y_max.min(size),
        )
        .ok()
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f32,
}

/// Greedy suppression in descending score order; ties keep input order.
pub fn nms(dets: &[Detection], iou_threshold: f32) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        if kept.iter().all(|k| iou(&k.bbox, &dets[i].bbox) <= iou_threshold) {
            kept.push(dets[i]);
        }
    }
    kept
}

/// Ground-truth index per anchor. Each ground truth first claims its best
/// anchor; remaining anchors go to their best ground truth when the overlap
/// reaches `pos_iou`.
pub fn match_anchors(anchors: &[BBox], gt: &[BBox], pos_iou: f32) -> Vec<Option<usize>> {
    let mut assigned = vec![None; anchors.len()];
    if gt.is_empty() {
        return assigned;
    }
    let overlaps: Vec<Vec<f32>> = anchors.iter().map(|a| gt.iter().map(|g| iou(a, g)).collect()).collect();
    for (a, row) in overlaps.iter().enumerate() {
        let (best, &v) = row
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1).then(y.0.cmp(&x.0)))
            .expect("non-empty");
        if v >= pos_iou {
            assigned[a] = Some(best);
        }
    }
    for g in 0..gt.len() {
        let best = (0..anchors.len())
            .max_by(|&x, &y| overlaps[x][g].total_cmp(&overlaps[y][g]).then(y.cmp(&x)))
            .expect("anchors");
        if overlaps[best][g] > 0.0 {
            assigned[best] = Some(g);
        }
    }
    assigned
}

pub fn encode(gt: &BBox, anchor: &BBox) -> [f32; 4] {
    let (gx, gy) = gt.center();
    let (ax, ay) = anchor.center();
    [
        (gx - ax) / anchor.width() / VARIANCES[0],
        (gy - ay) / anchor.height() / VARIANCES[0],
        (gt.width() / anchor.width()).ln() / VARIANCES[1],
        (gt.height() / anchor.height()).ln() / VARIANCES[1],
    ]
}

pub fn decode(offsets: [f32; 4], anchor: &BBox) -> Result<BBox> {
    let (ax, ay) = anchor.center();
    // Keep exp() finite for untrained heads.
    let size = |v: f32| (v * VARIANCES[1]).clamp(-10.0, 10.0).exp();
    BBox::from_center(
        ax + offsets[0] * VARIANCES[0] * anchor.width(),
        ay + offsets[1] * VARIANCES[0] * anchor.height(),
        anchor.width() * size(offsets[2]),
        anchor.height() * size(offsets[3]),
    )
}
