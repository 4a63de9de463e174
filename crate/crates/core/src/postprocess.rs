//! Inference-time decoding: per-level score thresholding and top-k, box
//! clipping, then class-wise greedy non-maximum suppression. Everything here
//! runs on plain values; no gradients are involved.

use crate::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

pub fn iou(a: &Detection, b: &Detection) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let ua = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if ua <= 0.0 {
        0.0
    } else {
        inter / ua
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Total order on detections: score descending, then coordinates and class
/// ascending, so every sort is deterministic.
pub fn det_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap()
        .then(a.x1.partial_cmp(&b.x1).unwrap())
        .then(a.y1.partial_cmp(&b.y1).unwrap())
        .then(a.x2.partial_cmp(&b.x2).unwrap())
        .then(a.y2.partial_cmp(&b.y2).unwrap())
        .then(a.class.cmp(&b.class))
}

/// Decode one image's worth of one pyramid level. `cls` and `ctr` are logits,
/// `dist` holds positive l/t/r/b distances in pixels, all row-major
/// [C,H,W] / [1,H,W] / [4,H,W].
#[allow(clippy::too_many_arguments)]
pub fn decode_level(
    cls: &[f64],
    ctr: &[f64],
    dist: &[f64],
    num_classes: usize,
    h: usize,
    w: usize,
    stride: usize,
    image_size: usize,
    score_threshold: f64,
    topk: usize,
) -> Result<Vec<Detection>> {
    let hw = h * w;
    if cls.len() != num_classes * hw || ctr.len() != hw || dist.len() != 4 * hw {
        return Err(Error::Shape(format!(
            "decode_level: cls {} ctr {} dist {} for {} classes {}x{}",
            cls.len(),
            ctr.len(),
            dist.len(),
            num_classes,
            h,
            w
        )));
    }
    let lim = image_size as f64;
    let mut dets = Vec::new();
    for j in 0..hw {
        let px = stride as f64 * ((j % w) as f64 + 0.5);
        let py = stride as f64 * ((j / w) as f64 + 0.5);
        let c_score = sigmoid(ctr[j]);
        for k in 0..num_classes {
            let score = sigmoid(cls[k * hw + j]) * c_score;
            if score <= score_threshold {
                continue;
            }
            dets.push(Detection {
                class: k,
                score,
                x1: (px - dist[j]).clamp(0.0, lim),
                y1: (py - dist[hw + j]).clamp(0.0, lim),
                x2: (px + dist[2 * hw + j]).clamp(0.0, lim),
                y2: (py + dist[3 * hw + j]).clamp(0.0, lim),
            });
        }
    }
    dets.sort_by(det_order);
    dets.truncate(topk);
    Ok(dets)
}

/// Class-wise greedy NMS: keep in score order, drop later boxes of the same
/// class whose IoU with a kept box exceeds the threshold.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(det_order);
    let mut keep: Vec<Detection> = Vec::new();
    'outer: for d in dets {
        for k in &keep {
            if k.class == d.class && iou(k, &d) > iou_threshold {
                continue 'outer;
            }
        }
        keep.push(d);
    }
    keep
}

/// Full post-processing for one image: per-level decode, pooled NMS, global
/// detection cap. One entry of `levels` is (cls, ctr, dist, h, w).
pub fn postprocess(
    levels: &[(&[f64], &[f64], &[f64], usize, usize)],
    cfg: &ModelConfig,
) -> Result<Vec<Detection>> {
    if levels.len() != cfg.strides.len() {
        return Err(Error::Shape(format!(
            "postprocess: {} levels vs {} strides",
            levels.len(),
            cfg.strides.len()
        )));
    }
    let mut all = Vec::new();
    for (l, &(cls, ctr, dist, h, w)) in levels.iter().enumerate() {
        all.extend(decode_level(
            cls,
            ctr,
            dist,
            cfg.num_classes,
            h,
            w,
            cfg.strides[l],
            cfg.image_size,
            cfg.score_threshold,
            cfg.pre_nms_topk,
        )?);
    }
    let mut kept = nms(all, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    Ok(kept)
}
