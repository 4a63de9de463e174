//! Anchor-free training-target assignment.
//!
//! Every feature-map location is a point on the image; it becomes positive
//! for a ground-truth box when it lies inside the box and the largest of its
//! four border distances falls into the level's size range. Overlaps resolve
//! to the smallest box.

use crate::error::{Error, Result};

/// Axis-aligned ground-truth box in image pixels, corner form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class: usize,
}

impl GroundTruthBox {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.x2 > self.x1 && self.y2 > self.y1) {
            return Err(Error::Input(format!(
                "degenerate box [{}, {}, {}, {}]",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        if [self.x1, self.y1, self.x2, self.y2].iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite box coordinate".into()));
        }
        if self.class >= num_classes {
            return Err(Error::Input(format!(
                "class {} out of range (num_classes = {})",
                self.class, num_classes
            )));
        }
        Ok(())
    }
}

/// Training targets for one pyramid level of one image, row-major [H, W].
#[derive(Clone, Debug)]
pub struct TargetMap {
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    /// Class index per location, -1 for background.
    pub class: Vec<i64>,
    /// Left/top/right/bottom distances in pixels; zeros at background.
    pub ltrb: Vec<[f64; 4]>,
    /// Center-ness in [0, 1]; zero at background.
    pub centerness: Vec<f64>,
}

impl TargetMap {
    pub fn num_positives(&self) -> usize {
        self.class.iter().filter(|&&c| c >= 0).count()
    }
}

pub fn centerness(l: f64, t: f64, r: f64, b: f64) -> f64 {
    let lr = l.min(r) / l.max(r);
    let tb = t.min(b) / t.max(b);
    (lr * tb).sqrt()
}

/// Assign ground truth to every location of every level. `ranges` holds the
/// per-level (lo, hi] bounds on max(l, t, r, b); use f64::INFINITY for the
/// last hi.
pub fn assign_targets(
    boxes: &[GroundTruthBox],
    strides: &[usize],
    sizes: &[(usize, usize)],
    ranges: &[(f64, f64)],
    num_classes: usize,
) -> Result<Vec<TargetMap>> {
    if strides.len() != sizes.len() || strides.len() != ranges.len() {
        return Err(Error::Config(format!(
            "level count mismatch: {} strides, {} sizes, {} ranges",
            strides.len(),
            sizes.len(),
            ranges.len()
        )));
    }
    for b in boxes {
        b.validate(num_classes)?;
    }
    let mut out = Vec::with_capacity(strides.len());
    for (li, &stride) in strides.iter().enumerate() {
        let (h, w) = sizes[li];
        let (lo, hi) = ranges[li];
        let mut map = TargetMap {
            h,
            w,
            stride,
            class: vec![-1; h * w],
            ltrb: vec![[0.0; 4]; h * w],
            centerness: vec![0.0; h * w],
        };
        for gy in 0..h {
            let py = stride as f64 * (gy as f64 + 0.5);
            for gx in 0..w {
                let px = stride as f64 * (gx as f64 + 0.5);
                let mut best: Option<(f64, &GroundTruthBox, [f64; 4])> = None;
                for b in boxes {
                    let (l, t) = (px - b.x1, py - b.y1);
                    let (r, bo) = (b.x2 - px, b.y2 - py);
                    if l <= 0.0 || t <= 0.0 || r <= 0.0 || bo <= 0.0 {
                        continue;
                    }
                    let m = l.max(t).max(r).max(bo);
                    if m <= lo || m > hi {
                        continue;
                    }
                    let area = b.area();
                    if best.map_or(true, |(a, _, _)| area < a) {
                        best = Some((area, b, [l, t, r, bo]));
                    }
                }
                if let Some((_, b, d)) = best {
                    let i = gy * w + gx;
                    map.class[i] = b.class as i64;
                    map.ltrb[i] = d;
                    map.centerness[i] = centerness(d[0], d[1], d[2], d[3]);
                }
            }
        }
        out.push(map);
    }
    Ok(out)
}
