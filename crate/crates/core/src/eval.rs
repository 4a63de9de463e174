//! Detection evaluation following the COCO protocol: greedy matching at ten
//! IoU thresholds, 101-point interpolated average precision, area buckets
//! with ignore semantics, and average recall at 100 detections per image.

use crate::assign::GroundTruthBox;
use crate::error::{Error, Result};
use crate::postprocess::{det_order, iou, Detection};

pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
pub const MAX_DETS: usize = 100;

/// (lo, hi] area buckets: all, small, medium, large.
pub const AREA_RANGES: [(f64, f64); 4] = [
    (0.0, f64::INFINITY),
    (0.0, 32.0 * 32.0),
    (32.0 * 32.0, 96.0 * 96.0),
    (96.0 * 96.0, f64::INFINITY),
];

#[derive(Clone, Debug)]
pub struct EvalImage {
    pub id: u64,
    pub gts: Vec<GroundTruthBox>,
    pub dets: Vec<Detection>,
}

/// All reported metrics; -1 marks a slice with no ground truth.
#[derive(Clone, Copy, Debug)]
pub struct EvalSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    pub ar100: f64,
    pub ar_small: f64,
    pub ar_medium: f64,
    pub ar_large: f64,
}

#[derive(Clone, Copy, PartialEq)]
enum DetFlag {
    TruePositive,
    FalsePositive,
    Ignored,
}

/// Match one image's detections of one class against its ground truth at one
/// IoU threshold. Returns per-detection flags in score order plus the count
/// of non-ignored ground truth.
fn match_image(
    gts: &[&GroundTruthBox],
    dets: &[&Detection],
    thr: f64,
    area: (f64, f64),
) -> (Vec<(f64, DetFlag)>, usize) {
    let gt_ignored: Vec<bool> = gts
        .iter()
        .map(|g| {
            let a = g.area();
            a <= area.0 || a > area.1
        })
        .collect();
    let npos = gt_ignored.iter().filter(|&&ig| !ig).count();

    let mut gt_matched = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        // best unmatched ground truth by IoU; a non-ignored match always
        // beats an ignored one
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if gt_matched[gi] {
                continue;
            }
            let gd = Detection {
                class: g.class,
                score: 0.0,
                x1: g.x1,
                y1: g.y1,
                x2: g.x2,
                y2: g.y2,
            };
            let v = iou(d, &gd);
            if v < thr {
                continue;
            }
            let better = match best {
                None => true,
                Some((bi, bv)) => {
                    if gt_ignored[bi] != gt_ignored[gi] {
                        gt_ignored[bi] // prefer the non-ignored candidate
                    } else {
                        v > bv
                    }
                }
            };
            if better {
                best = Some((gi, v));
            }
        }
        let flag = match best {
            Some((gi, _)) => {
                gt_matched[gi] = true;
                if gt_ignored[gi] {
                    DetFlag::Ignored
                } else {
                    DetFlag::TruePositive
                }
            }
            None => {
                let a = (d.x2 - d.x1) * (d.y2 - d.y1);
                if a <= area.0 || a > area.1 {
                    DetFlag::Ignored
                } else {
                    DetFlag::FalsePositive
                }
            }
        };
        out.push((d.score, flag));
    }
    (out, npos)
}

/// 101-point interpolated AP and maximum recall from flagged detections
/// pooled over images (already in descending score order).
fn ap_and_recall(records: &[(f64, DetFlag)], npos: usize) -> (f64, f64) {
    if npos == 0 {
        return (-1.0, -1.0);
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut pr: Vec<(f64, f64)> = Vec::new(); // (recall, precision) after each counted det
    for &(_, flag) in records {
        match flag {
            DetFlag::TruePositive => tp += 1,
            DetFlag::FalsePositive => fp += 1,
            DetFlag::Ignored => continue,
        }
        pr.push((tp as f64 / npos as f64, tp as f64 / (tp + fp) as f64));
    }
    let max_recall = pr.last().map_or(0.0, |&(r, _)| r);

    // precision envelope: best precision at recall >= r, swept right to left
    let mut env = pr.clone();
    for i in (1..env.len()).rev() {
        if env[i].1 > env[i - 1].1 {
            env[i - 1].1 = env[i].1;
        }
    }
    let mut ap = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        // first envelope point with recall >= r
        let p = env
            .iter()
            .find(|&&(rec, _)| rec >= r - 1e-12)
            .map_or(0.0, |&(_, prec)| prec);
        ap += p;
    }
    (ap / 101.0, max_recall)
}

/// AP and AR for one (threshold, area bucket) pair, averaged over classes
/// that have ground truth anywhere; -1 when no class does.
fn evaluate_slice(
    images: &[EvalImage],
    num_classes: usize,
    thr: f64,
    area: (f64, f64),
) -> (f64, f64) {
    let mut aps = Vec::new();
    let mut ars = Vec::new();
    for c in 0..num_classes {
        let mut records: Vec<(f64, DetFlag)> = Vec::new();
        let mut npos = 0usize;
        for img in images {
            let gts: Vec<&GroundTruthBox> = img.gts.iter().filter(|g| g.class == c).collect();
            let dets: Vec<&Detection> = img.dets.iter().filter(|d| d.class == c).collect();
            let (r, n) = match_image(&gts, &dets, thr, area);
            records.extend(r);
            npos += n;
        }
        if npos == 0 {
            continue;
        }
        // pooled records sorted by score descending; stable so the original
        // image order breaks ties deterministically
        records.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let (ap, ar) = ap_and_recall(&records, npos);
        aps.push(ap);
        ars.push(ar);
    }
    if aps.is_empty() {
        (-1.0, -1.0)
    } else {
        (
            aps.iter().sum::<f64>() / aps.len() as f64,
            ars.iter().sum::<f64>() / ars.len() as f64,
        )
    }
}

fn mean_over_thresholds(images: &[EvalImage], num_classes: usize, area: (f64, f64)) -> (f64, f64) {
    let slices: Vec<(f64, f64)> = IOU_THRESHOLDS
        .iter()
        .map(|&t| evaluate_slice(images, num_classes, t, area))
        .collect();
    if slices.iter().all(|&(a, _)| a < 0.0) {
        return (-1.0, -1.0);
    }
    let n = slices.len() as f64;
    (
        slices.iter().map(|&(a, _)| a).sum::<f64>() / n,
        slices.iter().map(|&(_, r)| r).sum::<f64>() / n,
    )
}

pub fn evaluate(images: &[EvalImage], num_classes: usize) -> Result<EvalSummary> {
    let mut seen = std::collections::HashSet::new();
    for img in images {
        if !seen.insert(img.id) {
            return Err(Error::Input(format!("duplicate image id {}", img.id)));
        }
        for g in &img.gts {
            g.validate(num_classes)?;
        }
    }
    // enforce the per-image detection cap in deterministic order
    let capped: Vec<EvalImage> = images
        .iter()
        .map(|img| {
            let mut dets = img.dets.clone();
            dets.sort_by(det_order);
            dets.truncate(MAX_DETS);
            EvalImage { id: img.id, gts: img.gts.clone(), dets }
        })
        .collect();

    let (ap, ar100) = mean_over_thresholds(&capped, num_classes, AREA_RANGES[0]);
    let (ap_small, ar_small) = mean_over_thresholds(&capped, num_classes, AREA_RANGES[1]);
    let (ap_medium, ar_medium) = mean_over_thresholds(&capped, num_classes, AREA_RANGES[2]);
    let (ap_large, ar_large) = mean_over_thresholds(&capped, num_classes, AREA_RANGES[3]);
    let (ap50, _) = evaluate_slice(&capped, num_classes, 0.50, AREA_RANGES[0]);
    let (ap75, _) = evaluate_slice(&capped, num_classes, 0.75, AREA_RANGES[0]);
    Ok(EvalSummary {
        ap,
        ap50,
        ap75,
        ap_small,
        ap_medium,
        ap_large,
        ar100,
        ar_small,
        ar_medium,
        ar_large,
    })
}
