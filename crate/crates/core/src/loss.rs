//! Detection losses: focal classification, center-ness BCE, and CIoU/GIoU
//! box regression, plus the assembly that gathers head outputs against the
//! assigned target maps.

use crate::assign::TargetMap;
use crate::config::{ModelConfig, RegLossKind};
use crate::error::{Error, Result};
use crate::sepc::HeadOutputs;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const PROB_EPS: f64 = 1e-12;

/// Focal loss on probabilities against {0,1} targets, summed and divided by
/// `normalizer`.
pub fn focal_loss(
    tape: &mut Tape,
    probs: Var,
    targets: &Tensor,
    alpha: f64,
    gamma: f64,
    normalizer: f64,
) -> Result<Var> {
    if tape.value(probs).shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "focal: probs {:?} vs targets {:?}",
            tape.value(probs).shape(),
            targets.shape()
        )));
    }
    if targets.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Input("focal targets must be exactly 0 or 1".into()));
    }
    if normalizer <= 0.0 {
        return Err(Error::Input(format!("focal normalizer {} must be positive", normalizer)));
    }
    let pos_mask = Tensor::new(
        targets.shape().to_vec(),
        targets.data().iter().map(|&t| alpha * t).collect(),
    )?;
    let neg_mask = Tensor::new(
        targets.shape().to_vec(),
        targets.data().iter().map(|&t| (1.0 - alpha) * (1.0 - t)).collect(),
    )?;

    let p = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)?;
    let one_minus_p = tape.neg(p)?;
    let one_minus_p = tape.add_const(one_minus_p, 1.0)?;

    // positive term: (1-p)^g * ln p
    let wp = tape.pow_const(one_minus_p, gamma)?;
    let lp = tape.log(p)?;
    let tp = tape.mul(wp, lp)?;
    let mp = tape.constant(pos_mask);
    let tp = tape.mul(tp, mp)?;

    // negative term: p^g * ln(1-p)
    let wn = tape.pow_const(p, gamma)?;
    let ln = tape.log(one_minus_p)?;
    let tn = tape.mul(wn, ln)?;
    let mn = tape.constant(neg_mask);
    let tn = tape.mul(tn, mn)?;

    let both = tape.add(tp, tn)?;
    let s = tape.sum(both)?;
    let s = tape.neg(s)?;
    tape.mul_const(s, 1.0 / normalizer)
}

/// Mean BCE between center-ness logits at positive locations and their
/// targets. Empty input yields an exact zero.
pub fn centerness_bce(tape: &mut Tape, logits: Var, targets: Tensor) -> Result<Var> {
    let n = targets.numel();
    if n == 0 {
        return Ok(tape.scalar(0.0));
    }
    let per = tape.bce_with_logits(logits, targets)?;
    tape.mean(per)
}

/// Predicted and target boxes as parallel corner-coordinate vectors.
pub struct BoxVars {
    pub x1: Var,
    pub y1: Var,
    pub x2: Var,
    pub y2: Var,
}

fn iou_parts(tape: &mut Tape, p: &BoxVars, gx1: Var, gy1: Var, gx2: Var, gy2: Var) -> Result<(Var, Var)> {
    let ix1 = tape.maximum(p.x1, gx1)?;
    let iy1 = tape.maximum(p.y1, gy1)?;
    let ix2 = tape.minimum(p.x2, gx2)?;
    let iy2 = tape.minimum(p.y2, gy2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih)?;
    let inter = tape.mul(iw, ih)?;

    let pw = tape.sub(p.x2, p.x1)?;
    let ph = tape.sub(p.y2, p.y1)?;
    let pa = tape.mul(pw, ph)?;
    let gw = tape.sub(gx2, gx1)?;
    let gh = tape.sub(gy2, gy1)?;
    let ga = tape.mul(gw, gh)?;
    let sum = tape.add(pa, ga)?;
    let union = tape.sub(sum, inter)?;
    let iou = tape.div(inter, union)?;
    Ok((iou, union))
}

/// Per-box CIoU loss vector: 1 - IoU + center-distance penalty +
/// aspect-ratio penalty with its balance weight detached.
pub fn ciou_loss(tape: &mut Tape, pred: &BoxVars, gt: &Tensor) -> Result<Var> {
    let (gx1, gy1, gx2, gy2) = split_gt(tape, pred, gt)?;
    let (iou, _) = iou_parts(tape, pred, gx1, gy1, gx2, gy2)?;

    // squared center distance over squared enclosing-box diagonal
    let pcx = center(tape, pred.x1, pred.x2)?;
    let pcy = center(tape, pred.y1, pred.y2)?;
    let gcx = center(tape, gx1, gx2)?;
    let gcy = center(tape, gy1, gy2)?;
    let dx = tape.sub(pcx, gcx)?;
    let dy = tape.sub(pcy, gcy)?;
    let dx2 = tape.mul(dx, dx)?;
    let dy2 = tape.mul(dy, dy)?;
    let rho2 = tape.add(dx2, dy2)?;

    let cx1 = tape.minimum(pred.x1, gx1)?;
    let cy1 = tape.minimum(pred.y1, gy1)?;
    let cx2 = tape.maximum(pred.x2, gx2)?;
    let cy2 = tape.maximum(pred.y2, gy2)?;
    let cw = tape.sub(cx2, cx1)?;
    let ch = tape.sub(cy2, cy1)?;
    let cw2 = tape.mul(cw, cw)?;
    let ch2 = tape.mul(ch, ch)?;
    let diag2 = tape.add(cw2, ch2)?;
    let center_pen = tape.div(rho2, diag2)?;

    // aspect-ratio term v = 4/pi^2 (atan(gw/gh) - atan(pw/ph))^2
    let pw = tape.sub(pred.x2, pred.x1)?;
    let ph = tape.sub(pred.y2, pred.y1)?;
    let gw = tape.sub(gx2, gx1)?;
    let gh = tape.sub(gy2, gy1)?;
    let pr = tape.div(pw, ph)?;
    let gr = tape.div(gw, gh)?;
    let pa = tape.atan(pr)?;
    let ga = tape.atan(gr)?;
    let da = tape.sub(ga, pa)?;
    let da2 = tape.mul(da, da)?;
    let v = tape.mul_const(da2, 4.0 / (std::f64::consts::PI * std::f64::consts::PI))?;

    // balance weight alpha = v / (1 - IoU + v), treated as a constant
    let one_minus_iou = one_minus(tape, iou)?;
    let denom = tape.add(one_minus_iou, v)?;
    let denom = tape.add_const(denom, 1e-9)?;
    let alpha = tape.div(v, denom)?;
    let alpha = tape.detach(alpha)?;
    let ar_pen = tape.mul(alpha, v)?;

    let l = tape.add(one_minus_iou, center_pen)?;
    tape.add(l, ar_pen)
}

/// Per-box GIoU loss vector: 1 - IoU + (enclosing - union) / enclosing.
pub fn giou_loss(tape: &mut Tape, pred: &BoxVars, gt: &Tensor) -> Result<Var> {
    let (gx1, gy1, gx2, gy2) = split_gt(tape, pred, gt)?;
    let (iou, union) = iou_parts(tape, pred, gx1, gy1, gx2, gy2)?;

    let cx1 = tape.minimum(pred.x1, gx1)?;
    let cy1 = tape.minimum(pred.y1, gy1)?;
    let cx2 = tape.maximum(pred.x2, gx2)?;
    let cy2 = tape.maximum(pred.y2, gy2)?;
    let cw = tape.sub(cx2, cx1)?;
    let ch = tape.sub(cy2, cy1)?;
    let ca = tape.mul(cw, ch)?;
    let hole = tape.sub(ca, union)?;
    let pen = tape.div(hole, ca)?;

    let one_minus_iou = one_minus(tape, iou)?;
    tape.add(one_minus_iou, pen)
}

fn center(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let s = tape.add(a, b)?;
    tape.mul_const(s, 0.5)
}

fn one_minus(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.neg(x)?;
    tape.add_const(n, 1.0)
}

fn split_gt(tape: &mut Tape, pred: &BoxVars, gt: &Tensor) -> Result<(Var, Var, Var, Var)> {
    let p = tape.value(pred.x1).numel();
    if gt.shape() != [p, 4] {
        return Err(Error::Shape(format!(
            "gt boxes shape {:?}, expected [{}, 4]",
            gt.shape(),
            p
        )));
    }
    let col = |k: usize| -> Tensor {
        Tensor::from_vec((0..p).map(|i| gt.data()[i * 4 + k]).collect())
    };
    Ok((
        tape.constant(col(0)),
        tape.constant(col(1)),
        tape.constant(col(2)),
        tape.constant(col(3)),
    ))
}

/// Scalar loss terms for one forward pass.
pub struct LossTerms {
    pub cls: Var,
    pub reg: Var,
    pub ctr: Var,
    pub total: Var,
    pub num_pos: usize,
}

/// Assemble the training loss from head outputs and per-image target maps.
/// `targets[n][l]` is the map for image n at level l.
pub fn detection_loss(
    tape: &mut Tape,
    out: &HeadOutputs,
    targets: &[Vec<TargetMap>],
    cfg: &ModelConfig,
) -> Result<LossTerms> {
    let levels = out.cls_logits.len();
    if targets.iter().any(|t| t.len() != levels) {
        return Err(Error::Shape("target maps do not match head levels".into()));
    }
    let num_pos: usize = targets
        .iter()
        .flat_map(|per_image| per_image.iter())
        .map(|m| m.num_positives())
        .sum();
    let norm = (num_pos as f64).max(1.0);

    let mut cls_total = tape.scalar(0.0);
    let mut ctr_logit_parts = Vec::new();
    let mut ctr_targets = Vec::new();
    let mut pred_corners: [Vec<Var>; 4] = Default::default();
    let mut gt_rows: Vec<f64> = Vec::new();
    let mut reg_weights: Vec<f64> = Vec::new();

    for l in 0..levels {
        let sh = tape.value(out.cls_logits[l]).shape().to_vec();
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        if n != targets.len() {
            return Err(Error::Shape(format!(
                "batch {} vs {} target sets",
                n,
                targets.len()
            )));
        }

        // one-hot class targets over the whole level
        let mut onehot = vec![0.0; n * c * h * w];
        let mut pos_flat: Vec<(usize, usize)> = Vec::new(); // (image, y*w+x)
        for (ni, per_image) in targets.iter().enumerate() {
            let m = &per_image[l];
            if m.h != h || m.w != w {
                return Err(Error::Shape(format!(
                    "target map {}x{} vs head {}x{} at level {}",
                    m.h, m.w, h, w, l
                )));
            }
            for (j, &cls) in m.class.iter().enumerate() {
                if cls >= 0 {
                    onehot[((ni * c + cls as usize) * h * w) + j] = 1.0;
                    pos_flat.push((ni, j));
                }
            }
        }
        let probs = tape.sigmoid(out.cls_logits[l])?;
        let tgt = Tensor::new(vec![n, c, h, w], onehot)?;
        let cls_l = focal_loss(tape, probs, &tgt, cfg.focal_alpha, cfg.focal_gamma, norm)?;
        cls_total = tape.add(cls_total, cls_l)?;

        if pos_flat.is_empty() {
            continue;
        }

        // gather center-ness logits and the four distance channels
        let ctr_idx: Vec<usize> = pos_flat.iter().map(|&(ni, j)| ni * h * w + j).collect();
        ctr_logit_parts.push(tape.gather(out.ctr_logits[l], ctr_idx)?);

        let mut dist = Vec::with_capacity(4);
        for ch in 0..4 {
            let idx: Vec<usize> = pos_flat
                .iter()
                .map(|&(ni, j)| (ni * 4 + ch) * h * w + j)
                .collect();
            dist.push(tape.gather(out.distances[l], idx)?);
        }

        let stride = cfg.strides[l] as f64;
        let mut px = Vec::with_capacity(pos_flat.len());
        let mut py = Vec::with_capacity(pos_flat.len());
        for &(ni, j) in &pos_flat {
            let m = &targets[ni][l];
            px.push(stride * ((j % w) as f64 + 0.5));
            py.push(stride * ((j / w) as f64 + 0.5));
            let [gl, gt_, gr, gb] = m.ltrb[j];
            let (cx, cy) = (stride * ((j % w) as f64 + 0.5), stride * ((j / w) as f64 + 0.5));
            gt_rows.extend_from_slice(&[cx - gl, cy - gt_, cx + gr, cy + gb]);
            reg_weights.push(m.centerness[j]);
            ctr_targets.push(m.centerness[j]);
        }
        let pxv = tape.constant(Tensor::from_vec(px));
        let pyv = tape.constant(Tensor::from_vec(py));
        pred_corners[0].push(tape.sub(pxv, dist[0])?);
        pred_corners[1].push(tape.sub(pyv, dist[1])?);
        pred_corners[2].push(tape.add(pxv, dist[2])?);
        pred_corners[3].push(tape.add(pyv, dist[3])?);
    }

    let (reg, ctr) = if num_pos == 0 {
        (tape.scalar(0.0), tape.scalar(0.0))
    } else {
        let pred = BoxVars {
            x1: tape.concat(&pred_corners[0])?,
            y1: tape.concat(&pred_corners[1])?,
            x2: tape.concat(&pred_corners[2])?,
            y2: tape.concat(&pred_corners[3])?,
        };
        let gt = Tensor::new(vec![num_pos, 4], gt_rows)?;
        let per_box = match cfg.reg_loss {
            RegLossKind::Ciou => ciou_loss(tape, &pred, &gt)?,
            RegLossKind::Giou => giou_loss(tape, &pred, &gt)?,
        };
        // center-ness-weighted mean over positives
        let wsum: f64 = reg_weights.iter().sum();
        let wts = tape.constant(Tensor::from_vec(reg_weights));
        let weighted = tape.mul(per_box, wts)?;
        let s = tape.sum(weighted)?;
        let reg = tape.mul_const(s, 1.0 / wsum.max(1e-12))?;

        let ctr_logits = tape.concat(&ctr_logit_parts)?;
        let ctr = centerness_bce(tape, ctr_logits, Tensor::from_vec(ctr_targets))?;
        (reg, ctr)
    };

    let t = tape.add(cls_total, reg)?;
    let total = tape.add(t, ctr)?;
    Ok(LossTerms {
        cls: cls_total,
        reg,
        ctr,
        total,
        num_pos,
    })
}
