//! Acceptance gate: every headline requirement gets one pass/fail line.
//! Run with `cargo test -p agsfcos-cli --test acceptance -- --nocapture`
//! to see the lines as they complete.

use std::process::Command;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use agsfcos_core::assign::{centerness, GroundTruthBox};
use agsfcos_core::config::ModelConfig;
use agsfcos_core::data::{generate_synthetic, SynthSpec};
use agsfcos_core::eval::{evaluate, EvalImage, IOU_THRESHOLDS};
use agsfcos_core::fpn::PyramidLevels;
use agsfcos_core::gc::GcBlock;
use agsfcos_core::gradcheck::{gradcheck, gradcheck_params};
use agsfcos_core::loss::{ciou_loss, focal_loss, BoxVars};
use agsfcos_core::model::Model;
use agsfcos_core::params::ParamStore;
use agsfcos_core::postprocess::{det_order, iou, Detection};
use agsfcos_core::sepc::{mac_count, Head};
use agsfcos_core::tape::{Precision, Tape, Var};
use agsfcos_core::tensor::Tensor;
use agsfcos_core::train::{train, TrainSession};

fn verdict(name: &str, pass: bool, detail: &str) {
    println!(
        "[{}] {} ({})",
        if pass { "PASS" } else { "FAIL" },
        name,
        detail
    );
    assert!(pass, "{}: {}", name, detail);
}

fn random_vec(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

// ---- gradient correctness ----

#[test]
fn acceptance_gradient_correctness() {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut track = |label: &str, err: f64| {
        assert!(err <= 1e-5, "{} gradient error {}", label, err);
        worst = worst.max(err);
    };

    // backbone (residual stages + stem)
    {
        let mut cfg = ModelConfig::tiny();
        cfg.stem_width = 2;
        cfg.backbone_widths = [2, 2, 2];
        let model = Model::new(&ModelConfig { gc_enabled: false, fpn_width: 2, head_depth: 1, ..cfg }).unwrap();
        let mut store = model.init_params(7).unwrap();
        // keep the final relu of each block off its kink
        let names: Vec<String> = store
            .names()
            .filter(|n| n.contains("gn2.gamma"))
            .map(|s| s.to_string())
            .collect();
        for n in names {
            let len = store.value(&n).unwrap().numel();
            store.set_value(&n, Tensor::full(&[len], 0.7)).unwrap();
        }
        let img = Tensor::new(vec![1, 3, 32, 32], random_vec(3 * 32 * 32, -1.0, 1.0, 23)).unwrap();
        let err = gradcheck_params(
            |t, s| {
                let x = t.leaf(img.clone(), false);
                let out = model.forward(t, s, x)?;
                let mut total = t.scalar(0.0);
                for l in 0..3 {
                    let sc = t.sum(out.cls_logits[l])?;
                    total = t.add(total, sc)?;
                }
                Ok(total)
            },
            &store,
            1e-5,
        )
        .unwrap();
        track("backbone+fpn+head", err);
    }

    // global-context block
    {
        let gc = GcBlock::new("gc", 4, 2).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        gc.init(&mut store, &mut rng).unwrap();
        store
            .set_value(
                "gc.wv2.w",
                Tensor::new(vec![4, 2, 1, 1], random_vec(8, -0.5, 0.5, 60)).unwrap(),
            )
            .unwrap();
        let x = Tensor::new(vec![1, 4, 3, 3], random_vec(36, -1.5, 1.5, 61)).unwrap();
        let err = gradcheck_params(
            |t, s| {
                let v = t.leaf(x.clone(), false);
                let out = gc.forward(t, s, v)?;
                let sq = t.mul(out, out)?;
                t.sum(sq)
            },
            &store,
            1e-5,
        )
        .unwrap();
        track("gc block", err);
    }

    // 4-deep pyramid convolution stack with head convs
    {
        let cfg = ModelConfig {
            fpn_width: 2,
            head_depth: 4,
            num_classes: 2,
            ..ModelConfig::tiny()
        };
        let head = Head::new("head", &cfg);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        head.init(&mut store, &mut rng).unwrap();
        let inputs: Vec<Tensor> = [8usize, 4, 2]
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                Tensor::new(vec![1, 2, s, s], random_vec(2 * s * s, 0.2, 1.2, 32 + i as u64)).unwrap()
            })
            .collect();
        let err = gradcheck_params(
            |t, s| {
                let levels: Vec<Var> = inputs.iter().map(|i| t.leaf(i.clone(), false)).collect();
                let out = head.forward(t, s, &PyramidLevels { levels })?;
                let mut total = t.scalar(0.0);
                for l in 0..3 {
                    let a = t.sum(out.cls_logits[l])?;
                    let b = t.sum(out.distances[l])?;
                    total = t.add(total, a)?;
                    total = t.add(total, b)?;
                }
                Ok(total)
            },
            &store,
            1e-5,
        )
        .unwrap();
        track("4-deep pconv head", err);
    }

    // focal loss through a sigmoid
    {
        let x0 = Tensor::from_vec(random_vec(12, -2.0, 2.0, 71));
        let targets = Tensor::from_vec(
            random_vec(12, 0.0, 1.0, 72)
                .into_iter()
                .map(|v| if v > 0.7 { 1.0 } else { 0.0 })
                .collect(),
        );
        let err = gradcheck(
            |t, x| {
                let p = t.sigmoid(x)?;
                focal_loss(t, p, &targets, 0.25, 2.0, 3.0)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        track("focal loss", err);
    }

    // center-ness BCE on logits
    {
        let x0 = Tensor::from_vec(random_vec(8, -2.0, 2.0, 73));
        let targets: Vec<f64> = random_vec(8, 0.05, 0.95, 74);
        let err = gradcheck(
            |t, x| {
                let per = t.bce_with_logits(x, Tensor::from_vec(targets.clone()))?;
                t.mean(per)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        track("center-ness bce", err);
    }

    // ciou on overlapping boxes with matched aspect ratios (the balance
    // weight is held constant by the analytic gradient)
    {
        let gt = Tensor::new(vec![1, 4], vec![2.5, 0.5, 8.5, 6.5]).unwrap();
        let x0 = Tensor::from_vec(vec![1.0, 2.0, 6.0, 7.0]);
        let err = gradcheck(
            |t, x| {
                let pred = BoxVars {
                    x1: t.gather(x, vec![0])?,
                    y1: t.gather(x, vec![1])?,
                    x2: t.gather(x, vec![2])?,
                    y2: t.gather(x, vec![3])?,
                };
                let l = ciou_loss(t, &pred, &gt)?;
                t.sum(l)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        track("ciou loss", err);
    }

    let elapsed = t0.elapsed().as_secs_f64();
    verdict(
        "gradient correctness",
        elapsed < 120.0,
        &format!("max rel err {:.2e}, {:.1}s", worst, elapsed),
    );
}

// ---- pyramid convolution cost ----

#[test]
fn acceptance_pconv_cost_ratio() {
    let r3 = mac_count(100, 100, 3, 64, 3).unwrap();
    let mut all_below = true;
    for levels in 1..=6 {
        let r = mac_count(128, 128, levels, 16, 3).unwrap();
        all_below &= r.ratio <= 1.5;
    }
    verdict(
        "pconv cost ratio",
        (r3.ratio - 1.476).abs() <= 0.01 && all_below,
        &format!("3-level ratio {:.4}, all level counts <= 1.5", r3.ratio),
    );
}

// ---- loss oracles ----

fn focal_ref(p: &[f64], y: &[f64], alpha: f64, gamma: f64, norm: f64) -> f64 {
    let mut s = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        let pc = pi.clamp(1e-12, 1.0 - 1e-12);
        s -= alpha * yi * (1.0 - pc).powf(gamma) * pc.ln();
        s -= (1.0 - alpha) * (1.0 - yi) * pc.powf(gamma) * (1.0 - pc).ln();
    }
    s / norm
}

fn ciou_ref(p: [f64; 4], g: [f64; 4]) -> f64 {
    let inter = ((p[2].min(g[2]) - p[0].max(g[0])).max(0.0))
        * ((p[3].min(g[3]) - p[1].max(g[1])).max(0.0));
    let union = (p[2] - p[0]) * (p[3] - p[1]) + (g[2] - g[0]) * (g[3] - g[1]) - inter;
    let iou = inter / union;
    let rho2 =
        ((p[0] + p[2] - g[0] - g[2]) / 2.0).powi(2) + ((p[1] + p[3] - g[1] - g[3]) / 2.0).powi(2);
    let cw = p[2].max(g[2]) - p[0].min(g[0]);
    let ch = p[3].max(g[3]) - p[1].min(g[1]);
    let v = 4.0 / (std::f64::consts::PI * std::f64::consts::PI)
        * (((g[2] - g[0]) / (g[3] - g[1])).atan() - ((p[2] - p[0]) / (p[3] - p[1])).atan()).powi(2);
    let alpha = v / (1.0 - iou + v + 1e-9);
    1.0 - iou + rho2 / (cw * cw + ch * ch) + alpha * v
}

fn run_ciou(p: [f64; 4], g: [f64; 4]) -> f64 {
    let mut tape = Tape::new(Precision::F64);
    let pred = BoxVars {
        x1: tape.leaf(Tensor::from_vec(vec![p[0]]), false),
        y1: tape.leaf(Tensor::from_vec(vec![p[1]]), false),
        x2: tape.leaf(Tensor::from_vec(vec![p[2]]), false),
        y2: tape.leaf(Tensor::from_vec(vec![p[3]]), false),
    };
    let gt = Tensor::new(vec![1, 4], g.to_vec()).unwrap();
    let l = ciou_loss(&mut tape, &pred, &gt).unwrap();
    tape.value(l).data()[0]
}

#[test]
fn acceptance_loss_oracles() {
    let corner = run_ciou([0.0, 0.0, 2.0, 2.0], [2.0, 2.0, 4.0, 4.0]);
    let same = run_ciou([1.0, 2.0, 5.0, 7.0], [1.0, 2.0, 5.0, 7.0]);

    let mut tape = Tape::new(Precision::F64);
    let p = tape.leaf(Tensor::from_vec(vec![0.5]), false);
    let fl = focal_loss(&mut tape, p, &Tensor::from_vec(vec![1.0]), 0.25, 2.0, 1.0).unwrap();
    let focal_half = tape.value(fl).item().unwrap();

    let ctr = centerness(1.0, 1.0, 3.0, 3.0); // l=1, r=3, t=1, b=3

    // cross-check against straight-line reimplementations on random inputs
    let mut max_gap: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    for _ in 0..50 {
        let mk = |rng: &mut ChaCha8Rng| {
            let x1 = rng.gen_range(0.0..50.0);
            let y1 = rng.gen_range(0.0..50.0);
            [x1, y1, x1 + rng.gen_range(1.0..40.0), y1 + rng.gen_range(1.0..40.0)]
        };
        let (pb, gb) = (mk(&mut rng), mk(&mut rng));
        max_gap = max_gap.max((run_ciou(pb, gb) - ciou_ref(pb, gb)).abs());

        let probs: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..0.99)).collect();
        let ys: Vec<f64> = (0..6).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let mut t = Tape::new(Precision::F64);
        let pv = t.leaf(Tensor::from_vec(probs.clone()), false);
        let got = focal_loss(&mut t, pv, &Tensor::from_vec(ys.clone()), 0.25, 2.0, 2.0).unwrap();
        max_gap = max_gap.max((t.value(got).item().unwrap() - focal_ref(&probs, &ys, 0.25, 2.0, 2.0)).abs());
    }

    let pass = (corner - 1.25).abs() <= 1e-9
        && same.abs() <= 1e-9
        && (focal_half - 0.0625 * std::f64::consts::LN_2).abs() <= 1e-9
        && (ctr - 1.0 / 3.0).abs() <= 1e-12
        && max_gap <= 1e-10;
    verdict(
        "loss oracles",
        pass,
        &format!(
            "ciou corner {:.10}, identical {:.1e}, focal {:.10}, centerness {:.10}, ref gap {:.1e}",
            corner, same, focal_half, ctr, max_gap
        ),
    );
}

// ---- gc block identity and normalization ----

#[test]
fn acceptance_gc_identity_and_normalization() {
    let gc = GcBlock::new("gc", 8, 4).unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    gc.init(&mut store, &mut rng).unwrap();

    let x = Tensor::new(vec![2, 8, 4, 5], random_vec(2 * 8 * 20, -1.5, 1.5, 9)).unwrap();
    let mut tape = Tape::new(Precision::F64);
    let xv = tape.leaf(x.clone(), false);
    let out = gc.forward(&mut tape, &store, xv).unwrap();
    let identity_gap = tape
        .value(out)
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);

    // non-trivial fusion path for the invariants
    store
        .set_value(
            "gc.wv2.w",
            Tensor::new(vec![8, 2, 1, 1], random_vec(16, -0.5, 0.5, 40)).unwrap(),
        )
        .unwrap();
    let mut tape = Tape::new(Precision::F64);
    let xv = tape.leaf(x.clone(), false);
    let f = gc.forward_detailed(&mut tape, &store, xv).unwrap();
    let attn = tape.value(f.attn);
    let mut attn_gap: f64 = 0.0;
    for n in 0..2 {
        let s: f64 = attn.data()[n * 20..(n + 1) * 20].iter().sum();
        attn_gap = attn_gap.max((s - 1.0).abs());
    }
    let diff: Vec<f64> = tape
        .value(f.out)
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| a - b)
        .collect();
    let mut uniform_gap: f64 = 0.0;
    for p in 0..2 * 8 {
        let first = diff[p * 20];
        for &d in &diff[p * 20..(p + 1) * 20] {
            uniform_gap = uniform_gap.max((d - first).abs());
        }
    }

    verdict(
        "gc identity and normalization",
        identity_gap == 0.0 && attn_gap <= 1e-12 && uniform_gap <= 1e-12,
        &format!(
            "identity gap {}, attention sum gap {:.1e}, uniformity gap {:.1e}",
            identity_gap, attn_gap, uniform_gap
        ),
    );
}

// ---- fpn shape law ----

#[test]
fn acceptance_fpn_shape_law() {
    let cfg = ModelConfig { image_size: 64, ..ModelConfig::tiny() };
    let model = Model::new(&cfg).unwrap();
    let store = model.init_params(3).unwrap();
    let mut tape = Tape::new(Precision::F64);
    let img = tape.leaf(Tensor::zeros(&[1, 3, 64, 64]), false);
    let out = model.forward(&mut tape, &store, img).unwrap();
    let dims: Vec<Vec<usize>> = (0..3)
        .map(|l| tape.value(out.cls_logits[l]).shape()[2..].to_vec())
        .collect();
    let pass = dims[0] == [8, 8]
        && dims[1] == [4, 4]
        && dims[2] == [2, 2]
        && dims[1][0] == 2 * dims[2][0]
        && dims[1][1] == 2 * dims[2][1];
    verdict(
        "fpn shape law",
        pass,
        &format!("64x64 -> {:?} {:?} {:?}", dims[0], dims[1], dims[2]),
    );
}

// ---- evaluator parity ----

fn oracle_ap_at(images: &[EvalImage], num_classes: usize, thr: f64) -> f64 {
    let mut aps = Vec::new();
    for c in 0..num_classes {
        let mut npos = 0usize;
        let mut recs: Vec<(f64, bool)> = Vec::new();
        for img in images {
            let gts: Vec<_> = img.gts.iter().filter(|g| g.class == c).collect();
            npos += gts.len();
            let mut dets: Vec<_> = img.dets.iter().filter(|d| d.class == c).collect();
            dets.sort_by(|a, b| det_order(a, b));
            let mut used = vec![false; gts.len()];
            for d in dets {
                let mut best: Option<(usize, f64)> = None;
                for (gi, g) in gts.iter().enumerate() {
                    if used[gi] {
                        continue;
                    }
                    let gd = Detection {
                        class: c,
                        score: 0.0,
                        x1: g.x1,
                        y1: g.y1,
                        x2: g.x2,
                        y2: g.y2,
                    };
                    let v = iou(d, &gd);
                    if v >= thr && best.map_or(true, |(_, bv)| v > bv) {
                        best = Some((gi, v));
                    }
                }
                if let Some((gi, _)) = best {
                    used[gi] = true;
                    recs.push((d.score, true));
                } else {
                    recs.push((d.score, false));
                }
            }
        }
        if npos == 0 {
            continue;
        }
        recs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut ap = 0.0;
        for i in 0..=100 {
            let want = i as f64 / 100.0;
            let (mut tp, mut n, mut best_p) = (0.0f64, 0.0f64, 0.0f64);
            for &(_, is_tp) in &recs {
                n += 1.0;
                if is_tp {
                    tp += 1.0;
                }
                if tp / npos as f64 >= want - 1e-12 {
                    best_p = best_p.max(tp / n);
                }
            }
            ap += best_p;
        }
        aps.push(ap / 101.0);
    }
    if aps.is_empty() {
        -1.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

#[test]
fn acceptance_evaluator_parity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut max_gap: f64 = 0.0;
    for case in 0..50 {
        let num_classes = rng.gen_range(1..4);
        let n_images = rng.gen_range(1..4);
        let mut images = Vec::new();
        for id in 0..n_images {
            let mut gts = Vec::new();
            for _ in 0..rng.gen_range(0..=3) {
                let x1 = rng.gen_range(0.0..80.0);
                let y1 = rng.gen_range(0.0..80.0);
                gts.push(GroundTruthBox {
                    x1,
                    y1,
                    x2: x1 + rng.gen_range(5.0..60.0),
                    y2: y1 + rng.gen_range(5.0..60.0),
                    class: rng.gen_range(0..num_classes),
                });
            }
            let mut dets = Vec::new();
            for _ in 0..rng.gen_range(0..=5) {
                let b = if !gts.is_empty() && rng.gen_bool(0.5) {
                    let g = gts[rng.gen_range(0..gts.len())];
                    let j = rng.gen_range(-6.0..6.0);
                    [g.x1 + j, g.y1 + j, g.x2 + j, g.y2 + j]
                } else {
                    let x1 = rng.gen_range(0.0..80.0);
                    let y1 = rng.gen_range(0.0..80.0);
                    [x1, y1, x1 + rng.gen_range(5.0..60.0), y1 + rng.gen_range(5.0..60.0)]
                };
                dets.push(Detection {
                    class: rng.gen_range(0..num_classes),
                    score: rng.gen_range(0.05..1.0),
                    x1: b[0],
                    y1: b[1],
                    x2: b[2],
                    y2: b[3],
                });
            }
            images.push(EvalImage { id, gts, dets });
        }
        let s = evaluate(&images, num_classes).unwrap();
        let o50 = oracle_ap_at(&images, num_classes, 0.50);
        let o_all: Vec<f64> = IOU_THRESHOLDS
            .iter()
            .map(|&t| oracle_ap_at(&images, num_classes, t))
            .collect();
        let o_mean = if o_all.iter().all(|&a| a < 0.0) {
            -1.0
        } else {
            o_all.iter().sum::<f64>() / o_all.len() as f64
        };
        let gap = (s.ap50 - o50).abs().max((s.ap - o_mean).abs());
        assert!(gap <= 1e-9, "case {} gap {}", case, gap);
        max_gap = max_gap.max(gap);
    }
    verdict(
        "evaluator parity",
        max_gap <= 1e-9,
        &format!("50 micro-instances, max AP/AP50 gap {:.1e}", max_gap),
    );
}

// ---- end-to-end overfit ----

fn overfit_config() -> ModelConfig {
    ModelConfig {
        num_classes: 3,
        image_size: 256,
        stem_width: 16,
        backbone_widths: [32, 64, 64],
        blocks_per_stage: 1,
        gc_enabled: true,
        gc_ratio: 4,
        fpn_width: 32,
        head_depth: 4,
        use_sepc: true,
        lr: 0.01,
        decay_epochs: vec![140, 155],
        batch_size: 4,
        epochs: 160,
        ..ModelConfig::default()
    }
}

#[test]
fn acceptance_end_to_end_overfit() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { num_images: 20, image_size: 256, seed: 11, max_shapes: 3 };
    let dataset = generate_synthetic(&spec, dir.path()).unwrap();

    let cfg = overfit_config();
    let mut session = TrainSession::new(&cfg, 11).unwrap();
    let mut losses = Vec::new();
    let mut reached = None;
    'train: for epoch in 0..cfg.epochs {
        let lr = session.lr_at(epoch);
        let order = session.epoch_order(dataset.records.len(), epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let (images, targets) = session.prepare_batch(&dataset, chunk, epoch).unwrap();
            let m = session.train_step(&images, &targets, lr).unwrap();
            assert!(m.total.is_finite(), "loss diverged at step {}", m.step);
            losses.push(m.total);
        }
        session.state.epoch = epoch + 1;
        if epoch >= 99 && (epoch + 1) % 5 == 0 {
            let s = session.model.evaluate_dataset(&session.store, &dataset).unwrap();
            if s.ap50 >= 0.90 {
                reached = Some((s.ap50, session.state.step));
                break 'train;
            }
        }
    }
    let (ap50, steps) = reached.unwrap_or_else(|| {
        let s = session.model.evaluate_dataset(&session.store, &dataset).unwrap();
        (s.ap50, session.state.step)
    });

    // window-averaged loss over completed 100-step blocks must decrease
    let windows: Vec<f64> = losses
        .chunks(100)
        .filter(|c| c.len() == 100)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let monotone = windows.windows(2).all(|w| w[1] < w[0]);

    let minutes = t0.elapsed().as_secs_f64() / 60.0;
    verdict(
        "end-to-end overfit",
        ap50 >= 0.90 && steps <= 800 && minutes <= 20.0 && monotone,
        &format!(
            "AP50 {:.3} after {} steps in {:.1} min, smoothed loss {:?} monotone: {}",
            ap50,
            steps,
            minutes,
            windows.iter().map(|w| (w * 100.0).round() / 100.0).collect::<Vec<_>>(),
            monotone
        ),
    );
}

// ---- ablation table ----

#[test]
fn acceptance_ablation_table() {
    let data_dir = tempfile::tempdir().unwrap();
    let out_dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        num_classes: 3,
        image_size: 64,
        stem_width: 4,
        backbone_widths: [4, 8, 8],
        blocks_per_stage: 1,
        gc_ratio: 2,
        fpn_width: 4,
        head_depth: 2,
        batch_size: 2,
        epochs: 2,
        ..ModelConfig::default()
    };
    let cfg_path = out_dir.path().join("cfg.json");
    cfg.save(&cfg_path).unwrap();
    generate_synthetic(
        &SynthSpec { num_images: 4, image_size: 64, seed: 2, max_shapes: 1 },
        data_dir.path(),
    )
    .unwrap();

    let output = Command::new(env!("CARGO_BIN_EXE_agsfcos"))
        .args([
            "ablate",
            "--data",
            data_dir.path().to_str().unwrap(),
            "--out",
            out_dir.path().to_str().unwrap(),
            "--seed",
            "5",
            "--config",
            cfg_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "ablate failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let csv = std::fs::read_to_string(out_dir.path().join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    let losses_finite = rows.iter().all(|r| {
        r.split(',')
            .nth(1)
            .and_then(|v| v.parse::<f64>().ok())
            .map_or(false, |v| v.is_finite())
    });
    verdict(
        "ablation table",
        rows.len() == 4 && losses_finite && out_dir.path().join("ablation.md").exists(),
        &format!("{} variants, finite losses: {}", rows.len(), losses_finite),
    );
}

// ---- reproducibility and resume ----

#[test]
fn acceptance_reproducibility() {
    let data_dir = tempfile::tempdir().unwrap();
    let dataset = generate_synthetic(
        &SynthSpec { num_images: 4, image_size: 64, seed: 2, max_shapes: 1 },
        data_dir.path(),
    )
    .unwrap();
    let cfg = ModelConfig {
        num_classes: 3,
        image_size: 64,
        stem_width: 4,
        backbone_widths: [4, 8, 8],
        blocks_per_stage: 1,
        gc_ratio: 2,
        fpn_width: 4,
        head_depth: 2,
        batch_size: 2,
        epochs: 2,
        ..ModelConfig::default()
    };

    // identical seeds -> bit-identical metric logs
    let out_a = tempfile::tempdir().unwrap();
    let out_b = tempfile::tempdir().unwrap();
    let mut sa = TrainSession::new(&cfg, 17).unwrap();
    let mut sb = TrainSession::new(&cfg, 17).unwrap();
    train(&mut sa, &dataset, out_a.path()).unwrap();
    train(&mut sb, &dataset, out_b.path()).unwrap();
    let ma = std::fs::read(out_a.path().join("metrics.csv")).unwrap();
    let mb = std::fs::read(out_b.path().join("metrics.csv")).unwrap();
    let logs_identical = ma == mb;

    // checkpoint-resume reproduces the uninterrupted run exactly
    let out_c = tempfile::tempdir().unwrap();
    let mut cfg1 = cfg.clone();
    cfg1.epochs = 1;
    let mut sc = TrainSession::new(&cfg1, 17).unwrap();
    train(&mut sc, &dataset, out_c.path()).unwrap();
    let mut sr = TrainSession::resume(&cfg, &out_c.path().join("checkpoint")).unwrap();
    train(&mut sr, &dataset, out_c.path()).unwrap();

    let mut resume_identical = true;
    for (name, p) in sa.store.iter() {
        let q = sr.store.value(name).unwrap();
        for (x, y) in p.value.data().iter().zip(q.data()) {
            if x.to_bits() != y.to_bits() {
                resume_identical = false;
            }
        }
    }
    let mc = std::fs::read(out_c.path().join("metrics.csv")).unwrap();
    let resumed_log_identical = mc == ma;

    verdict(
        "reproducibility",
        logs_identical && resume_identical && resumed_log_identical,
        &format!(
            "logs identical: {}, resume params identical: {}, resumed log identical: {}",
            logs_identical, resume_identical, resumed_log_identical
        ),
    );
}
