//! Full detector assembly: backbone, optional per-level global-context
//! blocks, FPN, and the shared head, plus inference helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assign::GroundTruthBox;
use crate::backbone::Backbone;
use crate::config::{ModelConfig, PrecisionCfg};
use crate::data::{load_image, DatasetIndex};
use crate::error::Result;
use crate::eval::{evaluate, EvalImage, EvalSummary};
use crate::fpn::Fpn;
use crate::gc::GcBlock;
use crate::params::ParamStore;
use crate::postprocess::{postprocess, Detection};
use crate::sepc::{Head, HeadOutputs};
use crate::tape::{Precision, Tape, Var};
use crate::tensor::Tensor;

pub struct Model {
    pub cfg: ModelConfig,
    backbone: Backbone,
    gc: Option<Vec<GcBlock>>,
    fpn: Fpn,
    head: Head,
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let gc = if cfg.gc_enabled {
            Some(
                (0..3)
                    .map(|i| {
                        GcBlock::new(format!("gc{}", i + 3), cfg.backbone_widths[i], cfg.gc_ratio)
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            backbone: Backbone::new(cfg),
            gc,
            fpn: Fpn::new("fpn", cfg.backbone_widths, cfg.fpn_width, cfg.fpn_smoothing),
            head: Head::new("head", cfg),
        })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.backbone.init(&mut store, &mut rng)?;
        if let Some(gc) = &self.gc {
            for g in gc {
                g.init(&mut store, &mut rng)?;
            }
        }
        self.fpn.init(&mut store, &mut rng)?;
        self.head.init(&mut store, &mut rng)?;
        Ok(store)
    }

    pub fn precision(&self) -> Precision {
        match self.cfg.precision {
            PrecisionCfg::F64 => Precision::F64,
            PrecisionCfg::F32 => Precision::F32,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<HeadOutputs> {
        let mut feats = self.backbone.forward(tape, store, image)?;
        if let Some(gc) = &self.gc {
            feats.c3 = gc[0].forward(tape, store, feats.c3)?;
            feats.c4 = gc[1].forward(tape, store, feats.c4)?;
            feats.c5 = gc[2].forward(tape, store, feats.c5)?;
        }
        let pyramid = self.fpn.forward(tape, store, &feats)?;
        self.head.forward(tape, store, &pyramid)
    }

    /// Spatial sizes of the three head levels for this config.
    pub fn level_sizes(&self) -> [(usize, usize); 3] {
        let s = self.cfg.image_size;
        [(s / 8, s / 8), (s / 16, s / 16), (s / 32, s / 32)]
    }

    /// Run inference on a single [1,3,H,W] image.
    pub fn detect(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<Detection>> {
        let mut tape = Tape::new(self.precision());
        let x = tape.leaf(image.clone(), false);
        let out = self.forward(&mut tape, store, x)?;
        let mut slices = Vec::new();
        for l in 0..3 {
            let cls = tape.value(out.cls_logits[l]);
            let ctr = tape.value(out.ctr_logits[l]);
            let dist = tape.value(out.distances[l]);
            let sh = cls.shape();
            slices.push((
                cls.data().to_vec(),
                ctr.data().to_vec(),
                dist.data().to_vec(),
                sh[2],
                sh[3],
            ));
        }
        let views: Vec<(&[f64], &[f64], &[f64], usize, usize)> = slices
            .iter()
            .map(|(c, t, d, h, w)| (c.as_slice(), t.as_slice(), d.as_slice(), *h, *w))
            .collect();
        postprocess(&views, &self.cfg)
    }

    /// Detect over a whole dataset and score it with the COCO protocol.
    pub fn evaluate_dataset(&self, store: &ParamStore, dataset: &DatasetIndex) -> Result<EvalSummary> {
        let images = self.collect_eval_images(store, dataset)?;
        evaluate(&images, self.cfg.num_classes)
    }

    pub fn collect_eval_images(&self, store: &ParamStore, dataset: &DatasetIndex) -> Result<Vec<EvalImage>> {
        dataset
            .records
            .iter()
            .map(|rec| {
                let img = load_image(&rec.path, &self.cfg.pixel_mean, &self.cfg.pixel_std)?;
                let dets = self.detect(store, &img)?;
                Ok(EvalImage {
                    id: rec.image_id,
                    gts: rec.boxes.clone(),
                    dets,
                })
            })
            .collect()
    }
}

/// Horizontally flip a [1,3,H,W] image and its boxes in place.
pub fn hflip(image: &Tensor, boxes: &[GroundTruthBox], width: f64) -> Result<(Tensor, Vec<GroundTruthBox>)> {
    let sh = image.shape().to_vec();
    let (c, h, w) = (sh[1], sh[2], sh[3]);
    let mut data = image.data().to_vec();
    for ci in 0..c {
        for y in 0..h {
            data[(ci * h + y) * w..(ci * h + y + 1) * w].reverse();
        }
    }
    let flipped = boxes
        .iter()
        .map(|b| GroundTruthBox {
            x1: width - b.x2,
            y1: b.y1,
            x2: width - b.x1,
            y2: b.y2,
            class: b.class,
        })
        .collect();
    Ok((Tensor::new(sh, data)?, flipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> (Model, ParamStore) {
        let cfg = ModelConfig {
            image_size: 64,
            ..ModelConfig::tiny()
        };
        let m = Model::new(&cfg).unwrap();
        let store = m.init_params(5).unwrap();
        (m, store)
    }

    #[test]
    fn forward_produces_three_levels_with_expected_shapes() {
        let (m, store) = tiny_model();
        let mut tape = Tape::new(Precision::F64);
        let img = tape.leaf(Tensor::zeros(&[1, 3, 64, 64]), false);
        let out = m.forward(&mut tape, &store, img).unwrap();
        for (l, &(h, w)) in m.level_sizes().iter().enumerate() {
            assert_eq!(
                tape.value(out.cls_logits[l]).shape(),
                &[1, m.cfg.num_classes, h, w]
            );
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig { image_size: 64, ..ModelConfig::tiny() };
        let m = Model::new(&cfg).unwrap();
        let a = m.init_params(11).unwrap();
        let b = m.init_params(11).unwrap();
        let c = m.init_params(12).unwrap();
        for (name, p) in a.iter() {
            assert_eq!(p.value.data(), b.value(name).unwrap().data());
        }
        assert!(a
            .iter()
            .any(|(name, p)| p.value.data() != c.value(name).unwrap().data()));
    }

    #[test]
    fn gc_disabled_drops_gc_parameters() {
        let cfg = ModelConfig { image_size: 64, gc_enabled: false, ..ModelConfig::tiny() };
        let m = Model::new(&cfg).unwrap();
        let store = m.init_params(0).unwrap();
        assert!(store.names().all(|n| !n.starts_with("gc")));
        let mut tape = Tape::new(Precision::F64);
        let img = tape.leaf(Tensor::zeros(&[1, 3, 64, 64]), false);
        m.forward(&mut tape, &store, img).unwrap();
    }

    #[test]
    fn detect_runs_and_caps_outputs() {
        let (m, store) = tiny_model();
        let img = Tensor::zeros(&[1, 3, 64, 64]);
        let dets = m.detect(&store, &img).unwrap();
        assert!(dets.len() <= m.cfg.max_detections);
        for d in &dets {
            assert!(d.x1 >= 0.0 && d.x2 <= 64.0 && d.x1 <= d.x2);
        }
    }

    #[test]
    fn hflip_mirrors_pixels_and_boxes() {
        let img = Tensor::new(vec![1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = GroundTruthBox { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0, class: 0 };
        let (fi, fb) = hflip(&img, &[b], 4.0).unwrap();
        assert_eq!(fi.data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!((fb[0].x1, fb[0].x2), (3.0, 4.0));
    }
}
