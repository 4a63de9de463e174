//! Scale-equalizing pyramid convolution head.
//!
//! A PConv layer applies three independent 3x3 kernels shared across all
//! pyramid levels: the level's own map at stride 1, the coarser level at
//! stride 1 followed by bilinear 2x upsampling, and the finer level at
//! stride 2. The boundary levels drop the missing neighbor term. A stack of
//! PConv+ReLU layers feeds three parallel 3x3 prediction convs
//! (classification, center-ness, box regression) with a learnable per-level
//! regression scale.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fpn::PyramidLevels;
use crate::layers::Conv2dLayer;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub struct PConvLayer {
    pub name: String,
    /// Kernel applied to the level's own map (w_0).
    w_same: Conv2dLayer,
    /// Kernel applied to the coarser level before upsampling (w_1).
    w_coarser: Conv2dLayer,
    /// Kernel applied to the finer level at stride 2 (w_-1).
    w_finer: Conv2dLayer,
}

impl PConvLayer {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let name = name.into();
        // only the own-level conv carries the bias so the three branches sum
        // to a single affine map
        let mut w_finer = Conv2dLayer::new(format!("{}.wm1", name), channels, channels, 3, 2).no_bias();
        w_finer.pad = 1;
        Self {
            w_same: Conv2dLayer::new(format!("{}.w0", name), channels, channels, 3, 1),
            w_coarser: Conv2dLayer::new(format!("{}.w1", name), channels, channels, 3, 1).no_bias(),
            w_finer,
            name,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.w_same.init(store, rng)?;
        self.w_coarser.init(store, rng)?;
        self.w_finer.init(store, rng)
    }

    /// One pyramid convolution over all levels (finest first).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, levels: &[Var]) -> Result<Vec<Var>> {
        if levels.len() < 2 {
            return Err(Error::Config(format!(
                "pconv needs at least 2 levels, got {}",
                levels.len()
            )));
        }
        for i in 0..levels.len() - 1 {
            let fine = tape.value(levels[i]).shape().to_vec();
            let coarse = tape.value(levels[i + 1]).shape().to_vec();
            if fine[2] != 2 * coarse[2] || fine[3] != 2 * coarse[3] {
                return Err(Error::Shape(format!(
                    "pconv levels must be in exact 2x relation, got {:?} vs {:?}",
                    fine, coarse
                )));
            }
        }
        let top = levels.len() - 1;
        let mut out = Vec::with_capacity(levels.len());
        for (i, &x) in levels.iter().enumerate() {
            let mut y = self.w_same.forward(tape, store, x)?;
            if i < top {
                let c = self.w_coarser.forward(tape, store, levels[i + 1])?;
                let up = tape.upsample2x(c)?;
                y = tape.add(y, up)?;
            }
            if i > 0 {
                let f = self.w_finer.forward(tape, store, levels[i - 1])?;
                y = tape.add(y, f)?;
            }
            out.push(y);
        }
        Ok(out)
    }
}

/// Per-level raw head outputs plus decoded regression distances.
pub struct HeadOutputs {
    pub cls_logits: Vec<Var>,
    pub ctr_logits: Vec<Var>,
    pub reg_raw: Vec<Var>,
    /// exp(scale_l * reg_raw), strictly positive distances in stride units
    /// of the image (pixels).
    pub distances: Vec<Var>,
}

enum TowerLayer {
    PConv(PConvLayer),
    /// Ordinary per-level 3x3 conv, used when SEPC is disabled.
    Conv(Conv2dLayer),
}

pub struct Head {
    tower: Vec<TowerLayer>,
    cls: Conv2dLayer,
    ctr: Conv2dLayer,
    reg: Conv2dLayer,
    num_levels: usize,
    name: String,
}

impl Head {
    pub fn new(name: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.fpn_width;
        let tower = (0..cfg.head_depth)
            .map(|i| {
                if cfg.use_sepc {
                    TowerLayer::PConv(PConvLayer::new(format!("{}.pconv{}", name, i), d))
                } else {
                    TowerLayer::Conv(Conv2dLayer::new(format!("{}.conv{}", name, i), d, d, 3, 1))
                }
            })
            .collect();
        Self {
            tower,
            cls: Conv2dLayer::new(format!("{}.cls", name), d, cfg.num_classes, 3, 1),
            ctr: Conv2dLayer::new(format!("{}.ctr", name), d, 1, 3, 1),
            reg: Conv2dLayer::new(format!("{}.reg", name), d, 4, 3, 1),
            num_levels: 3,
            name: name.to_string(),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for layer in &self.tower {
            match layer {
                TowerLayer::PConv(p) => p.init(store, rng)?,
                TowerLayer::Conv(c) => c.init(store, rng)?,
            }
        }
        // classification bias starts at the focal prior pi = 0.01 so early
        // training is not swamped by background loss
        let prior = -((1.0 - 0.01f64) / 0.01).ln();
        self.cls.init_with(store, rng, 0.01, prior)?;
        self.ctr.init_with(store, rng, 0.01, 0.0)?;
        self.reg.init_with(store, rng, 0.01, 0.0)?;
        for l in 0..self.num_levels {
            store.register(&format!("{}.scale{}", self.name, l), Tensor::scalar(1.0))?;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, pyramid: &PyramidLevels) -> Result<HeadOutputs> {
        if pyramid.levels.len() != self.num_levels {
            return Err(Error::Shape(format!(
                "head expects {} levels, got {}",
                self.num_levels,
                pyramid.levels.len()
            )));
        }
        let mut levels = pyramid.levels.clone();
        for layer in &self.tower {
            levels = match layer {
                TowerLayer::PConv(p) => p.forward(tape, store, &levels)?,
                TowerLayer::Conv(c) => levels
                    .iter()
                    .map(|&x| c.forward(tape, store, x))
                    .collect::<Result<_>>()?,
            };
            levels = levels
                .into_iter()
                .map(|x| tape.relu(x))
                .collect::<Result<_>>()?;
        }
        let mut out = HeadOutputs {
            cls_logits: Vec::new(),
            ctr_logits: Vec::new(),
            reg_raw: Vec::new(),
            distances: Vec::new(),
        };
        for (l, &x) in levels.iter().enumerate() {
            out.cls_logits.push(self.cls.forward(tape, store, x)?);
            out.ctr_logits.push(self.ctr.forward(tape, store, x)?);
            let raw = self.reg.forward(tape, store, x)?;
            out.reg_raw.push(raw);
            let scale = tape.param(store, &format!("{}.scale{}", self.name, l))?;
            let scaled = tape.mul_scalar_var(raw, scale)?;
            out.distances.push(tape.exp(scaled)?);
        }
        Ok(out)
    }
}

/// Multiply-accumulate counts for one PConv layer versus one ordinary
/// per-level convolution over the same pyramid.
#[derive(Clone, Copy, Debug)]
pub struct MacReport {
    pub pconv_macs: u128,
    pub ordinary_macs: u128,
    pub ratio: f64,
}

/// Exact MAC counts by summation over output positions. `base` is the spatial
/// size of the finest level, which must halve exactly `levels - 1` times.
pub fn mac_count(base_h: usize, base_w: usize, levels: usize, channels: usize, ksize: usize) -> Result<MacReport> {
    if levels == 0 {
        return Err(Error::Config("mac_count needs at least one level".into()));
    }
    let mut areas = Vec::with_capacity(levels);
    let (mut h, mut w) = (base_h, base_w);
    for i in 0..levels {
        if h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "base {}x{} cannot support {} pyramid levels",
                base_h, base_w, levels
            )));
        }
        areas.push((h * w) as u128);
        if i + 1 < levels {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Config(format!(
                    "level {} size {}x{} does not halve exactly",
                    i, h, w
                )));
            }
            h /= 2;
            w /= 2;
        }
    }
    let per_pos = (channels * channels * ksize * ksize) as u128;
    let ordinary: u128 = areas.iter().sum::<u128>() * per_pos;
    let mut pconv: u128 = 0;
    for i in 0..levels {
        // own-level stride-1 conv
        pconv += areas[i] * per_pos;
        // coarser level, stride-1 conv before upsampling
        if i + 1 < levels {
            pconv += areas[i + 1] * per_pos;
        }
        // finer level at stride 2: output positions equal this level's area
        if i > 0 {
            pconv += areas[i] * per_pos;
        }
    }
    Ok(MacReport {
        pconv_macs: pconv,
        ordinary_macs: ordinary,
        ratio: pconv as f64 / ordinary as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck_params;
    use crate::tape::Precision;
    use rand::Rng;
    use rand::SeedableRng;

    fn pyramid(tape: &mut Tape, c: usize, base: usize, seed: u64) -> Vec<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        [base, base / 2, base / 4]
            .iter()
            .map(|&s| {
                let data = (0..c * s * s).map(|_| rng.gen_range(-1.0..1.0)).collect();
                tape.leaf(Tensor::new(vec![1, c, s, s], data).unwrap(), false)
            })
            .collect()
    }

    fn center_one_kernel(c: usize) -> Tensor {
        // 3x3 kernels with a centered identity: out[k] = in[k]
        let mut data = vec![0.0; c * c * 9];
        for k in 0..c {
            data[(k * c + k) * 9 + 4] = 1.0;
        }
        Tensor::new(vec![c, c, 3, 3], data).unwrap()
    }

    #[test]
    fn neighbors_disabled_gives_identity() {
        let p = PConvLayer::new("p", 2);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        p.init(&mut store, &mut rng).unwrap();
        store.set_value("p.w0.w", center_one_kernel(2)).unwrap();
        store.set_value("p.w0.b", Tensor::zeros(&[2])).unwrap();
        store.set_value("p.w1.w", Tensor::zeros(&[2, 2, 3, 3])).unwrap();
        store.set_value("p.wm1.w", Tensor::zeros(&[2, 2, 3, 3])).unwrap();
        let mut tape = Tape::new(Precision::F64);
        let levels = pyramid(&mut tape, 2, 8, 1);
        let out = p.forward(&mut tape, &store, &levels).unwrap();
        for (o, i) in out.iter().zip(&levels) {
            assert_eq!(tape.value(*o).data(), tape.value(*i).data());
        }
    }

    #[test]
    fn boundary_rules_drop_missing_neighbors() {
        // w0 = w1 = 0: bottom level sees nothing, top level sees only the
        // stride-2 conv of the level below it
        let p = PConvLayer::new("p", 2);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        p.init(&mut store, &mut rng).unwrap();
        store.set_value("p.w0.w", Tensor::zeros(&[2, 2, 3, 3])).unwrap();
        store.set_value("p.w0.b", Tensor::zeros(&[2])).unwrap();
        store.set_value("p.w1.w", Tensor::zeros(&[2, 2, 3, 3])).unwrap();
        let mut tape = Tape::new(Precision::F64);
        let levels = pyramid(&mut tape, 2, 8, 3);
        let out = p.forward(&mut tape, &store, &levels).unwrap();
        assert!(tape.value(out[0]).data().iter().all(|&v| v == 0.0));

        let wm1 = tape.param(&store, "p.wm1.w").unwrap();
        let expect = tape.conv2d(levels[1], wm1, None, 2, 1).unwrap();
        for (a, b) in tape.value(out[2]).data().iter().zip(tape.value(expect).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pconv_needs_two_levels() {
        let p = PConvLayer::new("p", 2);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        p.init(&mut store, &mut rng).unwrap();
        let mut tape = Tape::new(Precision::F64);
        let one = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
        assert!(matches!(
            p.forward(&mut tape, &store, &[one]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn weight_sharing_one_kernel_triple_per_layer() {
        let cfg = ModelConfig {
            fpn_width: 4,
            head_depth: 2,
            ..ModelConfig::tiny()
        };
        let head = Head::new("head", &cfg);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        head.init(&mut store, &mut rng).unwrap();
        for i in 0..2 {
            for suffix in ["w0.w", "w1.w", "wm1.w"] {
                let n = format!("head.pconv{}.{}", i, suffix);
                assert!(store.value(&n).is_ok(), "missing {}", n);
            }
        }
        // exactly 2 triples regardless of level count
        let pconv_kernels = store
            .names()
            .filter(|n| n.starts_with("head.pconv") && n.ends_with(".w"))
            .count();
        assert_eq!(pconv_kernels, 6);
    }

    #[test]
    fn head_output_shapes_and_positivity() {
        let cfg = ModelConfig {
            fpn_width: 4,
            head_depth: 2,
            num_classes: 3,
            ..ModelConfig::tiny()
        };
        let head = Head::new("head", &cfg);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        head.init(&mut store, &mut rng).unwrap();
        let mut tape = Tape::new(Precision::F64);
        let levels = pyramid(&mut tape, 4, 8, 7);
        let out = head
            .forward(&mut tape, &store, &PyramidLevels { levels })
            .unwrap();
        assert_eq!(tape.value(out.cls_logits[0]).shape(), &[1, 3, 8, 8]);
        assert_eq!(tape.value(out.ctr_logits[0]).shape(), &[1, 1, 8, 8]);
        assert_eq!(tape.value(out.reg_raw[0]).shape(), &[1, 4, 8, 8]);
        for l in 0..3 {
            assert!(tape.value(out.distances[l]).data().iter().all(|&d| d > 0.0));
        }
    }

    #[test]
    fn zero_tower_keeps_cls_bias() {
        let cfg = ModelConfig {
            fpn_width: 2,
            head_depth: 1,
            num_classes: 2,
            ..ModelConfig::tiny()
        };
        let head = Head::new("head", &cfg);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        head.init(&mut store, &mut rng).unwrap();
        for n in ["head.pconv0.w0.w", "head.pconv0.w1.w", "head.pconv0.wm1.w", "head.cls.w"] {
            let sh = store.value(n).unwrap().shape().to_vec();
            store.set_value(n, Tensor::zeros(&sh)).unwrap();
        }
        store.set_value("head.pconv0.w0.b", Tensor::zeros(&[2])).unwrap();
        store.set_value("head.cls.b", Tensor::from_vec(vec![1.5, -0.5])).unwrap();
        let mut tape = Tape::new(Precision::F64);
        let levels = pyramid(&mut tape, 2, 4, 9);
        let out = head
            .forward(&mut tape, &store, &PyramidLevels { levels })
            .unwrap();
        let v = tape.value(out.cls_logits[0]);
        let hw = 16;
        assert!(v.data()[..hw].iter().all(|&x| (x - 1.5).abs() < 1e-12));
        assert!(v.data()[hw..].iter().all(|&x| (x + 0.5).abs() < 1e-12));
    }

    #[test]
    fn mac_ratio_three_levels() {
        let r = mac_count(100, 100, 3, 64, 3).unwrap();
        assert!((r.ratio - 31.0 / 21.0).abs() < 0.01, "ratio {}", r.ratio);
    }

    #[test]
    fn mac_ratio_one_level_is_unity() {
        let r = mac_count(64, 64, 1, 16, 3).unwrap();
        assert_eq!(r.pconv_macs, r.ordinary_macs);
        assert_eq!(r.ratio, 1.0);
    }

    #[test]
    fn mac_ratio_approaches_three_halves_from_below() {
        let r3 = mac_count(128, 128, 3, 16, 3).unwrap();
        let r5 = mac_count(128, 128, 5, 16, 3).unwrap();
        assert!(r5.ratio > r3.ratio);
        assert!(r5.ratio < 1.5);
    }

    #[test]
    fn pconv_stack_gradcheck() {
        let cfg = ModelConfig {
            fpn_width: 2,
            head_depth: 2,
            num_classes: 2,
            ..ModelConfig::tiny()
        };
        let head = Head::new("head", &cfg);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        head.init(&mut store, &mut rng).unwrap();
        let mut inputs = Vec::new();
        let mut r2 = ChaCha8Rng::seed_from_u64(32);
        for &s in &[8usize, 4, 2] {
            inputs.push(
                Tensor::new(
                    vec![1, 2, s, s],
                    (0..2 * s * s).map(|_| r2.gen_range(0.2..1.2)).collect(),
                )
                .unwrap(),
            );
        }
        let err = gradcheck_params(
            |t, s| {
                let levels: Vec<Var> = inputs.iter().map(|i| t.leaf(i.clone(), false)).collect();
                let out = head.forward(t, s, &PyramidLevels { levels })?;
                let mut total = t.scalar(0.0);
                for l in 0..3 {
                    let a = t.mul(out.cls_logits[l], out.cls_logits[l])?;
                    let b = t.mul(out.ctr_logits[l], out.ctr_logits[l])?;
                    let c = t.mul(out.distances[l], out.distances[l])?;
                    let (sa, sb, sc) = (t.sum(a)?, t.sum(b)?, t.sum(c)?);
                    total = t.add(total, sa)?;
                    total = t.add(total, sb)?;
                    total = t.add(total, sc)?;
                }
                Ok(total)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "head gradcheck rel err {}", err);
    }
}
