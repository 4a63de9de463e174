//! Small residual backbone producing C3/C4/C5 feature maps at strides
//! 8/16/32: a stride-4 stem followed by one residual stage per level.
//! Residual blocks start as identities (last normalization scale zero).

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{Conv2dLayer, GroupNormLayer};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// C3/C4/C5 at strides 8/16/32.
pub struct FeatureLevels {
    pub c3: Var,
    pub c4: Var,
    pub c5: Var,
}

impl FeatureLevels {
    pub fn as_array(&self) -> [Var; 3] {
        [self.c3, self.c4, self.c5]
    }
}

struct ResidualBlock {
    conv1: Conv2dLayer,
    gn1: GroupNormLayer,
    conv2: Conv2dLayer,
    gn2: GroupNormLayer,
    proj: Option<(Conv2dLayer, GroupNormLayer)>,
}

impl ResidualBlock {
    fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let proj = if stride != 1 || in_ch != out_ch {
            Some((
                Conv2dLayer::new(format!("{}.proj", name), in_ch, out_ch, 1, stride).no_bias(),
                GroupNormLayer::new(format!("{}.projn", name), out_ch),
            ))
        } else {
            None
        };
        Self {
            conv1: Conv2dLayer::new(format!("{}.conv1", name), in_ch, out_ch, 3, stride).no_bias(),
            gn1: GroupNormLayer::new(format!("{}.gn1", name), out_ch),
            conv2: Conv2dLayer::new(format!("{}.conv2", name), out_ch, out_ch, 3, 1).no_bias(),
            gn2: GroupNormLayer::new(format!("{}.gn2", name), out_ch),
            proj,
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.conv1.init(store, rng)?;
        self.gn1.init(store, 1.0)?;
        self.conv2.init(store, rng)?;
        // zero scale: the block starts as an identity on its skip path
        self.gn2.init(store, 0.0)?;
        if let Some((conv, gn)) = &self.proj {
            conv.init(store, rng)?;
            gn.init(store, 1.0)?;
        }
        Ok(())
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let skip = match &self.proj {
            Some((conv, gn)) => {
                let p = conv.forward(tape, store, x)?;
                gn.forward(tape, store, p)?
            }
            None => x,
        };
        let h = self.conv1.forward(tape, store, x)?;
        let h = self.gn1.forward(tape, store, h)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, store, h)?;
        let h = self.gn2.forward(tape, store, h)?;
        let s = tape.add(skip, h)?;
        tape.relu(s)
    }
}

pub struct Backbone {
    stem1: Conv2dLayer,
    stem1n: GroupNormLayer,
    stem2: Conv2dLayer,
    stem2n: GroupNormLayer,
    stages: Vec<Vec<ResidualBlock>>,
}

impl Backbone {
    pub fn new(cfg: &ModelConfig) -> Self {
        let sw = cfg.stem_width;
        let mut stages = Vec::new();
        let mut in_ch = sw;
        for (si, &width) in cfg.backbone_widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..cfg.blocks_per_stage {
                let stride = if bi == 0 { 2 } else { 1 };
                let ic = if bi == 0 { in_ch } else { width };
                blocks.push(ResidualBlock::new(
                    &format!("backbone.stage{}.block{}", si + 3, bi),
                    ic,
                    width,
                    stride,
                ));
            }
            in_ch = width;
            stages.push(blocks);
        }
        Self {
            stem1: Conv2dLayer::new("backbone.stem1", 3, sw, 3, 2).no_bias(),
            stem1n: GroupNormLayer::new("backbone.stem1n", sw),
            stem2: Conv2dLayer::new("backbone.stem2", sw, sw, 3, 2).no_bias(),
            stem2n: GroupNormLayer::new("backbone.stem2n", sw),
            stages,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.stem1.init(store, rng)?;
        self.stem1n.init(store, 1.0)?;
        self.stem2.init(store, rng)?;
        self.stem2n.init(store, 1.0)?;
        for stage in &self.stages {
            for block in stage {
                block.init(store, rng)?;
            }
        }
        Ok(())
    }

    /// Image [N,3,H,W] with H, W multiples of 32 -> C3/C4/C5.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<FeatureLevels> {
        let sh = tape.value(image).shape().to_vec();
        if sh.len() != 4 || sh[1] != 3 {
            return Err(Error::Shape(format!("backbone expects [N,3,H,W], got {:?}", sh)));
        }
        if sh[2] % 32 != 0 || sh[3] % 32 != 0 {
            return Err(Error::Shape(format!(
                "backbone input spatial size {}x{} must be a multiple of 32",
                sh[2], sh[3]
            )));
        }
        let h = self.stem1.forward(tape, store, image)?;
        let h = self.stem1n.forward(tape, store, h)?;
        let h = tape.relu(h)?;
        let h = self.stem2.forward(tape, store, h)?;
        let h = self.stem2n.forward(tape, store, h)?;
        let mut h = tape.relu(h)?;

        let mut outs = Vec::with_capacity(3);
        for stage in &self.stages {
            for block in stage {
                h = block.forward(tape, store, h)?;
            }
            outs.push(h);
        }
        Ok(FeatureLevels {
            c3: outs[0],
            c4: outs[1],
            c5: outs[2],
        })
    }
}
