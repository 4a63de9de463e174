//! Feature pyramid: 1x1 laterals onto a common width, top-down 2x
//! upsample-and-add, then an optional 3x3 smoothing conv per level.
//! Only P3-P5 are built.

use rand_chacha::ChaCha8Rng;

use crate::backbone::FeatureLevels;
use crate::error::{Error, Result};
use crate::layers::Conv2dLayer;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// P3/P4/P5 at a shared channel width, finest first.
pub struct PyramidLevels {
    pub levels: Vec<Var>,
}

pub struct Fpn {
    laterals: Vec<Conv2dLayer>,
    outputs: Option<Vec<Conv2dLayer>>,
}

impl Fpn {
    pub fn new(name: &str, in_widths: [usize; 3], width: usize, smoothing: bool) -> Self {
        let laterals = (0..3)
            .map(|i| Conv2dLayer::new(format!("{}.lat{}", name, i + 3), in_widths[i], width, 1, 1))
            .collect();
        let outputs = smoothing.then(|| {
            (0..3)
                .map(|i| Conv2dLayer::new(format!("{}.out{}", name, i + 3), width, width, 3, 1))
                .collect()
        });
        Self { laterals, outputs }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for l in &self.laterals {
            l.init(store, rng)?;
        }
        if let Some(outs) = &self.outputs {
            for o in outs {
                o.init(store, rng)?;
            }
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, levels: &FeatureLevels) -> Result<PyramidLevels> {
        let cs = levels.as_array();
        for i in 0..2 {
            let fine = tape.value(cs[i]).shape().to_vec();
            let coarse = tape.value(cs[i + 1]).shape().to_vec();
            if fine[2] != 2 * coarse[2] || fine[3] != 2 * coarse[3] {
                return Err(Error::Shape(format!(
                    "fpn levels must be in exact 2x relation, got {:?} vs {:?}",
                    fine, coarse
                )));
            }
        }
        let lat: Vec<Var> = (0..3)
            .map(|i| self.laterals[i].forward(tape, store, cs[i]))
            .collect::<Result<_>>()?;

        // top-down merge on pre-smoothing maps
        let m5 = lat[2];
        let up5 = tape.upsample2x(m5)?;
        let m4 = tape.add(lat[1], up5)?;
        let up4 = tape.upsample2x(m4)?;
        let m3 = tape.add(lat[0], up4)?;

        let merged = [m3, m4, m5];
        let out = match &self.outputs {
            Some(outs) => (0..3)
                .map(|i| outs[i].forward(tape, store, merged[i]))
                .collect::<Result<_>>()?,
            None => merged.to_vec(),
        };
        Ok(PyramidLevels { levels: out })
    }
}
