//! Global-context attention block: softmax-weighted global pooling over
//! spatial positions, a bottleneck transform (1x1 conv, layer norm, relu,
//! 1x1 conv), and an element-wise fusion back onto every position. The
//! fusion conv starts at zero so the block begins as an identity.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::Conv2dLayer;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub struct GcBlock {
    pub name: String,
    pub channels: usize,
    pub ratio: usize,
    wk: Conv2dLayer,
    wv1: Conv2dLayer,
    wv2: Conv2dLayer,
}

/// Forward products kept around for inspection in tests.
pub struct GcForward {
    pub out: Var,
    /// Attention weights [N,1,H,W]; nonnegative, summing to 1 per sample.
    pub attn: Var,
    /// Spatially uniform additive update [N,C,1,1].
    pub update: Var,
}

impl GcBlock {
    pub fn new(name: impl Into<String>, channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || channels % ratio != 0 {
            return Err(Error::Config(format!(
                "gc ratio {} must divide channel count {}",
                ratio, channels
            )));
        }
        let name = name.into();
        let mid = channels / ratio;
        Ok(Self {
            wk: Conv2dLayer::new(format!("{}.wk", name), channels, 1, 1, 1),
            wv1: Conv2dLayer::new(format!("{}.wv1", name), channels, mid, 1, 1),
            wv2: Conv2dLayer::new(format!("{}.wv2", name), mid, channels, 1, 1),
            name,
            channels,
            ratio,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let mid = self.channels / self.ratio;
        self.wk.init(store, rng)?;
        self.wv1.init(store, rng)?;
        // zero fusion conv: the block starts as an identity
        self.wv2.init_zero(store)?;
        store.register(&format!("{}.ln.gamma", self.name), Tensor::full(&[mid], 1.0))?;
        store.register(&format!("{}.ln.beta", self.name), Tensor::zeros(&[mid]))?;
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.forward_detailed(tape, store, x)?.out)
    }

    pub fn forward_detailed(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<GcForward> {
        let sh = tape.value(x).shape().to_vec();
        if sh.len() != 4 || sh[1] != self.channels {
            return Err(Error::Shape(format!(
                "gc block expects [N,{},H,W], got {:?}",
                self.channels, sh
            )));
        }
        let (n, h, w) = (sh[0], sh[2], sh[3]);

        // attention logits over spatial positions, softmax across H*W
        let logits = self.wk.forward(tape, store, x)?;
        let flat = tape.reshape(logits, vec![n, h * w])?;
        let alpha_flat = tape.softmax(flat, 1)?;
        let attn = tape.reshape(alpha_flat, vec![n, 1, h, w])?;

        // context[n,c] = sum_j alpha[n,j] * x[n,c,j]
        let weighted = tape.mul_attn(attn, x)?;
        let context = tape.sum_spatial(weighted)?;

        // bottleneck transform on the [N, C/r, 1, 1] context vector
        let t1 = self.wv1.forward(tape, store, context)?;
        let gamma = tape.param(store, &format!("{}.ln.gamma", self.name))?;
        let beta = tape.param(store, &format!("{}.ln.beta", self.name))?;
        let normed = tape.layer_norm(t1, gamma, beta, 1e-5)?;
        let act = tape.relu(normed)?;
        let update = self.wv2.forward(tape, store, act)?;

        let out = tape.broadcast_add_channel(x, update)?;
        Ok(GcForward { out, attn, update })
    }
}
