//! Small layer builders: each layer owns its parameter names and knows how to
//! register initial values and how to run forward on a tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest divisor of `c` that is at most `cap`; used to pick a group size
/// that always divides the channel count.
pub fn group_count(channels: usize, target_group_size: usize) -> usize {
    let size = (1..=target_group_size.min(channels))
        .rev()
        .find(|s| channels % s == 0)
        .unwrap_or(1);
    channels / size
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2dLayer {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, ksize: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            ksize,
            stride,
            pad: ksize / 2,
            bias: true,
        }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    /// Kaiming-normal weights, zero bias.
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let fan_in = (self.in_ch * self.ksize * self.ksize) as f64;
        let std = (2.0 / fan_in).sqrt();
        self.init_with(store, rng, std, 0.0)
    }

    pub fn init_zero(&self, store: &mut ParamStore) -> Result<()> {
        store.register(
            &format!("{}.w", self.name),
            Tensor::zeros(&[self.out_ch, self.in_ch, self.ksize, self.ksize]),
        )?;
        if self.bias {
            store.register(&format!("{}.b", self.name), Tensor::zeros(&[self.out_ch]))?;
        }
        Ok(())
    }

    pub fn init_with(
        &self,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        weight_std: f64,
        bias_value: f64,
    ) -> Result<()> {
        let n = self.out_ch * self.in_ch * self.ksize * self.ksize;
        let data: Vec<f64> = (0..n).map(|_| sample_normal(rng) * weight_std).collect();
        store.register(
            &format!("{}.w", self.name),
            Tensor::new(vec![self.out_ch, self.in_ch, self.ksize, self.ksize], data)?,
        )?;
        if self.bias {
            store.register(
                &format!("{}.b", self.name),
                Tensor::full(&[self.out_ch], bias_value),
            )?;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &format!("{}.w", self.name))?;
        let b = if self.bias {
            Some(tape.param(store, &format!("{}.b", self.name))?)
        } else {
            None
        };
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNormLayer {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNormLayer {
    /// Group size min(8, channels), shrunk to the nearest divisor.
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            groups: group_count(channels, 8),
            eps: 1e-5,
        }
    }

    pub fn init(&self, store: &mut ParamStore, gamma: f64) -> Result<()> {
        store.register(
            &format!("{}.gamma", self.name),
            Tensor::full(&[self.channels], gamma),
        )?;
        store.register(&format!("{}.beta", self.name), Tensor::zeros(&[self.channels]))?;
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = tape.param(store, &format!("{}.gamma", self.name))?;
        let beta = tape.param(store, &format!("{}.beta", self.name))?;
        tape.group_norm(x, gamma, beta, self.groups, self.eps)
    }
}

/// Box-Muller standard normal draw.
fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
