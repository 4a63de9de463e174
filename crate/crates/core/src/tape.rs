//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! Every forward primitive appends one node; `backward` walks the nodes in
//! exact reverse execution order and accumulates gradients additively. Vars
//! are indices into the tape, so a forward+backward episode owns its tape and
//! the value tensors stay immutable.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Compute precision. `F32` rounds every op output through `f32`; gradient
/// tolerance claims only hold in `F64`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug)]
pub(crate) enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Atan,
    Neg,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[allow(dead_code)] // some variants keep inputs only for introspection
pub(crate) enum Op {
    Leaf,
    Unary(UnaryKind, Var),
    Binary(BinaryKind, Var, Var),
    AddConst(Var, f64),
    MulConst(Var, f64),
    PowConst(Var, f64),
    Clamp(Var, f64, f64),
    Reshape(Var),
    Detach(Var),
    Sum(Var),
    Mean(Var),
    /// [N,C,H,W] -> [N,C,1,1] sum over spatial positions.
    SumSpatial(Var),
    /// x [N,C,H,W] + v [N,C,1,1], broadcast over spatial positions.
    BroadcastAddChannel(Var, Var),
    /// attn [N,1,H,W] * x [N,C,H,W], broadcast over channels.
    MulAttn(Var, Var),
    Gather(Var, Arc<Vec<usize>>),
    Concat(Vec<Var>),
    /// x * s where s is a 1-element var (learnable scalar).
    MulScalarVar(Var, Var),
    Softmax(Var, usize),
    /// Normalizes each sample (axis 0 slice) as a single group; gamma/beta
    /// have the suffix length or are 1-element broadcasts.
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    /// Elementwise binary cross entropy on logits against constant targets.
    BceWithLogits(Var, Tensor),
}

pub(crate) struct Node {
    pub op: Op,
    pub value: Tensor,
    pub requires_grad: bool,
    pub param: Option<String>,
}

pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Per-node gradients produced by one backward pass.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, numel: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; numel])
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, mut data: Vec<f64>, requires_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        let value = Tensor::new(shape, data).expect("internal shape/data mismatch");
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(Op::Leaf, shape, t.data().to_vec(), requires_grad)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf bound to a named parameter; `ParamStore::accumulate` routes the
    /// gradient back by this name.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        let v = self.leaf(value, true);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    /// All parameter leaves on this tape, in execution order.
    pub fn param_vars(&self) -> Vec<(Var, &str)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.as_deref().map(|name| (Var(i), name)))
            .collect()
    }

    // ---- elementwise ----

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let shape = xt.shape().to_vec();
        let mut out = Vec::with_capacity(xt.numel());
        for &v in xt.data() {
            let y = match kind {
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => {
                    if v <= 0.0 {
                        return Err(Error::Numeric(format!("log of non-positive value {}", v)));
                    }
                    v.ln()
                }
                UnaryKind::Sqrt => {
                    if v < 0.0 {
                        return Err(Error::Numeric(format!("sqrt of negative value {}", v)));
                    }
                    v.sqrt()
                }
                UnaryKind::Atan => v.atan(),
                UnaryKind::Neg => -v,
            };
            out.push(y);
        }
        let rg = self.requires(x);
        Ok(self.push(Op::Unary(kind, x), shape, out, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }
    pub fn atan(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Atan, x)
    }
    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::Shape(format!(
                "elementwise {:?} on mismatched shapes {:?} / {:?}",
                kind,
                at.shape(),
                bt.shape()
            )));
        }
        let shape = at.shape().to_vec();
        let out: Vec<f64> = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(&l, &r)| match kind {
                BinaryKind::Add => l + r,
                BinaryKind::Sub => l - r,
                BinaryKind::Mul => l * r,
                BinaryKind::Div => l / r,
                BinaryKind::Min => l.min(r),
                BinaryKind::Max => l.max(r),
            })
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Binary(kind, a, b), shape, out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Min, a, b)
    }
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Max, a, b)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let xt = self.value(x);
        let shape = xt.shape().to_vec();
        let out: Vec<f64> = xt.data().iter().map(|&v| v + c).collect();
        let rg = self.requires(x);
        Ok(self.push(Op::AddConst(x, c), shape, out, rg))
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let xt = self.value(x);
        let shape = xt.shape().to_vec();
        let out: Vec<f64> = xt.data().iter().map(|&v| v * c).collect();
        let rg = self.requires(x);
        Ok(self.push(Op::MulConst(x, c), shape, out, rg))
    }

    /// Elementwise x^e with gradient e * x^(e-1).
    pub fn pow_const(&mut self, x: Var, e: f64) -> Result<Var> {
        let xt = self.value(x);
        let shape = xt.shape().to_vec();
        let out: Vec<f64> = xt.data().iter().map(|&v| v.powf(e)).collect();
        for &v in &out {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("pow_const({}) produced {}", e, v)));
            }
        }
        let rg = self.requires(x);
        Ok(self.push(Op::PowConst(x, e), shape, out, rg))
    }

    /// Clamp with pass-through gradient inside [lo, hi].
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let xt = self.value(x);
        let shape = xt.shape().to_vec();
        let out: Vec<f64> = xt.data().iter().map(|&v| v.clamp(lo, hi)).collect();
        let rg = self.requires(x);
        Ok(self.push(Op::Clamp(x, lo, hi), shape, out, rg))
    }

    // ---- structural ----

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xt = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != xt.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?}",
                xt.shape(),
                shape
            )));
        }
        let data = xt.data().to_vec();
        let rg = self.requires(x);
        Ok(self.push(Op::Reshape(x), shape, data, rg))
    }

    /// Forward identity, backward zero.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let shape = xt.shape().to_vec();
        let data = xt.data().to_vec();
        Ok(self.push(Op::Detach(x), shape, data, false))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum::<f64>();
        let rg = self.requires(x);
        Ok(self.push(Op::Sum(x), vec![1], vec![s], rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.numel() == 0 {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let s = xt.data().iter().sum::<f64>() / xt.numel() as f64;
        let rg = self.requires(x);
        Ok(self.push(Op::Mean(x), vec![1], vec![s], rg))
    }

    pub fn sum_spatial(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let sh = xt.shape();
        if sh.len() != 4 {
            return Err(Error::Shape(format!("sum_spatial expects 4-d, got {:?}", sh)));
        }
        let (n, c, hw) = (sh[0], sh[1], sh[2] * sh[3]);
        let mut out = vec![0.0; n * c];
        for p in 0..n * c {
            out[p] = xt.data()[p * hw..(p + 1) * hw].iter().sum();
        }
        let rg = self.requires(x);
        Ok(self.push(Op::SumSpatial(x), vec![n, c, 1, 1], out, rg))
    }

    pub fn broadcast_add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xt, vt) = (self.value(x), self.value(v));
        let sh = xt.shape();
        if sh.len() != 4 || vt.shape() != [sh[0], sh[1], 1, 1] {
            return Err(Error::Shape(format!(
                "broadcast_add_channel: x {:?}, v {:?}",
                sh,
                vt.shape()
            )));
        }
        let (n, c, hw) = (sh[0], sh[1], sh[2] * sh[3]);
        let mut out = Vec::with_capacity(xt.numel());
        for p in 0..n * c {
            let add = vt.data()[p];
            out.extend(xt.data()[p * hw..(p + 1) * hw].iter().map(|&u| u + add));
        }
        let rg = self.requires(x) || self.requires(v);
        Ok(self.push(Op::BroadcastAddChannel(x, v), sh.to_vec(), out, rg))
    }

    pub fn mul_attn(&mut self, attn: Var, x: Var) -> Result<Var> {
        let (at, xt) = (self.value(attn), self.value(x));
        let sh = xt.shape();
        if sh.len() != 4 || at.shape() != [sh[0], 1, sh[2], sh[3]] {
            return Err(Error::Shape(format!(
                "mul_attn: attn {:?}, x {:?}",
                at.shape(),
                sh
            )));
        }
        let (n, c, hw) = (sh[0], sh[1], sh[2] * sh[3]);
        let mut out = Vec::with_capacity(xt.numel());
        for b in 0..n {
            let ap = &at.data()[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let xp = &xt.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                out.extend(xp.iter().zip(ap).map(|(&u, &a)| u * a));
            }
        }
        let rg = self.requires(attn) || self.requires(x);
        Ok(self.push(Op::MulAttn(attn, x), sh.to_vec(), out, rg))
    }

    /// Select flat indices into a 1-d output.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let xt = self.value(x);
        let mut out = Vec::with_capacity(indices.len());
        for &i in &indices {
            if i >= xt.numel() {
                return Err(Error::Shape(format!(
                    "gather index {} out of bounds for {} elements",
                    i,
                    xt.numel()
                )));
            }
            out.push(xt.data()[i]);
        }
        let len = indices.len();
        let rg = self.requires(x);
        Ok(self.push(Op::Gather(x, Arc::new(indices)), vec![len], out, rg))
    }

    /// Concatenate 1-d tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let mut out = Vec::new();
        let mut rg = false;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 1 {
                return Err(Error::Shape("concat expects 1-d tensors".into()));
            }
            out.extend_from_slice(t.data());
            rg |= self.requires(p);
        }
        let len = out.len();
        Ok(self.push(Op::Concat(parts.to_vec()), vec![len], out, rg))
    }

    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let st = self.value(s);
        if st.numel() != 1 {
            return Err(Error::Shape("mul_scalar_var: scale must be 1-element".into()));
        }
        let sv = st.data()[0];
        let xt = self.value(x);
        let shape = xt.shape().to_vec();
        let out: Vec<f64> = xt.data().iter().map(|&v| v * sv).collect();
        let rg = self.requires(x) || self.requires(s);
        Ok(self.push(Op::MulScalarVar(x, s), shape, out, rg))
    }

    // ---- neural net primitives ----

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xt = self.value(x);
        if axis >= xt.shape().len() {
            return Err(Error::Shape(format!(
                "softmax axis {} invalid for shape {:?}",
                axis,
                xt.shape()
            )));
        }
        let shape = xt.shape().to_vec();
        let out = kernels::softmax_forward(xt.data(), &shape, axis);
        let rg = self.requires(x);
        Ok(self.push(Op::Softmax(x, axis), shape, out, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let xt = self.value(x);
        let sh = xt.shape().to_vec();
        // Rank-1 input is one sample; otherwise axis 0 is the batch axis and
        // each sample normalizes as a single group over the remaining axes.
        let (n, suffix) = layer_norm_split(&sh, xt.numel());
        let glen = self.value(gamma).numel();
        let blen = self.value(beta).numel();
        if (glen != suffix && glen != 1) || (blen != suffix && blen != 1) {
            return Err(Error::Shape(format!(
                "layer_norm affine params must have length {} or 1, got {}/{}",
                suffix, glen, blen
            )));
        }
        let gex = expand_affine(self.value(gamma).data(), suffix);
        let bex = expand_affine(self.value(beta).data(), suffix);
        let out = kernels::groupnorm_forward(xt.data(), &gex, &bex, n, suffix, 1, 1, eps);
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, sh, out, rg))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let xt = self.value(x);
        let sh = xt.shape().to_vec();
        if sh.len() != 4 {
            return Err(Error::Shape(format!("group_norm expects 4-d, got {:?}", sh)));
        }
        let (n, c, sp) = (sh[0], sh[1], sh[2] * sh[3]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {} channels not divisible by {} groups",
                c, groups
            )));
        }
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape("group_norm affine params must have length C".into()));
        }
        let out = kernels::groupnorm_forward(
            xt.data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            c,
            sp,
            groups,
            eps,
        );
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(Op::GroupNorm { x, gamma, beta, groups, eps }, sh, out, rg))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let d = kernels::conv_dims(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        if let Some(bv) = b {
            if self.value(bv).shape() != [d.k] {
                return Err(Error::Shape(format!(
                    "conv2d bias must be [{}], got {:?}",
                    d.k,
                    self.value(bv).shape()
                )));
            }
        }
        self.value(x).check_finite("conv2d input")?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|bv| self.value(bv).data()),
            &d,
        );
        let rg = self.requires(x)
            || self.requires(w)
            || b.map(|bv| self.requires(bv)).unwrap_or(false);
        Ok(self.push(
            Op::Conv2d { x, w, b, stride, pad },
            vec![d.n, d.k, d.oh, d.ow],
            out,
            rg,
        ))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let sh = xt.shape();
        if sh.len() != 4 || sh[2] == 0 || sh[3] == 0 {
            return Err(Error::Shape(format!("upsample2x expects 4-d nonempty, got {:?}", sh)));
        }
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let out = kernels::upsample2x_forward(xt.data(), n, c, h, w);
        let rg = self.requires(x);
        Ok(self.push(Op::Upsample2x(x), vec![n, c, 2 * h, 2 * w], out, rg))
    }

    /// Per-element BCE on logits z against constant targets t in [0,1]:
    /// max(z,0) - z t + ln(1 + e^{-|z|}), gradient sigmoid(z) - t.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let lt = self.value(logits);
        if lt.shape() != targets.shape() {
            return Err(Error::Shape(format!(
                "bce_with_logits: logits {:?} vs targets {:?}",
                lt.shape(),
                targets.shape()
            )));
        }
        for &t in targets.data() {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Input(format!("bce target {} outside [0,1]", t)));
            }
        }
        let shape = lt.shape().to_vec();
        let out: Vec<f64> = lt
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln())
            .collect();
        let rg = self.requires(logits);
        Ok(self.push(Op::BceWithLogits(logits, targets), shape, out, rg))
    }

    // ---- backward ----

    /// Reverse pass from a finite scalar loss. Returns per-node gradients;
    /// use [`ParamStore::accumulate`] to route them into named parameters.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !lt.data()[0].is_finite() {
            return Err(Error::Numeric(format!("loss is not finite: {}", lt.data()[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let (front, back) = grads.split_at_mut(i);
            let dy = back[0].as_ref().expect("checked above");
            let node = &self.nodes[i];
            self.backprop_node(node, dy, front)?;
        }
        Ok(Grads { grads })
    }

    fn backprop_node(
        &self,
        node: &Node,
        dy: &[f64],
        front: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let val = |v: Var| self.value(v);
        let need = |v: Var| self.requires(v);
        match &node.op {
            Op::Leaf => {}
            Op::Detach(_) => {}
            Op::Unary(kind, x) => {
                if need(*x) {
                    let xd = val(*x).data();
                    let yd = node.value.data();
                    let g = accumulate(&mut front[x.0], xd.len());
                    for j in 0..xd.len() {
                        let d = match kind {
                            UnaryKind::Relu => {
                                if xd[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Sigmoid => yd[j] * (1.0 - yd[j]),
                            UnaryKind::Exp => yd[j],
                            UnaryKind::Log => 1.0 / xd[j],
                            UnaryKind::Sqrt => 0.5 / yd[j],
                            UnaryKind::Atan => 1.0 / (1.0 + xd[j] * xd[j]),
                            UnaryKind::Neg => -1.0,
                        };
                        g[j] += dy[j] * d;
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if need(*a) {
                    let g = accumulate(&mut front[a.0], ad.len());
                    for j in 0..ad.len() {
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => 1.0,
                            BinaryKind::Mul => bd[j],
                            BinaryKind::Div => 1.0 / bd[j],
                            BinaryKind::Min => {
                                if ad[j] <= bd[j] {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            BinaryKind::Max => {
                                if ad[j] >= bd[j] {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        g[j] += dy[j] * d;
                    }
                }
                if need(*b) {
                    let g = accumulate(&mut front[b.0], bd.len());
                    for j in 0..bd.len() {
                        let d = match kind {
                            BinaryKind::Add => 1.0,
                            BinaryKind::Sub => -1.0,
                            BinaryKind::Mul => ad[j],
                            BinaryKind::Div => -ad[j] / (bd[j] * bd[j]),
                            BinaryKind::Min => {
                                if ad[j] <= bd[j] {
                                    0.0
                                } else {
                                    1.0
                                }
                            }
                            BinaryKind::Max => {
                                if ad[j] >= bd[j] {
                                    0.0
                                } else {
                                    1.0
                                }
                            }
                        };
                        g[j] += dy[j] * d;
                    }
                }
            }
            Op::AddConst(x, _) => {
                if need(*x) {
                    let g = accumulate(&mut front[x.0], dy.len());
                    for j in 0..dy.len() {
                        g[j] += dy[j];
                    }
                }
            }
            Op::MulConst(x, c) => {
                if need(*x) {
                    let g = accumulate(&mut front[x.0], dy.len());
                    for j in 0..dy.len() {
                        g[j] += dy[j] * c;
                    }
                }
            }
            Op::PowConst(x, e) => {
                if need(*x) {
                    let xd = val(*x).data();
                    let g = accumulate(&mut front[x.0], xd.len());
                    for j in 0..xd.len() {
                        g[j] += dy[j] * e * xd[j].powf(e - 1.0);
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                if need(*x) {
                    let xd = val(*x).data();
                    let g = accumulate(&mut front[x.0], xd.len());
                    for j in 0..xd.len() {
                        if xd[j] >= *lo && xd[j] <= *hi {
                            g[j] += dy[j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if need(*x) {
                    let g = accumulate(&mut front[x.0], dy.len());
                    for j in 0..dy.len() {
                        g[j] += dy[j];
                    }
                }
            }
            Op::Sum(x) => {
                if need(*x) {
                    let n = val(*x).numel();
                    let g = accumulate(&mut front[x.0], n);
                    for gj in g.iter_mut() {
                        *gj += dy[0];
                    }
                }
            }
            Op::Mean(x) => {
                if need(*x) {
                    let n = val(*x).numel();
                    let g = accumulate(&mut front[x.0], n);
                    let d = dy[0] / n as f64;
                    for gj in g.iter_mut() {
                        *gj += d;
                    }
                }
            }
            Op::SumSpatial(x) => {
                if need(*x) {
                    let sh = val(*x).shape();
                    let (nc, hw) = (sh[0] * sh[1], sh[2] * sh[3]);
                    let g = accumulate(&mut front[x.0], nc * hw);
                    for p in 0..nc {
                        for j in 0..hw {
                            g[p * hw + j] += dy[p];
                        }
                    }
                }
            }
            Op::BroadcastAddChannel(x, v) => {
                let sh = val(*x).shape();
                let (nc, hw) = (sh[0] * sh[1], sh[2] * sh[3]);
                if need(*x) {
                    let g = accumulate(&mut front[x.0], nc * hw);
                    for j in 0..nc * hw {
                        g[j] += dy[j];
                    }
                }
                if need(*v) {
                    let g = accumulate(&mut front[v.0], nc);
                    for p in 0..nc {
                        g[p] += dy[p * hw..(p + 1) * hw].iter().sum::<f64>();
                    }
                }
            }
            Op::MulAttn(attn, x) => {
                let sh = val(*x).shape();
                let (n, c, hw) = (sh[0], sh[1], sh[2] * sh[3]);
                let (ad, xd) = (val(*attn).data(), val(*x).data());
                if need(*x) {
                    let g = accumulate(&mut front[x.0], xd.len());
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for j in 0..hw {
                                g[base + j] += dy[base + j] * ad[b * hw + j];
                            }
                        }
                    }
                }
                if need(*attn) {
                    let g = accumulate(&mut front[attn.0], n * hw);
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for j in 0..hw {
                                g[b * hw + j] += dy[base + j] * xd[base + j];
                            }
                        }
                    }
                }
            }
            Op::Gather(x, indices) => {
                if need(*x) {
                    let n = val(*x).numel();
                    let g = accumulate(&mut front[x.0], n);
                    for (j, &i) in indices.iter().enumerate() {
                        g[i] += dy[j];
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if need(p) {
                        let g = accumulate(&mut front[p.0], n);
                        for j in 0..n {
                            g[j] += dy[off + j];
                        }
                    }
                    off += n;
                }
            }
            Op::MulScalarVar(x, s) => {
                let sv = val(*s).data()[0];
                let xd = val(*x).data();
                if need(*x) {
                    let g = accumulate(&mut front[x.0], xd.len());
                    for j in 0..xd.len() {
                        g[j] += dy[j] * sv;
                    }
                }
                if need(*s) {
                    let g = accumulate(&mut front[s.0], 1);
                    g[0] += dy.iter().zip(xd).map(|(&d, &v)| d * v).sum::<f64>();
                }
            }
            Op::Softmax(x, axis) => {
                if need(*x) {
                    let y = node.value.data();
                    let dx = kernels::softmax_backward(y, dy, node.value.shape(), *axis);
                    let g = accumulate(&mut front[x.0], dx.len());
                    for j in 0..dx.len() {
                        g[j] += dx[j];
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xt = val(*x);
                let (n, suffix) = layer_norm_split(xt.shape(), xt.numel());
                let gex = expand_affine(val(*gamma).data(), suffix);
                let (dx, dgamma, dbeta) = kernels::groupnorm_backward(
                    xt.data(),
                    &gex,
                    dy,
                    n,
                    suffix,
                    1,
                    1,
                    *eps,
                );
                if need(*x) {
                    let g = accumulate(&mut front[x.0], dx.len());
                    for j in 0..dx.len() {
                        g[j] += dx[j];
                    }
                }
                if need(*gamma) {
                    let glen = val(*gamma).numel();
                    let g = accumulate(&mut front[gamma.0], glen);
                    collapse_affine(&dgamma, g);
                }
                if need(*beta) {
                    let blen = val(*beta).numel();
                    let g = accumulate(&mut front[beta.0], blen);
                    collapse_affine(&dbeta, g);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, eps } => {
                let xt = val(*x);
                let sh = xt.shape();
                let (n, c, sp) = (sh[0], sh[1], sh[2] * sh[3]);
                let (dx, dgamma, dbeta) = kernels::groupnorm_backward(
                    xt.data(),
                    val(*gamma).data(),
                    dy,
                    n,
                    c,
                    sp,
                    *groups,
                    *eps,
                );
                if need(*x) {
                    let g = accumulate(&mut front[x.0], dx.len());
                    for j in 0..dx.len() {
                        g[j] += dx[j];
                    }
                }
                if need(*gamma) {
                    let g = accumulate(&mut front[gamma.0], c);
                    for j in 0..c {
                        g[j] += dgamma[j];
                    }
                }
                if need(*beta) {
                    let g = accumulate(&mut front[beta.0], c);
                    for j in 0..c {
                        g[j] += dbeta[j];
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let d = kernels::conv_dims(val(*x).shape(), val(*w).shape(), *stride, *pad)
                    .expect("validated at forward");
                let (dx, dw, db) = kernels::conv2d_backward(val(*x).data(), val(*w).data(), dy, &d);
                if need(*x) {
                    let g = accumulate(&mut front[x.0], dx.len());
                    for j in 0..dx.len() {
                        g[j] += dx[j];
                    }
                }
                if need(*w) {
                    let g = accumulate(&mut front[w.0], dw.len());
                    for j in 0..dw.len() {
                        g[j] += dw[j];
                    }
                }
                if let Some(bv) = b {
                    if need(*bv) {
                        let g = accumulate(&mut front[bv.0], db.len());
                        for j in 0..db.len() {
                            g[j] += db[j];
                        }
                    }
                }
            }
            Op::Upsample2x(x) => {
                if need(*x) {
                    let sh = val(*x).shape();
                    let dx = kernels::upsample2x_backward(dy, sh[0], sh[1], sh[2], sh[3]);
                    let g = accumulate(&mut front[x.0], dx.len());
                    for j in 0..dx.len() {
                        g[j] += dx[j];
                    }
                }
            }
            Op::BceWithLogits(logits, targets) => {
                if need(*logits) {
                    let zd = val(*logits).data();
                    let g = accumulate(&mut front[logits.0], zd.len());
                    for j in 0..zd.len() {
                        let p = 1.0 / (1.0 + (-zd[j]).exp());
                        g[j] += dy[j] * (p - targets.data()[j]);
                    }
                }
            }
        }
        Ok(())
    }
}

fn layer_norm_split(shape: &[usize], numel: usize) -> (usize, usize) {
    if shape.len() <= 1 {
        (1, numel)
    } else {
        (shape[0], numel / shape[0])
    }
}

fn expand_affine(v: &[f64], len: usize) -> Vec<f64> {
    if v.len() == len {
        v.to_vec()
    } else {
        vec![v[0]; len]
    }
}


fn collapse_affine(full: &[f64], out: &mut [f64]) {
    if out.len() == full.len() {
        for (o, f) in out.iter_mut().zip(full) {
            *o += f;
        }
    } else {
        out[0] += full.iter().sum::<f64>();
    }
}
