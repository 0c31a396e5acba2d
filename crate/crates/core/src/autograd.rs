//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass together with its
//! output. [`Graph::backward`] walks the tape in reverse and returns the
//! gradients of all trainable parameters that took part. Quantizers are
//! differentiated with straight-through rules; in surrogate mode they are
//! replaced by the continuous functions those rules differentiate exactly,
//! which is what finite-difference checks compare against.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::activation::{hwmsb_gradient, hwmsb_scalar, hwmsb_surrogate};
use crate::error::{Error, Result};
use crate::norm::{batch_norm_backward, batch_norm_train, BatchStats};
use crate::ops::{
    conv2d_backward_raw, conv2d_raw, conv_transpose2d_backward_raw, conv_transpose2d_raw, dense_backward_raw,
    dense_raw, maxpool2_raw, ConvGeom, ConvTransposeGeom,
};
use crate::quant::{heaviside_scalar, sign_scalar, ste_gate, WeightQuantizer};
use crate::tensor::Tensor;

/// Handle of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId {
    pub store: u32,
    pub index: usize,
}

/// Named trainable tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    tag: u32,
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new(tag: u32) -> Self {
        ParamStore {
            tag,
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn tag(&self) -> u32 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId {
            store: self.tag,
            index: self.values.len() - 1,
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        debug_assert_eq!(id.store, self.tag);
        &self.values[id.index]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        debug_assert_eq!(id.store, self.tag);
        &mut self.values[id.index]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.index]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(|index| ParamId { store: self.tag, index })
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(|index| ParamId { store: self.tag, index })
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.map.iter()
    }

    fn accumulate(&mut self, id: ParamId, g: Tensor) {
        match self.map.get_mut(&id) {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                self.map.insert(id, g);
            }
        }
    }
}

/// Node handle on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActKind {
    /// `±1` with `sign(0) = +1`.
    Sign,
    /// `{0, 1}` with `h(0) = 0`.
    Heaviside,
    /// HWMSB as its integer code `0..=3` (the value times three).
    HwmsbCode,
    Relu,
}

impl ActKind {
    fn forward(self, x: f32, surrogate: bool) -> f32 {
        match (self, surrogate) {
            (ActKind::Sign, false) => sign_scalar(x),
            (ActKind::Heaviside, false) => heaviside_scalar(x),
            (ActKind::HwmsbCode, false) => hwmsb_scalar(x as f64).code() as f32,
            (ActKind::Sign | ActKind::Heaviside, true) => x.clamp(-1.0, 1.0),
            (ActKind::HwmsbCode, true) => (3.0 * hwmsb_surrogate(x as f64)) as f32,
            (ActKind::Relu, _) => x.max(0.0),
        }
    }

    /// Index of the smooth piece of the surrogate containing `x`.
    fn piece(self, x: f32) -> u8 {
        let edges: &[f32] = match self {
            ActKind::Sign | ActKind::Heaviside => &[-1.0, 1.0],
            ActKind::HwmsbCode => &[-0.125, 0.125, 1.0],
            ActKind::Relu => &[0.0],
        };
        edges.iter().filter(|&&e| x >= e).count() as u8
    }

    fn gradient(self, x: f32) -> f32 {
        match self {
            ActKind::Sign | ActKind::Heaviside => ste_gate(x),
            ActKind::HwmsbCode => (3.0 * hwmsb_gradient(x as f64)) as f32,
            ActKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv { x: Var, w: Var, geom: ConvGeom },
    ConvT { x: Var, w: Var, geom: ConvTransposeGeom },
    Dense { x: Var, w: Var },
    BiasAdd { x: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, stats: BatchStats },
    ChannelScale { x: Var, scale: Vec<f32> },
    Scale { x: Var, factor: f32 },
    MaxPool { x: Var, argmax: Vec<u32> },
    Act { x: Var, kind: ActKind },
    WeightQuant { w: Var },
    StraightThrough { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Concat { a: Var, b: Var },
    Reshape { x: Var },
    Softmax { x: Var },
    Mosaic { x: Var, rows: usize, cols: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One recorded forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    surrogate: bool,
    frozen: HashSet<u32>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            surrogate: false,
            frozen: HashSet::new(),
        }
    }

    /// A graph whose quantizers are replaced by their continuous surrogates.
    pub fn surrogate() -> Self {
        Graph {
            surrogate: true,
            ..Self::new()
        }
    }

    pub fn is_surrogate(&self) -> bool {
        self.surrogate
    }

    /// Parameters of this store enter the tape as constants.
    pub fn freeze_store(&mut self, tag: u32) {
        self.frozen.insert(tag);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        self.nodes[v.0].value.clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.get(id).clone();
        if self.frozen.contains(&id.store) {
            self.push(value, Op::Leaf, &[])
        } else {
            self.push(value, Op::Param(id), &[])
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (y, yd) = conv2d_raw(xv.data(), xv.dims4()?, wv.data(), wv.channels(), &geom)?;
        let value = Tensor::new(&yd, y)?;
        Ok(self.push(value, Op::Conv { x, w, geom }, &[x, w]))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, geom: ConvTransposeGeom) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let xd = xv.dims4()?;
        if wv.shape().len() != 4 || wv.shape()[2] != xd[3] {
            return Err(Error::shape(format!(
                "transpose-conv weight {:?} for input {:?}",
                wv.shape(),
                xv.shape()
            )));
        }
        let (y, yd) = conv_transpose2d_raw(xv.data(), xd, wv.data(), wv.channels(), &geom)?;
        let value = Tensor::new(&yd, y)?;
        Ok(self.push(value, Op::ConvT { x, w, geom }, &[x, w]))
    }

    pub fn dense(&mut self, x: Var, w: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, fan_in] = xv.dims2()?;
        let [wi, out] = wv.dims2()?;
        if wi != fan_in {
            return Err(Error::shape(format!("dense weight {wi}x{out} for input width {fan_in}")));
        }
        let y = dense_raw(xv.data(), n, wv.data(), fan_in, out)?;
        let value = Tensor::new(&[n, out], y)?;
        Ok(self.push(value, Op::Dense { x, w }, &[x, w]))
    }

    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let value = crate::ops::bias_add(self.value(x), self.value(b).data())?;
        Ok(self.push(value, Op::BiasAdd { x, b }, &[x, b]))
    }

    /// Training-mode batch normalization; also returns the batch statistics
    /// for the caller's moving averages.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<(Var, BatchStats)> {
        let c = self.value(x).channels();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("normalization parameters do not match channels"));
        }
        let (y, stats) = batch_norm_train(self.value(x), self.value(gamma).data(), self.value(beta).data(), eps)?;
        let summary = BatchStats {
            mean: stats.mean.clone(),
            var: stats.var.clone(),
            inv_std: stats.inv_std.clone(),
            xhat: Vec::new(),
        };
        Ok((self.push(y, Op::BatchNorm { x, gamma, beta, stats }, &[x, gamma, beta]), summary))
    }

    /// `y = scale_c·x + offset_c` with constant coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: Vec<f32>, offset: &[f32]) -> Result<Var> {
        let value = crate::norm::channel_affine(self.value(x), &scale, offset)?;
        Ok(self.push(value, Op::ChannelScale { x, scale }, &[x]))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (y, argmax, yd) = maxpool2_raw(xv.data(), xv.dims4()?)?;
        let value = Tensor::new(&yd, y)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn activation(&mut self, x: Var, kind: ActKind) -> Var {
        let s = self.surrogate;
        let value = self.value(x).map(|v| kind.forward(v, s));
        self.push(value, Op::Act { x, kind }, &[x])
    }

    /// Deployed weights from proxies; straight-through with the `|w| ≤ 1` gate.
    pub fn weight_quant(&mut self, w: Var, quantizer: &WeightQuantizer) -> Var {
        if matches!(quantizer, WeightQuantizer::Float) {
            return w;
        }
        let value = if self.surrogate {
            self.value(w).map(|v| v.clamp(-1.0, 1.0))
        } else {
            self.value(w).map(|v| quantizer.apply_scalar(v))
        };
        self.push(value, Op::WeightQuant { w }, &[w])
    }

    /// Applies `f` forward and passes gradients through unchanged (identity
    /// in surrogate mode).
    pub fn straight_through(&mut self, x: Var, f: impl Fn(f32) -> f32) -> Var {
        let value = if self.surrogate {
            self.value(x).clone()
        } else {
            self.value(x).map(f)
        };
        self.push(value, Op::StraightThrough { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    /// Concatenates along the channel (last) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (ca, cb) = (av.channels(), bv.channels());
        if av.shape()[..av.shape().len() - 1] != bv.shape()[..bv.shape().len() - 1] {
            return Err(Error::shape(format!("cannot concatenate {:?} and {:?}", av.shape(), bv.shape())));
        }
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks(ca).zip(bv.data().chunks(cb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Concat { a, b }, &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Flattens `[N, ...]` to `[N, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Softmax across channels at every position.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.channels();
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(c) {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.push(value, Op::Softmax { x }, &[x])
    }

    /// Tiles a batch of patches `[B·rows·cols, h, w, c]` (row-major per image)
    /// into frames `[B, rows·h, cols·w, c]`.
    pub fn mosaic(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = mosaic(self.value(x), rows, cols)?;
        Ok(self.push(value, Op::Mosaic { x, rows, cols }, &[x]))
    }

    /// For every input of a piecewise operation (activations, weight
    /// quantizers, max-pool), the index of the smooth piece it lies in. Two
    /// forward passes with equal signatures are connected by a smooth path
    /// when only one parameter moved, so finite differences between them are
    /// valid.
    pub fn piece_signature(&self) -> Vec<u32> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Act { x, kind } => sig.extend(self.value(*x).data().iter().map(|&v| kind.piece(v) as u32)),
                Op::WeightQuant { w } => {
                    sig.extend(self.value(*w).data().iter().map(|&v| ActKind::Sign.piece(v) as u32))
                }
                Op::MaxPool { argmax, .. } => sig.extend(argmax.iter().copied()),
                _ => {}
            }
        }
        sig
    }

    /// Reverse pass from `out`, seeded with `seed` (same shape as `out`).
    pub fn backward(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        self.value(out).expect_same_shape(&seed)?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        let mut result = Gradients::default();
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let send = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.needs(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => result.accumulate(*id, g),
                Op::Conv { x, w, geom } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (dx, dw) =
                        conv2d_backward_raw(xv.data(), xv.dims4()?, wv.data(), wv.channels(), geom, g.data())?;
                    send(*x, Tensor::new(xv.shape(), dx)?, &mut grads);
                    send(*w, Tensor::new(wv.shape(), dw)?, &mut grads);
                }
                Op::ConvT { x, w, geom } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (dx, dw) = conv_transpose2d_backward_raw(
                        xv.data(),
                        xv.dims4()?,
                        wv.data(),
                        wv.channels(),
                        geom,
                        g.data(),
                    )?;
                    send(*x, Tensor::new(xv.shape(), dx)?, &mut grads);
                    send(*w, Tensor::new(wv.shape(), dw)?, &mut grads);
                }
                Op::Dense { x, w } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let [n, fan_in] = xv.dims2()?;
                    let out = wv.channels();
                    let (dx, dw) = dense_backward_raw(xv.data(), n, wv.data(), fan_in, out, g.data());
                    send(*x, Tensor::new(xv.shape(), dx)?, &mut grads);
                    send(*w, Tensor::new(wv.shape(), dw)?, &mut grads);
                }
                Op::BiasAdd { x, b } => {
                    let c = g.channels();
                    let mut db = vec![0f32; c];
                    for row in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    send(*b, Tensor::new(self.value(*b).shape(), db)?, &mut grads);
                    send(*x, g, &mut grads);
                }
                Op::BatchNorm { x, gamma, beta, stats } => {
                    let gv = self.value(*gamma);
                    let (dx, dgamma, dbeta) = batch_norm_backward(g.data(), stats, gv.data());
                    send(*x, Tensor::new(g.shape(), dx)?, &mut grads);
                    send(*gamma, Tensor::new(gv.shape(), dgamma)?, &mut grads);
                    send(*beta, Tensor::new(self.value(*beta).shape(), dbeta)?, &mut grads);
                }
                Op::ChannelScale { x, scale } => {
                    let c = scale.len();
                    let mut dx = g;
                    for row in dx.data_mut().chunks_mut(c) {
                        for (v, s) in row.iter_mut().zip(scale) {
                            *v *= s;
                        }
                    }
                    send(*x, dx, &mut grads);
                }
                Op::Scale { x, factor } => send(*x, g.map(|v| v * factor), &mut grads),
                Op::MaxPool { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (&idx, &v) in argmax.iter().zip(g.data()) {
                        dx.data_mut()[idx as usize] += v;
                    }
                    send(*x, dx, &mut grads);
                }
                Op::Act { x, kind } => {
                    let dx = self.value(*x).zip_map(&g, |v, d| kind.gradient(v) * d)?;
                    send(*x, dx, &mut grads);
                }
                Op::WeightQuant { w } => {
                    let dw = self.value(*w).zip_map(&g, |v, d| ste_gate(v) * d)?;
                    send(*w, dw, &mut grads);
                }
                Op::StraightThrough { x } => send(*x, g, &mut grads),
                Op::Add { a, b } => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::Mul { a, b } => {
                    let da = g.zip_map(self.value(*b), |d, q| d * q)?;
                    let db = g.zip_map(self.value(*a), |d, p| d * p)?;
                    send(*a, da, &mut grads);
                    send(*b, db, &mut grads);
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).channels();
                    let cb = self.value(*b).channels();
                    let mut da = Vec::with_capacity(self.value(*a).len());
                    let mut db = Vec::with_capacity(self.value(*b).len());
                    for row in g.data().chunks(ca + cb) {
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    send(*a, Tensor::new(self.value(*a).shape(), da)?, &mut grads);
                    send(*b, Tensor::new(self.value(*b).shape(), db)?, &mut grads);
                }
                Op::Reshape { x } => send(*x, g.reshape(self.value(*x).shape())?, &mut grads),
                Op::Softmax { x } => {
                    let y = &node.value;
                    let c = y.channels();
                    let mut dx = g;
                    for (drow, yrow) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let dot: f32 = drow.iter().zip(yrow).map(|(d, p)| d * p).sum();
                        for (d, p) in drow.iter_mut().zip(yrow) {
                            *d = p * (*d - dot);
                        }
                    }
                    send(*x, dx, &mut grads);
                }
                Op::Mosaic { x, rows, cols } => send(*x, unmosaic(&g, *rows, *cols)?, &mut grads),
            }
        }
        Ok(result)
    }
}

/// Tiles `[B·rows·cols, h, w, c]` patches into `[B, rows·h, cols·w, c]` frames.
pub fn mosaic(patches: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let [p, h, w, c] = patches.dims4()?;
    if rows == 0 || cols == 0 || p % (rows * cols) != 0 {
        return Err(Error::shape(format!("{p} patches do not fill a {rows}x{cols} grid")));
    }
    let b = p / (rows * cols);
    let (fh, fw) = (rows * h, cols * w);
    let mut out = vec![0f32; b * fh * fw * c];
    for (pi, patch) in patches.data().chunks(h * w * c).enumerate() {
        let (img, r, col) = (pi / (rows * cols), (pi / cols) % rows, pi % cols);
        for y in 0..h {
            let dst = ((img * fh + r * h + y) * fw + col * w) * c;
            out[dst..dst + w * c].copy_from_slice(&patch[y * w * c..(y + 1) * w * c]);
        }
    }
    Tensor::new(&[b, fh, fw, c], out)
}

/// Inverse of [`mosaic`].
pub fn unmosaic(frames: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let [b, fh, fw, c] = frames.dims4()?;
    if rows == 0 || cols == 0 || fh % rows != 0 || fw % cols != 0 {
        return Err(Error::shape(format!("{fh}x{fw} frame does not split into {rows}x{cols}")));
    }
    let (h, w) = (fh / rows, fw / cols);
    let mut out = Vec::with_capacity(frames.len());
    for img in 0..b {
        for r in 0..rows {
            for col in 0..cols {
                for y in 0..h {
                    let src = ((img * fh + r * h + y) * fw + col * w) * c;
                    out.extend_from_slice(&frames.data()[src..src + w * c]);
                }
            }
        }
    }
    Tensor::new(&[b * rows * cols, h, w, c], out)
}
