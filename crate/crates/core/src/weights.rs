//! Weights file and lowered-model file.
//!
//! Both are little-endian binary containers closed by a SHA-256 digest of
//! everything before it.
//!
//! Weights file (`NQEW`): version, model configuration as JSON, a layer table
//! for every stateful layer (name, kind, shape, precision, quantizer
//! `n_levels`/Δ/τ, bit shift), then the deployed weights packed as signed
//! levels (quinary 3 bits, ternary 2 bits, binary 1 bit with `1 = +1`, LSB
//! first), the remaining real tensors, optional real-valued proxies and an
//! optional decoder.
//!
//! Without proxies, import places every weight at the centre of its
//! quantization bin, which reproduces the deployed weights exactly.
//!
//! Lowered-model file (`NQEL`): version, configuration, then one record per
//! integer step with its exponent, widths, reference position and packed
//! weight codes.

use std::path::Path;

use bitvec::prelude::*;
use sha2::{Digest, Sha256};

use crate::activation::ReferencePosition;
use crate::error::{Error, Result};
use crate::integer::{BsnDecision, IntLayer, IntOp, IntWeights, IntegerModel};
use crate::model::{LayerState, NormState, Nqe};
use crate::norm::BsnScale;
use crate::purenet::Decoder;
use crate::quant::{QuantizerSpec, WeightQuantizer};
use crate::tensor::Tensor;
use crate::topology::{ModelConfig, WeightPrecision};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"NQEW";
pub const LOWERED_MAGIC: [u8; 4] = *b"NQEL";
pub const WEIGHTS_VERSION: u16 = 1;
pub const LOWERED_VERSION: u16 = 1;
const DIGEST_LEN: usize = 32;

const KIND_WEIGHTS: u8 = 0;
const KIND_FIXED: u8 = 1;
const KIND_BIAS: u8 = 2;
const KIND_BATCH_NORM: u8 = 3;
const KIND_SHIFT: u8 = 4;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn i8(&mut self, v: i8) {
        self.0.push(v as u8);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) -> Result<()> {
        self.u32(u32::try_from(v).map_err(|_| Error::format(format!("length {v} too large")))?);
        Ok(())
    }
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.len(b.len())?;
        self.0.extend_from_slice(b);
        Ok(())
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.bytes(s.as_bytes())
    }
    fn shape(&mut self, shape: &[usize]) -> Result<()> {
        self.u8(shape.len() as u8);
        for &d in shape {
            self.len(d)?;
        }
        Ok(())
    }
    fn tensor(&mut self, t: &Tensor) -> Result<()> {
        self.shape(t.shape())?;
        for &v in t.data() {
            self.f32(v);
        }
        Ok(())
    }
    fn f32s(&mut self, v: &[f32]) -> Result<()> {
        self.len(v.len())?;
        for &x in v {
            self.f32(x);
        }
        Ok(())
    }
    fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.0);
        self.0.extend_from_slice(&digest);
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic, version and digest; the reader starts after the version.
    fn open(bytes: &'a [u8], magic: [u8; 4], version: u16, what: &str) -> Result<Self> {
        if bytes.len() < 6 + DIGEST_LEN {
            return Err(Error::format(format!("{what} is truncated")));
        }
        if bytes[..4] != magic {
            return Err(Error::format(format!("not a {what} (bad magic)")));
        }
        let found = u16::from_le_bytes([bytes[4], bytes[5]]);
        if found != version {
            return Err(Error::format(format!("{what} version {found}, expected {version}")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body)[..] != digest[..] {
            return Err(Error::format(format!("{what} digest mismatch (truncated or corrupted)")));
        }
        Ok(Reader { buf: body, pos: 6 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format("unexpected end of file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn i8(&mut self) -> Result<i8> {
        Ok(self.u8()? as i8)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::format("invalid UTF-8 name"))
    }
    fn shape(&mut self) -> Result<Vec<usize>> {
        let n = self.u8()? as usize;
        (0..n).map(|_| self.len()).collect()
    }
    fn f32s_n(&mut self, n: usize) -> Result<Vec<f32>> {
        if n > self.buf.len() {
            return Err(Error::format("unexpected end of file"));
        }
        (0..n).map(|_| self.f32()).collect()
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let shape = self.shape()?;
        let n = shape.iter().product();
        Tensor::new(&shape, self.f32s_n(n)?)
    }
    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.len()?;
        self.f32s_n(n)
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Packs signed levels at `bits` each (binary: `1` for `+1`), LSB first.
pub fn pack_levels(levels: &[i8], bits: u8) -> Vec<u8> {
    let mut out: BitVec<u8, Lsb0> = BitVec::with_capacity(levels.len() * bits as usize);
    for &k in levels {
        if bits == 1 {
            out.push(k > 0);
        } else {
            for b in 0..bits {
                out.push((k >> b) & 1 == 1);
            }
        }
    }
    out.into_vec()
}

/// Inverse of [`pack_levels`].
pub fn unpack_levels(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<i8>> {
    let view = bytes.view_bits::<Lsb0>();
    if view.len() < count * bits as usize || bytes.len() != (count * bits as usize).div_ceil(8) {
        return Err(Error::format("packed weights have the wrong length"));
    }
    Ok(view
        .chunks(bits as usize)
        .take(count)
        .map(|c| {
            if bits == 1 {
                if c[0] {
                    1
                } else {
                    -1
                }
            } else {
                let raw = c.iter().rev().fold(0i8, |acc, b| (acc << 1) | *b as i8);
                // sign-extend
                (raw << (8 - bits)) >> (8 - bits)
            }
        })
        .collect())
}

fn precision_code(p: Option<WeightPrecision>) -> u8 {
    p.map_or(0, |p| p.bits())
}

fn precision_from(code: u8) -> Result<Option<WeightPrecision>> {
    if code == 0 {
        Ok(None)
    } else {
        WeightPrecision::from_bits(code).map(Some)
    }
}

/// Levels of a weight tensor under its quantizer.
fn levels(values: &Tensor, quantizer: &WeightQuantizer) -> Result<Vec<i8>> {
    Ok(match quantizer {
        WeightQuantizer::Linear(spec) => values.data().iter().map(|&w| spec.level(w as f64) as i8).collect(),
        WeightQuantizer::Binary => values.data().iter().map(|&w| if w >= 0.0 { 1 } else { -1 }).collect(),
        WeightQuantizer::Float => return Err(Error::format("encoder layer with real-valued weights")),
    })
}

/// A proxy value that quantizes to level `k`: the centre of its bin.
fn bin_centre(k: i8, quantizer: &WeightQuantizer) -> f32 {
    match quantizer {
        WeightQuantizer::Linear(spec) => (k as f64 * 2.0 * spec.delta() / (spec.n_levels() as f64 - 2.0)) as f32,
        _ => k as f32,
    }
}

/// Options of [`export_weights`].
#[derive(Clone, Copy, Debug, Default)]
pub struct ExportOptions<'a> {
    /// Append the real-valued proxies (needed to resume training exactly).
    pub proxies: bool,
    pub decoder: Option<&'a Decoder>,
}

/// Serializes a model (and optionally its decoder).
pub fn weights_to_bytes(model: &Nqe, options: ExportOptions) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.0.extend_from_slice(&WEIGHTS_MAGIC);
    w.u16(WEIGHTS_VERSION);
    w.str(&serde_json::to_string(model.config())?)?;
    let topo = model.topology();
    let stateful: Vec<usize> = (0..topo.layers.len())
        .filter(|&i| !matches!(model.layer_state(i), LayerState::Stateless))
        .collect();
    w.len(stateful.len())?;
    // layer table
    for &i in &stateful {
        let spec = &topo.layers[i];
        w.str(&spec.name)?;
        let (kind, shape, precision, quant, shift) = match model.layer_state(i) {
            LayerState::Weights { weight, quantizer } => {
                let spec_q = match quantizer {
                    WeightQuantizer::Linear(q) => (q.n_levels(), q.delta(), q.tau()),
                    _ => (2, 0.0, 0.0),
                };
                (KIND_WEIGHTS, model.params().get(*weight).shape().to_vec(), spec.weight, spec_q, 0)
            }
            LayerState::Fixed { matrix } => (KIND_FIXED, matrix.shape().to_vec(), None, (0, 0.0, 0.0), 0),
            LayerState::Bias { bias } => (KIND_BIAS, model.params().get(*bias).shape().to_vec(), None, (0, 0.0, 0.0), 0),
            LayerState::Norm(NormState::Batch { moving_mean, .. }) => {
                (KIND_BATCH_NORM, vec![moving_mean.len()], None, (0, 0.0, 0.0), 0)
            }
            LayerState::Norm(NormState::Shift(s)) => (KIND_SHIFT, vec![spec.output[2]], None, (0, 0.0, 0.0), s.shift_exp),
            LayerState::Stateless => unreachable!("filtered"),
        };
        w.u8(kind);
        w.shape(&shape)?;
        w.u8(precision_code(precision));
        w.u8(quant.0);
        w.f64(quant.1);
        w.f64(quant.2);
        w.i8(shift as i8);
    }
    // packed weights
    for &i in &stateful {
        if let LayerState::Weights { weight, quantizer } = model.layer_state(i) {
            let bits = topo.layers[i].weight.expect("weighted layer").bits();
            w.bytes(&pack_levels(&levels(model.params().get(*weight), quantizer)?, bits))?;
        }
    }
    // remaining real tensors
    for &i in &stateful {
        match model.layer_state(i) {
            LayerState::Bias { bias } => w.tensor(model.params().get(*bias))?,
            LayerState::Norm(NormState::Batch {
                gamma,
                beta,
                moving_mean,
                moving_var,
                eps,
                momentum,
            }) => {
                w.tensor(model.params().get(*gamma))?;
                w.tensor(model.params().get(*beta))?;
                w.f32s(moving_mean)?;
                w.f32s(moving_var)?;
                w.f32(*eps);
                w.f32(*momentum);
            }
            LayerState::Norm(NormState::Shift(s)) => w.f64(s.source_quantile),
            _ => {}
        }
    }
    w.u8(options.proxies as u8);
    if options.proxies {
        for &i in &stateful {
            if let LayerState::Weights { weight, .. } = model.layer_state(i) {
                w.tensor(model.params().get(*weight))?;
            }
        }
    }
    match options.decoder {
        None => w.u8(0),
        Some(d) => {
            w.u8(1);
            w.str(&serde_json::to_string(d.config())?)?;
            let tensors = d.named_tensors();
            w.len(tensors.len())?;
            for (name, t) in &tensors {
                w.str(name)?;
                w.tensor(t)?;
            }
        }
    }
    Ok(w.finish())
}

/// A model read from a weights file.
#[derive(Clone, Debug, PartialEq)]
pub struct Imported {
    pub model: Nqe,
    pub decoder: Option<Decoder>,
    /// Whether real-valued proxies were present.
    pub has_proxies: bool,
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<Imported> {
    let mut r = Reader::open(bytes, WEIGHTS_MAGIC, WEIGHTS_VERSION, "weights file")?;
    let config: ModelConfig = serde_json::from_slice(r.bytes()?)?;
    config.validate()?;
    let template = Nqe::new(config.clone(), 0)?;
    let topo = template.topology().clone();
    let mut params = template.params().clone();
    let mut states = template.layer_states().to_vec();
    let count = r.len()?;
    struct Entry {
        index: usize,
        kind: u8,
        shape: Vec<usize>,
        quant: (u8, f64, f64),
        shift: i8,
    }
    let mut entries = Vec::with_capacity(count.min(topo.layers.len()));
    for _ in 0..count {
        let name = r.str()?;
        let index = topo
            .layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::format(format!("unknown layer `{name}`")))?;
        let kind = r.u8()?;
        let shape = r.shape()?;
        let precision = precision_from(r.u8()?)?;
        let quant = (r.u8()?, r.f64()?, r.f64()?);
        let shift = r.i8()?;
        let expected = match &states[index] {
            LayerState::Weights { .. } => KIND_WEIGHTS,
            LayerState::Fixed { .. } => KIND_FIXED,
            LayerState::Bias { .. } => KIND_BIAS,
            LayerState::Norm(_) if kind == KIND_SHIFT => KIND_SHIFT,
            LayerState::Norm(_) => KIND_BATCH_NORM,
            LayerState::Stateless => u8::MAX,
        };
        if kind != expected || (kind == KIND_WEIGHTS && precision != topo.layers[index].weight) {
            return Err(Error::format(format!("layer `{name}` does not match the configured topology")));
        }
        entries.push(Entry {
            index,
            kind,
            shape,
            quant,
            shift,
        });
    }
    if entries.len() != states.iter().filter(|s| !matches!(s, LayerState::Stateless)).count() {
        return Err(Error::format("layer table does not cover every stateful layer"));
    }
    let mut packed = Vec::new();
    for e in entries.iter().filter(|e| e.kind == KIND_WEIGHTS) {
        let LayerState::Weights { weight, .. } = states[e.index] else { unreachable!() };
        if params.get(weight).shape() != e.shape.as_slice() {
            return Err(Error::format(format!("layer `{}` has shape {:?}", topo.layers[e.index].name, e.shape)));
        }
        let quantizer = match e.quant.0 {
            2 => WeightQuantizer::Binary,
            n => WeightQuantizer::Linear(QuantizerSpec::new(n, e.quant.1, e.quant.2)?),
        };
        let bits = topo.layers[e.index].weight.expect("weighted").bits();
        let lv = unpack_levels(r.bytes()?, bits, e.shape.iter().product())?;
        packed.push((e.index, weight, quantizer, lv));
    }
    for e in &entries {
        match (&mut states[e.index], e.kind) {
            (LayerState::Bias { bias }, KIND_BIAS) => {
                let t = r.tensor()?;
                replace(&mut params, *bias, t)?;
            }
            (LayerState::Norm(NormState::Batch { gamma, beta, moving_mean, moving_var, eps, momentum }), KIND_BATCH_NORM) => {
                let (g, b) = (r.tensor()?, r.tensor()?);
                replace(&mut params, *gamma, g)?;
                replace(&mut params, *beta, b)?;
                let (mm, mv) = (r.f32s()?, r.f32s()?);
                if mm.len() != moving_mean.len() || mv.len() != moving_var.len() {
                    return Err(Error::format("moving statistics have the wrong length"));
                }
                *moving_mean = mm;
                *moving_var = mv;
                *eps = r.f32()?;
                *momentum = r.f32()?;
            }
            (st @ LayerState::Norm(_), KIND_SHIFT) => {
                let mut scale = BsnScale::from_shift(e.shift as i32)?;
                scale.source_quantile = r.f64()?;
                *st = LayerState::Norm(NormState::Shift(scale));
            }
            _ => {}
        }
    }
    let has_proxies = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(Error::format(format!("bad proxy flag {v}"))),
    };
    for (index, weight, quantizer, lv) in packed {
        let value = if has_proxies {
            let t = r.tensor()?;
            if t.data().iter().zip(&lv).any(|(&w, &k)| levels_one(w, &quantizer) != k) {
                return Err(Error::format(format!(
                    "proxies of `{}` disagree with the packed weights",
                    topo.layers[index].name
                )));
            }
            t
        } else {
            Tensor::new(params.get(weight).shape(), lv.iter().map(|&k| bin_centre(k, &quantizer)).collect())?
        };
        replace(&mut params, weight, value)?;
        states[index] = LayerState::Weights { weight, quantizer };
    }
    let decoder = match r.u8()? {
        0 => None,
        1 => {
            let dconfig = serde_json::from_slice(r.bytes()?)?;
            let mut d = Decoder::new(dconfig, config.code_bits(), 0)?;
            let n = r.len()?;
            let mut tensors = Vec::new();
            for _ in 0..n {
                tensors.push((r.str()?, r.tensor()?));
            }
            d.load_named(&tensors)?;
            Some(d)
        }
        v => return Err(Error::format(format!("bad decoder flag {v}"))),
    };
    r.done()?;
    Ok(Imported {
        model: Nqe::from_parts(config, params, states)?,
        decoder,
        has_proxies,
    })
}

fn levels_one(w: f32, q: &WeightQuantizer) -> i8 {
    match q {
        WeightQuantizer::Linear(spec) => spec.level(w as f64) as i8,
        _ => {
            if w >= 0.0 {
                1
            } else {
                -1
            }
        }
    }
}

fn replace(params: &mut crate::autograd::ParamStore, id: crate::autograd::ParamId, t: Tensor) -> Result<()> {
    if params.get(id).shape() != t.shape() {
        return Err(Error::format(format!(
            "tensor `{}` has shape {:?}, expected {:?}",
            params.name(id),
            t.shape(),
            params.get(id).shape()
        )));
    }
    *params.get_mut(id) = t;
    Ok(())
}

pub fn export_weights(model: &Nqe, path: &Path, options: ExportOptions) -> Result<()> {
    std::fs::write(path, weights_to_bytes(model, options)?)?;
    Ok(())
}

pub fn import_weights(path: &Path) -> Result<Imported> {
    weights_from_bytes(&std::fs::read(path)?)
}

// ---- lowered model ----

const OP_CONV: u8 = 0;
const OP_DENSE: u8 = 1;
const OP_BIAS: u8 = 2;
const OP_SHIFT: u8 = 3;
const OP_SIGN: u8 = 4;
const OP_HEAVISIDE: u8 = 5;
const OP_HWMSB: u8 = 6;
const OP_MAXPOOL: u8 = 7;
const OP_FLATTEN: u8 = 8;

fn write_int_weights(w: &mut Writer, iw: &IntWeights) -> Result<()> {
    w.u8(precision_code(iw.precision));
    w.shape(&iw.shape)?;
    w.i8(iw.exponent as i8);
    // the fixed projection is ±1 like a binary layer
    let bits = iw.precision.map_or(1, |p| p.bits());
    w.bytes(&pack_levels(&iw.codes, bits))
}

fn read_int_weights(r: &mut Reader) -> Result<IntWeights> {
    let precision = precision_from(r.u8()?)?;
    let shape = r.shape()?;
    let exponent = r.i8()? as i32;
    let bits = precision.map_or(1, |p| p.bits());
    let codes = unpack_levels(r.bytes()?, bits, shape.iter().product())?;
    Ok(IntWeights {
        precision,
        shape,
        codes,
        exponent,
    })
}

pub fn lowered_to_bytes(im: &IntegerModel) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.0.extend_from_slice(&LOWERED_MAGIC);
    w.u16(LOWERED_VERSION);
    w.str(&serde_json::to_string(&im.config)?)?;
    w.len(im.encoder_len)?;
    w.len(im.layers.len())?;
    for l in &im.layers {
        w.str(&l.name)?;
        w.i32(l.exponent);
        w.u8(l.thirds as u8);
        w.u8(l.bits as u8);
        w.i64(l.max_abs);
        for d in l.output {
            w.len(d)?;
        }
        match &l.op {
            IntOp::Conv {
                weights,
                kernel,
                pad,
                groups,
                shuffle,
            } => {
                w.u8(OP_CONV);
                w.u16(*kernel as u16);
                w.u16(*pad as u16);
                w.u16(*groups as u16);
                w.u8(*shuffle as u8);
                write_int_weights(&mut w, weights)?;
            }
            IntOp::Dense { weights } => {
                w.u8(OP_DENSE);
                write_int_weights(&mut w, weights)?;
            }
            IntOp::Bias { values } => {
                w.u8(OP_BIAS);
                w.len(values.len())?;
                for &v in values {
                    w.i32(v);
                }
            }
            IntOp::Shift { shift_exp } => {
                w.u8(OP_SHIFT);
                w.i8(*shift_exp as i8);
            }
            IntOp::Sign => w.u8(OP_SIGN),
            IntOp::Heaviside => w.u8(OP_HEAVISIDE),
            IntOp::Hwmsb { reference, scale_exp } => {
                w.u8(OP_HWMSB);
                w.i8(reference.bias as i8);
                w.i32(*scale_exp);
            }
            IntOp::MaxPool => w.u8(OP_MAXPOOL),
            IntOp::Flatten => w.u8(OP_FLATTEN),
        }
    }
    w.len(im.bsn.len())?;
    for d in &im.bsn {
        w.str(&d.layer)?;
        w.i8(d.shift_exp as i8);
        w.str(&d.elision)?;
    }
    Ok(w.finish())
}

pub fn lowered_from_bytes(bytes: &[u8]) -> Result<IntegerModel> {
    let mut r = Reader::open(bytes, LOWERED_MAGIC, LOWERED_VERSION, "lowered-model file")?;
    let config: ModelConfig = serde_json::from_slice(r.bytes()?)?;
    config.validate()?;
    let encoder_len = r.len()?;
    let n = r.len()?;
    let mut layers = Vec::new();
    for _ in 0..n {
        let name = r.str()?;
        let exponent = r.i32()?;
        let thirds = r.u8()? != 0;
        let bits = r.u8()? as u32;
        let max_abs = r.i64()?;
        let output = [r.len()?, r.len()?, r.len()?];
        let op = match r.u8()? {
            OP_CONV => IntOp::Conv {
                kernel: r.u16()? as usize,
                pad: r.u16()? as usize,
                groups: r.u16()? as usize,
                shuffle: r.u8()? != 0,
                weights: read_int_weights(&mut r)?,
            },
            OP_DENSE => IntOp::Dense {
                weights: read_int_weights(&mut r)?,
            },
            OP_BIAS => {
                let k = r.len()?;
                if k > bytes.len() {
                    return Err(Error::format("bias count exceeds the file"));
                }
                IntOp::Bias {
                    values: (0..k).map(|_| r.i32()).collect::<Result<_>>()?,
                }
            }
            OP_SHIFT => IntOp::Shift {
                shift_exp: r.i8()? as i32,
            },
            OP_SIGN => IntOp::Sign,
            OP_HEAVISIDE => IntOp::Heaviside,
            OP_HWMSB => IntOp::Hwmsb {
                reference: ReferencePosition { bias: r.i8()? as i32 },
                scale_exp: r.i32()?,
            },
            OP_MAXPOOL => IntOp::MaxPool,
            OP_FLATTEN => IntOp::Flatten,
            other => return Err(Error::format(format!("unknown integer op {other}"))),
        };
        layers.push(IntLayer {
            name,
            op,
            exponent,
            thirds,
            bits,
            max_abs,
            output,
        });
    }
    let k = r.len()?;
    let mut bsn = Vec::new();
    for _ in 0..k {
        bsn.push(BsnDecision {
            layer: r.str()?,
            shift_exp: r.i8()? as i32,
            elision: r.str()?,
        });
    }
    r.done()?;
    if encoder_len > layers.len() {
        return Err(Error::format("encoder length exceeds the layer count"));
    }
    Ok(IntegerModel {
        config,
        layers,
        encoder_len,
        bsn,
    })
}
