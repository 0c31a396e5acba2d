//! Integer-only inference.
//!
//! [`lower`] turns a folded [`Nqe`] into an [`IntegerModel`]: weight codes
//! (`2v` for quinary values `v`, the value itself otherwise), bit shifts
//! elided before sign-type consumers or moved into the HWMSB reference
//! position, Sign/Heaviside hoisted above max pooling, and the first-layer
//! bias as 16-bit fixed point on the accumulator grid. Every stored value is
//! an integer mantissa with a layer-constant power-of-two exponent (HWMSB
//! codes additionally stand for thirds).

use bitvec::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{hwmsb_integer, ReferencePosition};
use crate::autograd::ActKind;
use crate::error::{Error, Result};
use crate::model::{LayerState, NormState, Nqe, Output};
use crate::norm::{elide_bsn, Consumer, Elision};
use crate::ops::{conv2d_raw, dense_raw, maxpool2_raw, ConvGeom};
use crate::tensor::Tensor;
use crate::topology::{LayerKind, ModelConfig, WeightPrecision, INPUT_BITS, INPUT_EXPONENT};

/// Integer weights of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntWeights {
    /// `None` for the fixed Rademacher projection.
    pub precision: Option<WeightPrecision>,
    pub shape: Vec<usize>,
    pub codes: Vec<i8>,
    /// A code `k` stands for `k · 2^exponent`.
    pub exponent: i32,
}

impl IntWeights {
    pub fn max_code(&self) -> i64 {
        self.codes.iter().map(|&c| (c as i64).abs()).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum IntOp {
    Conv {
        weights: IntWeights,
        kernel: usize,
        pad: usize,
        groups: usize,
        shuffle: bool,
    },
    Dense {
        weights: IntWeights,
    },
    /// Fixed-point bias added on the accumulator grid.
    Bias { values: Vec<i32> },
    /// An explicit bit shift: moves the exponent, leaves mantissas alone.
    Shift { shift_exp: i32 },
    Sign,
    Heaviside,
    Hwmsb {
        reference: ReferencePosition,
        /// Exponent of the incoming accumulator.
        scale_exp: i32,
    },
    /// 2×2 max pooling; a logical OR on Heaviside bits.
    MaxPool,
    Flatten,
}

/// One step of the integer program.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntLayer {
    pub name: String,
    pub op: IntOp,
    /// Mantissa `m` stands for `m · 2^exponent` (divided by 3 when `thirds`).
    pub exponent: i32,
    pub thirds: bool,
    /// Signed storage width of every output mantissa (unsigned for codes).
    pub bits: u32,
    /// Largest output magnitude the layer can produce.
    pub max_abs: i64,
    pub output: [usize; 3],
}

/// What happened to one bit-shift normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BsnDecision {
    pub layer: String,
    pub shift_exp: i32,
    pub elision: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LowerOptions {
    /// Fold HWMSB-bound shifts into the reference position (otherwise an
    /// explicit [`IntOp::Shift`] is kept).
    pub absorb_bsn: bool,
}

impl Default for LowerOptions {
    fn default() -> Self {
        LowerOptions { absorb_bsn: true }
    }
}

/// A lowered encoder (+ classifier). Immutable; forward passes may run
/// concurrently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegerModel {
    pub config: ModelConfig,
    pub layers: Vec<IntLayer>,
    /// Number of leading steps producing the binary code.
    pub encoder_len: usize,
    pub bsn: Vec<BsnDecision>,
}

/// Smallest signed width holding every value in `[-max_abs, max_abs]`.
pub fn signed_width(max_abs: i64) -> u32 {
    if max_abs <= 0 {
        1
    } else {
        64 - max_abs.leading_zeros() + 1
    }
}

fn weight_codes(values: &[f32], precision: Option<WeightPrecision>, layer: &str) -> Result<(Vec<i8>, i32)> {
    let exponent = precision.map_or(0, |p| p.exponent());
    let max = match precision {
        Some(WeightPrecision::Quinary) => 2,
        _ => 1,
    };
    let scale = 2f64.powi(-exponent);
    let codes = values
        .iter()
        .map(|&v| {
            let c = v as f64 * scale;
            if c.fract() != 0.0 || c.abs() > max as f64 || (precision == Some(WeightPrecision::Binary) && c == 0.0) {
                Err(Error::format(format!("layer `{layer}`: weight {v} is not on its {precision:?} grid")))
            } else {
                Ok(c as i8)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((codes, exponent))
}

/// The consumer of a normalization at `i`, looking through max pooling.
fn consumer_after(kinds: &[LayerKind], i: usize) -> Consumer {
    match kinds[i + 1..].iter().find(|k| !matches!(k, LayerKind::MaxPool2)) {
        None => Consumer::Logits,
        Some(LayerKind::Activation { kind: ActKind::Sign }) => Consumer::Sign,
        Some(LayerKind::Activation { kind: ActKind::Heaviside }) => Consumer::Heaviside,
        Some(LayerKind::Activation { kind: ActKind::HwmsbCode }) => Consumer::Hwmsb,
        Some(_) => Consumer::Other,
    }
}

pub fn lower(model: &Nqe) -> Result<IntegerModel> {
    lower_with(model, LowerOptions::default())
}

/// Lowers a model whose normalizations are all bit shifts.
pub fn lower_with(model: &Nqe, options: LowerOptions) -> Result<IntegerModel> {
    if !model.is_folded() {
        return Err(Error::config("cannot lower a model that still has batch normalization"));
    }
    let topo = model.topology();
    let kinds: Vec<LayerKind> = topo.layers.iter().map(|l| l.kind).collect();
    let mut layers: Vec<IntLayer> = Vec::new();
    let mut bsn = Vec::new();
    let mut encoder_len = None;
    let mut exponent = INPUT_EXPONENT;
    let mut thirds = false;
    let mut max_abs: i64 = (1 << INPUT_BITS) - 1;
    let mut pending_shift = 0;
    // A sign-type activation already emitted ahead of the pooling it followed.
    let mut hoisted: Option<usize> = None;

    for (i, spec) in topo.layers.iter().enumerate() {
        if i == topo.encoder_len {
            encoder_len = Some(layers.len());
        }
        let emit = |layers: &mut Vec<IntLayer>, name: &str, op: IntOp, exponent: i32, thirds: bool, max_abs: i64, output: [usize; 3], bits: u32| {
            layers.push(IntLayer {
                name: name.to_string(),
                op,
                exponent,
                thirds,
                bits,
                max_abs,
                output,
            });
        };
        match (&spec.kind, model.layer_state(i)) {
            (LayerKind::Conv { .. } | LayerKind::Depthwise { .. } | LayerKind::Dense | LayerKind::Rademacher { .. }, st) => {
                let (values, precision) = match st {
                    LayerState::Weights { .. } => (
                        model.quantized_weight(i).expect("weighted layer"),
                        spec.weight,
                    ),
                    LayerState::Fixed { matrix } => (matrix.clone(), None),
                    other => return Err(Error::format(format!("layer `{}` has state {other:?}", spec.name))),
                };
                let (codes, wexp) = weight_codes(values.data(), precision, &spec.name)?;
                let weights = IntWeights {
                    precision,
                    shape: values.shape().to_vec(),
                    codes,
                    exponent: wexp,
                };
                max_abs *= spec.fan_in() as i64 * weights.max_code().max(1);
                exponent += wexp;
                let op = match spec.kind {
                    LayerKind::Conv { kernel, groups } => IntOp::Conv {
                        weights,
                        kernel,
                        pad: kernel / 2,
                        groups,
                        shuffle: groups > 1,
                    },
                    LayerKind::Depthwise { kernel } => IntOp::Conv {
                        weights,
                        kernel,
                        pad: 0,
                        groups: spec.input[2],
                        shuffle: false,
                    },
                    _ => IntOp::Dense { weights },
                };
                emit(&mut layers, &spec.name, op, exponent, thirds, max_abs, spec.output, signed_width(max_abs));
            }
            (LayerKind::Bias, LayerState::Bias { .. }) => {
                let expected = model.config().first_layer_exponent();
                if exponent != expected {
                    return Err(Error::format(format!(
                        "bias `{}` meets exponent {exponent}, expected {expected}",
                        spec.name
                    )));
                }
                let values = model.fixed_bias().expect("model has a bias");
                max_abs += values.iter().map(|&b| (b as i64).abs()).max().unwrap_or(0);
                emit(&mut layers, &spec.name, IntOp::Bias { values }, exponent, thirds, max_abs, spec.output, signed_width(max_abs));
            }
            (LayerKind::Norm, LayerState::Norm(NormState::Shift(scale))) => {
                let consumer = consumer_after(&kinds, i);
                let elision = elide_bsn(consumer);
                bsn.push(BsnDecision {
                    layer: spec.name.clone(),
                    shift_exp: scale.shift_exp,
                    elision: format!("{elision:?}"),
                });
                match elision {
                    Elision::Elide => {}
                    Elision::AbsorbIntoHwmsb if options.absorb_bsn => pending_shift += scale.shift_exp,
                    Elision::AbsorbIntoHwmsb => {
                        exponent += scale.shift_exp;
                        let op = IntOp::Shift { shift_exp: scale.shift_exp };
                        emit(&mut layers, &spec.name, op, exponent, thirds, max_abs, spec.output, signed_width(max_abs));
                    }
                    Elision::Keep => {
                        return Err(Error::format(format!(
                            "bit shift `{}` feeds a layer the integer path cannot absorb",
                            spec.name
                        )))
                    }
                }
            }
            (LayerKind::Rescale3, _) => {
                // Only sign-type consumers may follow: the third never reaches a
                // stored value.
                let next = kinds[i + 1..].iter().position(|k| !matches!(k, LayerKind::Norm | LayerKind::MaxPool2));
                if !matches!(next.map(|j| consumer_after(&kinds, i + j)), Some(Consumer::Sign | Consumer::Heaviside)) {
                    return Err(Error::format(format!("`{}` must feed a sign-type activation", spec.name)));
                }
                thirds = true;
            }
            (LayerKind::Activation { kind }, _) => {
                if hoisted.take() == Some(i) {
                    continue;
                }
                let (op, bits, m) = activation_op(*kind, exponent, thirds, &mut pending_shift, &spec.name)?;
                emit(&mut layers, &spec.name, op, 0, false, m, spec.output, bits);
                exponent = 0;
                thirds = false;
                max_abs = m;
            }
            (LayerKind::MaxPool2, _) => {
                let next = topo.layers.get(i + 1);
                if let Some(LayerKind::Activation { kind: kind @ (ActKind::Sign | ActKind::Heaviside) }) =
                    next.map(|l| l.kind)
                {
                    let next = next.expect("checked");
                    let (op, bits, m) = activation_op(kind, exponent, thirds, &mut pending_shift, &next.name)?;
                    emit(&mut layers, &next.name, op, 0, false, m, spec.input, bits);
                    exponent = 0;
                    thirds = false;
                    max_abs = m;
                    hoisted = Some(i + 1);
                }
                let bits = layers.last().map_or(INPUT_BITS as u32, |l| l.bits);
                emit(&mut layers, &spec.name, IntOp::MaxPool, exponent, thirds, max_abs, spec.output, bits);
            }
            (LayerKind::Flatten, _) => {
                let bits = layers.last().map_or(INPUT_BITS as u32, |l| l.bits);
                emit(&mut layers, &spec.name, IntOp::Flatten, exponent, thirds, max_abs, spec.output, bits);
            }
            (kind, st) => {
                return Err(Error::format(format!(
                    "layer `{}` of kind {kind:?} has state {st:?}",
                    spec.name
                )))
            }
        }
    }
    if let Some(l) = layers.iter().find(|l| l.bits > 32) {
        return Err(Error::config(format!(
            "layer `{}` needs a {}-bit accumulator; the integer path runs on 32 bits",
            l.name, l.bits
        )));
    }
    Ok(IntegerModel {
        config: model.config().clone(),
        encoder_len: encoder_len.unwrap_or(layers.len()),
        layers,
        bsn,
    })
}

fn activation_op(
    kind: ActKind,
    exponent: i32,
    thirds: bool,
    pending_shift: &mut i32,
    name: &str,
) -> Result<(IntOp, u32, i64)> {
    Ok(match kind {
        ActKind::Sign => (IntOp::Sign, 1, 1),
        ActKind::Heaviside => (IntOp::Heaviside, 1, 1),
        ActKind::HwmsbCode => {
            if thirds {
                return Err(Error::format(format!("`{name}` would see a non-dyadic input")));
            }
            let reference = ReferencePosition::default().absorb(std::mem::take(pending_shift));
            (IntOp::Hwmsb { reference, scale_exp: exponent }, 2, 3)
        }
        ActKind::Relu => return Err(Error::format(format!("`{name}`: ReLU has no integer form"))),
    })
}

/// Integer operations performed per layer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OpCounts {
    pub macs: u64,
    pub adds: u64,
    pub compares: u64,
}

/// Tally of the work done by [`IntegerModel::forward_counted`]; every entry
/// is an integer operation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OpCounter {
    pub layers: Vec<(String, OpCounts)>,
}

impl OpCounter {
    pub fn total(&self) -> OpCounts {
        self.layers.iter().fold(OpCounts::default(), |mut t, (_, c)| {
            t.macs += c.macs;
            t.adds += c.adds;
            t.compares += c.compares;
            t
        })
    }
}

/// One row of [`IntegerModel::report_widths`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WidthRow {
    pub layer: String,
    pub op: &'static str,
    pub accumulator_bits: Option<u32>,
    pub storage_bits: u32,
}

/// One layer of an activation trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub name: String,
    pub exponent: i32,
    pub thirds: bool,
    pub bits: u32,
    pub shape: Vec<usize>,
    /// Mantissas at `bits` each, little-endian bit order. Accumulators are
    /// two's complement, HWMSB codes unsigned, 1-bit outputs store `1` for a
    /// positive value.
    #[serde(with = "hex_bytes")]
    pub packed: Vec<u8>,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

/// Packs values at `bits` each (two's complement, LSB first).
pub fn pack_mantissas(values: &[i64], bits: u32) -> Vec<u8> {
    let mut out: BitVec<u8, Lsb0> = BitVec::with_capacity(values.len() * bits as usize);
    for &v in values {
        for b in 0..bits {
            out.push((v >> b) & 1 == 1);
        }
    }
    out.into_vec()
}

/// Inverse of [`pack_mantissas`] for signed values.
pub fn unpack_mantissas(bytes: &[u8], bits: u32, count: usize) -> Result<Vec<i64>> {
    let view = bytes.view_bits::<Lsb0>();
    if view.len() < count * bits as usize {
        return Err(Error::format("packed mantissas are truncated"));
    }
    Ok(view
        .chunks(bits as usize)
        .take(count)
        .map(|chunk| {
            let raw = chunk.iter().rev().fold(0i64, |acc, b| (acc << 1) | *b as i64);
            // sign-extend
            if bits < 64 && raw >> (bits - 1) & 1 == 1 {
                raw - (1i64 << bits)
            } else {
                raw
            }
        })
        .collect())
}

impl IntegerModel {
    pub fn code_bits(&self) -> usize {
        self.config.code_bits()
    }

    /// Integer output for `n` images of 8-bit NHWC pixels: the `{0, 1}` code
    /// `[n, 4F]` or integer logits `[n, classes]`.
    pub fn forward(&self, pixels: &[u8], n: usize, output: Output) -> Result<Vec<i32>> {
        self.run(pixels, n, output, &mut |_, _, _| {}, None)
    }

    /// Code and logits from one pass: `([n, 4F], [n, classes])`.
    pub fn forward_with_code(&self, pixels: &[u8], n: usize) -> Result<(Vec<i32>, Vec<i32>)> {
        let mut code = Vec::new();
        let mut step = 0;
        let logits = self.run(
            pixels,
            n,
            Output::Logits,
            &mut |_, values, _| {
                step += 1;
                if step == self.encoder_len {
                    code = values.to_vec();
                }
            },
            None,
        )?;
        Ok((code, logits))
    }

    /// Like [`IntegerModel::forward`] with an operation tally.
    pub fn forward_counted(&self, pixels: &[u8], n: usize, output: Output, counter: &mut OpCounter) -> Result<Vec<i32>> {
        self.run(pixels, n, output, &mut |_, _, _| {}, Some(counter))
    }

    /// Runs on a tensor of grid values `p/256`.
    pub fn forward_tensor(&self, x: &Tensor, output: Output) -> Result<Vec<i32>> {
        let pixels = tensor_pixels(x)?;
        self.forward(&pixels, x.batch(), output)
    }

    /// Predicted classes (first maximum on ties).
    pub fn classify(&self, pixels: &[u8], n: usize) -> Result<Vec<usize>> {
        let logits = self.forward(pixels, n, Output::Logits)?;
        Ok(logits
            .chunks(self.config.classes)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    /// Every layer's output for one forward pass.
    pub fn trace(&self, pixels: &[u8], n: usize, output: Output) -> Result<Vec<TraceRecord>> {
        let mut records = Vec::new();
        self.run(
            pixels,
            n,
            output,
            &mut |layer, values, dims| {
                let mantissas: Vec<i64> = if layer.bits == 1 {
                    values.iter().map(|&v| (v > 0) as i64).collect()
                } else {
                    values.iter().map(|&v| v as i64).collect()
                };
                records.push(TraceRecord {
                    name: layer.name.clone(),
                    exponent: layer.exponent,
                    thirds: layer.thirds,
                    bits: layer.bits,
                    shape: dims.to_vec(),
                    packed: pack_mantissas(&mantissas, layer.bits),
                });
            },
            None,
        )?;
        Ok(records)
    }

    /// Accumulator and storage widths per layer.
    pub fn report_widths(&self) -> Vec<WidthRow> {
        self.layers
            .iter()
            .map(|l| {
                let (op, acc) = match l.op {
                    IntOp::Conv { .. } => ("conv", true),
                    IntOp::Dense { .. } => ("dense", true),
                    IntOp::Bias { .. } => ("bias", true),
                    IntOp::Shift { .. } => ("shift", false),
                    IntOp::Sign => ("sign", false),
                    IntOp::Heaviside => ("heaviside", false),
                    IntOp::Hwmsb { .. } => ("hwmsb", false),
                    IntOp::MaxPool => ("maxpool", false),
                    IntOp::Flatten => ("flatten", false),
                };
                WidthRow {
                    layer: l.name.clone(),
                    op,
                    accumulator_bits: acc.then_some(l.bits),
                    storage_bits: l.bits,
                }
            })
            .collect()
    }

    fn run(
        &self,
        pixels: &[u8],
        n: usize,
        output: Output,
        visit: &mut dyn FnMut(&IntLayer, &[i32], [usize; 4]),
        mut counter: Option<&mut OpCounter>,
    ) -> Result<Vec<i32>> {
        let s = self.config.input_size;
        if pixels.len() != n * s * s * 3 {
            return Err(Error::shape(format!(
                "{} pixels for {n} images of {s}x{s}x3",
                pixels.len()
            )));
        }
        let end = match output {
            Output::Code => self.encoder_len,
            Output::Logits => self.layers.len(),
        };
        let mut x: Vec<i32> = pixels.iter().map(|&p| p as i32).collect();
        let mut dims = [n, s, s, 3];
        for layer in &self.layers[..end] {
            let mut counts = OpCounts::default();
            match &layer.op {
                IntOp::Conv {
                    weights,
                    kernel,
                    pad,
                    groups,
                    shuffle,
                } => {
                    let w: Vec<i32> = weights.codes.iter().map(|&c| c as i32).collect();
                    let geom = ConvGeom::square(*kernel, *pad).grouped(*groups, *shuffle);
                    let cout = *weights.shape.last().expect("conv weight shape");
                    let (y, yd) = conv2d_raw(&x, dims, &w, cout, &geom)?;
                    counts.macs = (yd[0] * yd[1] * yd[2] * cout * kernel * kernel * (dims[3] / groups)) as u64;
                    x = y;
                    dims = yd;
                }
                IntOp::Dense { weights } => {
                    let w: Vec<i32> = weights.codes.iter().map(|&c| c as i32).collect();
                    let fan_in = dims[1] * dims[2] * dims[3];
                    let out = weights.shape[1];
                    x = dense_raw(&x, n, &w, fan_in, out)?;
                    counts.macs = (n * fan_in * out) as u64;
                    dims = [n, 1, 1, out];
                }
                IntOp::Bias { values } => {
                    let c = dims[3];
                    for (i, v) in x.iter_mut().enumerate() {
                        *v += values[i % c];
                    }
                    counts.adds = x.len() as u64;
                }
                IntOp::Shift { .. } => {}
                IntOp::Sign => {
                    x.iter_mut().for_each(|v| *v = if *v >= 0 { 1 } else { -1 });
                    counts.compares = x.len() as u64;
                }
                IntOp::Heaviside => {
                    x.iter_mut().for_each(|v| *v = (*v > 0) as i32);
                    counts.compares = x.len() as u64;
                }
                IntOp::Hwmsb { reference, scale_exp } => {
                    x.iter_mut()
                        .for_each(|v| *v = hwmsb_integer(*v as i64, *scale_exp, *reference).code() as i32);
                    counts.compares = x.len() as u64;
                }
                IntOp::MaxPool => {
                    let (y, _, yd) = maxpool2_raw(&x, dims)?;
                    counts.compares = 3 * y.len() as u64;
                    x = y;
                    dims = yd;
                }
                IntOp::Flatten => dims = [n, 1, 1, dims[1] * dims[2] * dims[3]],
            }
            if matches!(layer.op, IntOp::Conv { .. } | IntOp::Dense { .. } | IntOp::Bias { .. }) {
                let limit = 1i64 << (layer.bits - 1);
                if let Some(&v) = x.iter().find(|&&v| (v as i64) >= limit || (v as i64) < -limit) {
                    return Err(Error::Overflow {
                        layer: layer.name.clone(),
                        value: v as i64,
                        bits: layer.bits,
                    });
                }
            }
            if let Some(c) = counter.as_deref_mut() {
                c.layers.push((layer.name.clone(), counts));
            }
            visit(layer, &x, dims);
        }
        Ok(x)
    }
}

/// 8-bit pixels of a tensor on the `p/256` input grid.
pub fn tensor_pixels(x: &Tensor) -> Result<Vec<u8>> {
    x.data()
        .iter()
        .map(|&v| {
            let p = v * 256.0;
            if p.fract() == 0.0 && (0.0..=255.0).contains(&p) {
                Ok(p as u8)
            } else {
                Err(Error::format(format!("{v} is not an 8-bit pixel on the p/256 grid")))
            }
        })
        .collect()
}

/// Inverse of [`tensor_pixels`].
pub fn pixels_tensor(pixels: &[u8], shape: &[usize]) -> Result<Tensor> {
    Tensor::new(shape, pixels.iter().map(|&p| p as f32 / 256.0).collect())
}
