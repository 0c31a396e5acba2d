//! The trainable encoder + classifier.
//!
//! [`Nqe`] pairs a [`Topology`] with real-valued proxy weights, per-layer
//! quantizers and normalization state. The forward pass always runs on the
//! deployed (quantized) weights; proxies only receive gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ActKind, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::norm::{fold_to_bsn, update_moving_stats, BatchNormState, BatchStats, BsnScale, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::ops::{shuffled_channel, ConvGeom};
use crate::quant::{calibrate, QuantizerSpec, WeightQuantizer};
use crate::tensor::Tensor;
use crate::topology::{topology, LayerKind, LayerSpec, ModelConfig, Topology, WeightPrecision};

/// Parameter-store tag of encoder weights.
pub const ENCODER_STORE: u32 = 0;

/// Normalization of one layer: batch statistics before folding, a bit shift
/// after.
#[derive(Clone, Debug, PartialEq)]
pub enum NormState {
    Batch {
        gamma: ParamId,
        beta: ParamId,
        moving_mean: Vec<f32>,
        moving_var: Vec<f32>,
        eps: f32,
        momentum: f32,
    },
    Shift(BsnScale),
}

/// Per-layer state, parallel to the topology's layer list.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerState {
    Stateless,
    Weights { weight: ParamId, quantizer: WeightQuantizer },
    /// Fixed `±1` projection regenerated from its seed.
    Fixed { matrix: Tensor },
    Bias { bias: ParamId },
    Norm(NormState),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, moving averages updated by the caller.
    Train,
    /// Stored statistics or bit shifts.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Output {
    /// Binary code at the end of the encoder.
    Code,
    /// Classifier scores.
    Logits,
}

/// Quantizer calibration result of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerLog {
    pub layer: String,
    pub n_levels: u8,
    pub delta: f64,
    pub tau: f64,
}

/// Outcome of folding one normalization layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldLog {
    pub layer: String,
    pub shift_exp: i32,
    pub source_quantile: f64,
    pub flipped_channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Nqe {
    config: ModelConfig,
    topo: Topology,
    params: ParamStore,
    state: Vec<LayerState>,
}

/// Fixed seeded `±1` matrix of shape `[fan_in, out]`.
pub fn rademacher_matrix(seed: u64, fan_in: usize, out: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[fan_in, out], |_| if rng.random::<bool>() { 1.0 } else { -1.0 })
}

/// Rounds a bias onto the first layer's accumulator grid as a 16-bit integer.
pub fn bias_to_fixed(b: f32, exponent: i32) -> i32 {
    let scaled = (b as f64 * 2f64.powi(-exponent)).round();
    scaled.clamp(i16::MIN as f64, i16::MAX as f64) as i32
}

fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = (3.0 / fan_in as f32).sqrt().min(1.0);
    Tensor::from_fn(shape, |_| rng.random_range(-a..a))
}

impl Nqe {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let topo = topology(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(ENCODER_STORE);
        let mut state = Vec::with_capacity(topo.layers.len());
        for layer in &topo.layers {
            let s = match layer.kind {
                LayerKind::Rademacher { seed } => LayerState::Fixed {
                    matrix: rademacher_matrix(seed, layer.input_units(), layer.output[2]),
                },
                LayerKind::Conv { .. } | LayerKind::Depthwise { .. } | LayerKind::Dense => {
                    let shape = layer.weight_shape().expect("weighted layer");
                    let w = init_uniform(&shape, layer.fan_in(), &mut rng);
                    let precision = layer.weight.expect("weighted layer has a precision");
                    let quantizer = match precision {
                        WeightPrecision::Binary => WeightQuantizer::Binary,
                        p => WeightQuantizer::Linear(calibrate(w.data(), p.levels() as usize, None)?),
                    };
                    LayerState::Weights {
                        weight: params.add(layer.name.clone(), w),
                        quantizer,
                    }
                }
                LayerKind::Bias => LayerState::Bias {
                    bias: params.add(layer.name.clone(), Tensor::zeros(&[layer.output[2]])),
                },
                LayerKind::Norm => {
                    let c = layer.output[2];
                    LayerState::Norm(NormState::Batch {
                        gamma: params.add(format!("{}.gamma", layer.name), Tensor::full(&[c], 1.0)),
                        beta: params.add(format!("{}.beta", layer.name), Tensor::zeros(&[c])),
                        moving_mean: vec![0.0; c],
                        moving_var: vec![1.0; c],
                        eps: DEFAULT_EPS,
                        momentum: DEFAULT_MOMENTUM,
                    })
                }
                _ => LayerState::Stateless,
            };
            state.push(s);
        }
        Ok(Nqe {
            config,
            topo,
            params,
            state,
        })
    }

    /// Reassembles a model from stored parts (used by the weights file).
    pub fn from_parts(config: ModelConfig, params: ParamStore, state: Vec<LayerState>) -> Result<Self> {
        let topo = topology(&config)?;
        if state.len() != topo.layers.len() {
            return Err(Error::format(format!(
                "{} layer states for {} layers",
                state.len(),
                topo.layers.len()
            )));
        }
        Ok(Nqe {
            config,
            topo,
            params,
            state,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layer_state(&self, i: usize) -> &LayerState {
        &self.state[i]
    }

    pub fn layer_states(&self) -> &[LayerState] {
        &self.state
    }

    /// True once every normalization has been replaced by a bit shift.
    pub fn is_folded(&self) -> bool {
        self.state
            .iter()
            .all(|s| !matches!(s, LayerState::Norm(NormState::Batch { .. })))
    }

    /// Batch-normalization state of layer `i`, if it still has one.
    pub fn batch_norm_state(&self, i: usize) -> Option<BatchNormState> {
        match &self.state[i] {
            LayerState::Norm(NormState::Batch {
                gamma,
                beta,
                moving_mean,
                moving_var,
                eps,
                momentum,
            }) => Some(BatchNormState {
                gamma: self.params.get(*gamma).data().to_vec(),
                beta: self.params.get(*beta).data().to_vec(),
                moving_mean: moving_mean.clone(),
                moving_var: moving_var.clone(),
                eps: *eps,
                momentum: *momentum,
            }),
            _ => None,
        }
    }

    /// Deployed weights of layer `i`.
    pub fn quantized_weight(&self, i: usize) -> Option<Tensor> {
        match &self.state[i] {
            LayerState::Weights { weight, quantizer } => {
                Some(self.params.get(*weight).map(|w| quantizer.apply_scalar(w)))
            }
            LayerState::Fixed { matrix } => Some(matrix.clone()),
            _ => None,
        }
    }

    /// First-layer bias as 16-bit integers on the accumulator grid.
    pub fn fixed_bias(&self) -> Option<Vec<i32>> {
        let e = self.config.first_layer_exponent();
        self.state.iter().find_map(|s| match s {
            LayerState::Bias { bias } => Some(self.params.get(*bias).data().iter().map(|&b| bias_to_fixed(b, e)).collect()),
            _ => None,
        })
    }

    /// Records the forward pass of `x` (NHWC, values `p/256`). Returns the
    /// output and, in train mode, the batch statistics of every normalization
    /// layer for [`Nqe::apply_batch_stats`].
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        output: Output,
    ) -> Result<(Var, Vec<(usize, BatchStats)>)> {
        let (layers, stats) = self.forward_layers(g, x, mode, output)?;
        Ok((*layers.last().unwrap_or(&x), stats))
    }

    /// Like [`Nqe::forward`], returning the output of every layer.
    pub fn forward_layers(
        &self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        output: Output,
    ) -> Result<(Vec<Var>, Vec<(usize, BatchStats)>)> {
        let end = match output {
            Output::Code => self.topo.encoder_len,
            Output::Logits => self.topo.layers.len(),
        };
        let s = self.config.input_size;
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1..] != [s, s, 3] {
            return Err(Error::shape(format!("encoder expects [N, {s}, {s}, 3], got {shape:?}")));
        }
        let mut stats = Vec::new();
        let mut outputs = Vec::with_capacity(end);
        let mut h = x;
        let bias_exp = self.config.first_layer_exponent();
        for (i, (layer, st)) in self.topo.layers[..end].iter().zip(&self.state).enumerate() {
            h = match (&layer.kind, st) {
                (LayerKind::Conv { kernel, groups }, LayerState::Weights { weight, quantizer }) => {
                    let w = g.param(&self.params, *weight);
                    let wq = g.weight_quant(w, quantizer);
                    g.conv2d(h, wq, ConvGeom::same(*kernel).grouped(*groups, *groups > 1))?
                }
                (LayerKind::Depthwise { kernel }, LayerState::Weights { weight, quantizer }) => {
                    let w = g.param(&self.params, *weight);
                    let wq = g.weight_quant(w, quantizer);
                    let geom = ConvGeom::square(*kernel, 0).grouped(layer.input[2], false);
                    g.conv2d(h, wq, geom)?
                }
                (LayerKind::Dense, LayerState::Weights { weight, quantizer }) => {
                    let w = g.param(&self.params, *weight);
                    let wq = g.weight_quant(w, quantizer);
                    g.dense(h, wq)?
                }
                (LayerKind::Rademacher { .. }, LayerState::Fixed { matrix }) => {
                    let w = g.input(matrix.clone());
                    g.dense(h, w)?
                }
                (LayerKind::Bias, LayerState::Bias { bias }) => {
                    let b = g.param(&self.params, *bias);
                    let scale = 2f32.powi(bias_exp);
                    let bq = g.straight_through(b, |v| bias_to_fixed(v, bias_exp) as f32 * scale);
                    g.bias_add(h, bq)?
                }
                (LayerKind::Norm, LayerState::Norm(norm)) => match (norm, mode) {
                    (NormState::Shift(scale), _) => g.scale(h, scale.factor()),
                    (NormState::Batch { gamma, beta, eps, .. }, Mode::Train) => {
                        let gm = g.param(&self.params, *gamma);
                        let bt = g.param(&self.params, *beta);
                        let (y, st) = g.batch_norm(h, gm, bt, *eps)?;
                        stats.push((i, st));
                        y
                    }
                    (NormState::Batch { .. }, Mode::Eval) => {
                        let bn = self.batch_norm_state(i).expect("batch state");
                        g.channel_affine(h, bn.folded_scale(), &bn.folded_offset())?
                    }
                },
                (LayerKind::Rescale3, _) => g.scale(h, 1.0 / 3.0),
                (LayerKind::Activation { kind }, _) => g.activation(h, *kind),
                (LayerKind::MaxPool2, _) => g.maxpool2(h)?,
                (LayerKind::Flatten, _) => g.flatten(h)?,
                (kind, st) => {
                    return Err(Error::format(format!(
                        "layer `{}` of kind {kind:?} has mismatched state {st:?}",
                        layer.name
                    )))
                }
            };
            outputs.push(h);
        }
        Ok((outputs, stats))
    }

    /// Folds batch statistics from a training forward pass into the moving
    /// averages.
    pub fn apply_batch_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (i, st) in stats {
            if let Some(mut bn) = self.batch_norm_state(*i) {
                update_moving_stats(&mut bn, st);
                if let LayerState::Norm(NormState::Batch {
                    moving_mean, moving_var, ..
                }) = &mut self.state[*i]
                {
                    *moving_mean = bn.moving_mean;
                    *moving_var = bn.moving_var;
                }
            }
        }
    }

    /// Evaluation-mode output of every layer up to `output`, by name.
    pub fn trace(&self, x: &Tensor, output: Output) -> Result<Vec<(String, Tensor)>> {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let (vars, _) = self.forward_layers(&mut g, xi, Mode::Eval, output)?;
        Ok(self
            .topo
            .layers
            .iter()
            .zip(vars)
            .map(|(l, v)| (l.name.clone(), g.value(v).clone()))
            .collect())
    }

    fn run_eval(&self, x: &Tensor, output: Output) -> Result<Tensor> {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let (out, _) = self.forward(&mut g, xi, Mode::Eval, output)?;
        Ok(g.take_value(out))
    }

    /// Evaluation-mode classifier scores.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.run_eval(x, Output::Logits)
    }

    /// Evaluation-mode binary codes, `[N, 4F]` in `{0, 1}`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.run_eval(x, Output::Code)
    }

    /// Re-estimates every linear quantizer from the current proxies.
    pub fn recalibrate(&mut self) -> Result<Vec<QuantizerLog>> {
        let mut logs = Vec::new();
        for (layer, st) in self.topo.layers.iter().zip(self.state.iter_mut()) {
            if let LayerState::Weights {
                weight,
                quantizer: WeightQuantizer::Linear(spec),
            } = st
            {
                let w = self.params.get(*weight);
                *spec = calibrate(w.data(), spec.n_levels() as usize, Some(spec))?;
                logs.push(QuantizerLog {
                    layer: layer.name.clone(),
                    n_levels: spec.n_levels(),
                    delta: spec.delta(),
                    tau: spec.tau(),
                });
            }
        }
        Ok(logs)
    }

    pub fn quantizer_specs(&self) -> Vec<(String, QuantizerSpec)> {
        self.topo
            .layers
            .iter()
            .zip(&self.state)
            .filter_map(|(l, s)| match s {
                LayerState::Weights {
                    quantizer: WeightQuantizer::Linear(spec),
                    ..
                } => Some((l.name.clone(), *spec)),
                _ => None,
            })
            .collect()
    }

    /// Replaces every batch normalization by its bit shift. Channels with a
    /// negative folded scale have their sign moved into the preceding
    /// weighted layer (and the first-layer bias), then quantizers are
    /// recalibrated.
    pub fn fold_normalization(&mut self) -> Result<Vec<FoldLog>> {
        let mut logs = Vec::new();
        for i in 0..self.state.len() {
            let Some(bn) = self.batch_norm_state(i) else { continue };
            let scale = fold_to_bsn(&bn)?;
            let negative = bn.negative_channels();
            if !negative.is_empty() {
                self.flip_channels(i, &negative)?;
            }
            logs.push(FoldLog {
                layer: self.topo.layers[i].name.clone(),
                shift_exp: scale.shift_exp,
                source_quantile: scale.source_quantile,
                flipped_channels: negative.len(),
            });
            self.state[i] = LayerState::Norm(NormState::Shift(scale));
        }
        self.recalibrate()?;
        Ok(logs)
    }

    fn flip_channels(&mut self, norm_index: usize, channels: &[usize]) -> Result<()> {
        let producer = (0..norm_index)
            .rev()
            .find(|&j| matches!(self.state[j], LayerState::Weights { .. } | LayerState::Fixed { .. }))
            .ok_or_else(|| Error::format("normalization without a preceding weighted layer"))?;
        let layer: LayerSpec = self.topo.layers[producer].clone();
        let LayerState::Weights { weight, .. } = self.state[producer] else {
            return Err(Error::Degenerate(format!(
                "cannot move a sign into fixed layer `{}`",
                layer.name
            )));
        };
        let cout = layer.output[2];
        let groups = match layer.kind {
            LayerKind::Conv { groups, .. } if groups > 1 => groups,
            _ => 1,
        };
        // Output channel c after the shuffle comes from weight column o.
        let column = |c: usize| {
            if groups > 1 {
                (0..cout).find(|&o| shuffled_channel(o, cout, groups) == c).unwrap()
            } else {
                c
            }
        };
        let cols: Vec<usize> = channels.iter().map(|&c| column(c)).collect();
        let w = self.params.get_mut(weight);
        for row in w.data_mut().chunks_mut(cout) {
            for &o in &cols {
                row[o] = -row[o];
            }
        }
        for j in producer + 1..norm_index {
            if let LayerState::Bias { bias } = self.state[j] {
                let b = self.params.get_mut(bias);
                for &c in channels {
                    b.data_mut()[c] = -b.data()[c];
                }
            }
        }
        Ok(())
    }

    /// Clips quantized-layer proxies to `[-1, 1]`, outside of which the
    /// straight-through gradient vanishes for good.
    pub fn clip_proxies(&mut self) {
        for st in &self.state {
            if let LayerState::Weights { weight, quantizer } = st {
                if quantizer.is_quantized() {
                    for v in self.params.get_mut(*weight).data_mut() {
                        *v = v.clamp(-1.0, 1.0);
                    }
                }
            }
        }
    }

    /// Parameters trained in the current stage: everything but the bit shifts
    /// (which have no parameters).
    pub fn trainable(&self) -> Vec<ParamId> {
        self.params.ids().collect()
    }

    /// Layers ordered index of every activation of kind `kind`.
    pub fn activations(&self, kind: ActKind) -> Vec<usize> {
        self.topo
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind == LayerKind::Activation { kind })
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::BottleneckKind;

    fn random_images(n: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, size, size, 3], |_| rng.random_range(0..256) as f32 / 256.0)
    }

    #[test]
    fn shapes_through_every_variant() {
        for bottleneck in [BottleneckKind::Lfc, BottleneckKind::Rcs, BottleneckKind::Dwconv] {
            let config = ModelConfig {
                bottleneck,
                ..ModelConfig::toy(3)
            };
            let m = Nqe::new(config, 1).unwrap();
            let x = random_images(2, 8, 2);
            assert_eq!(m.encode(&x).unwrap().shape(), &[2, 32]);
            assert_eq!(m.logits(&x).unwrap().shape(), &[2, 3]);
        }
    }

    #[test]
    fn layer_by_layer_shapes_match_topology() {
        let m = Nqe::new(ModelConfig::toy(2), 3).unwrap();
        let mut g = Graph::new();
        let x = g.input(random_images(2, 8, 4));
        let before = g.len();
        m.forward(&mut g, x, Mode::Train, Output::Logits).unwrap();
        assert!(g.len() > before);
        // Walk the topology against a fresh eval pass per prefix length.
        let out = m.logits(&random_images(1, 8, 5)).unwrap();
        assert_eq!(out.shape(), &[1, 2]);
    }

    #[test]
    fn codes_are_binary_and_rcs_is_reproducible() {
        let config = ModelConfig {
            bottleneck: BottleneckKind::Rcs,
            rcs_seed: 9,
            ..ModelConfig::toy(2)
        };
        let a = Nqe::new(config.clone(), 1).unwrap();
        let b = Nqe::new(config, 2).unwrap();
        let fixed = |m: &Nqe| {
            m.layer_states()
                .iter()
                .find_map(|s| match s {
                    LayerState::Fixed { matrix } => Some(matrix.clone()),
                    _ => None,
                })
                .unwrap()
        };
        assert_eq!(fixed(&a), fixed(&b));
        let codes = a.encode(&random_images(3, 8, 6)).unwrap();
        assert!(codes.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn rademacher_entries_balanced() {
        let m = rademacher_matrix(5, 16 * 256, 256);
        assert!(m.data().iter().all(|&v| v == 1.0 || v == -1.0));
        let mean = m.sum() / m.len() as f64;
        assert!(mean.abs() < 0.02);
    }

    #[test]
    fn eval_weights_are_on_the_grid() {
        let m = Nqe::new(ModelConfig::toy(2), 7).unwrap();
        for (i, layer) in m.topology().layers.iter().enumerate() {
            if let (Some(p), Some(w)) = (layer.weight, m.quantized_weight(i)) {
                let allowed: &[f32] = match p {
                    WeightPrecision::Quinary => &[-1.0, -0.5, 0.0, 0.5, 1.0],
                    WeightPrecision::Ternary => &[-1.0, 0.0, 1.0],
                    WeightPrecision::Binary => &[-1.0, 1.0],
                };
                assert!(w.data().iter().all(|v| allowed.contains(v)), "{}", layer.name);
            }
        }
    }

    #[test]
    fn folding_preserves_code_signs_when_offsets_vanish() {
        // With zero offsets and zero means, folding changes only positive
        // scales (and moves signs), so Sign/Heaviside outputs are unchanged.
        let mut m = Nqe::new(ModelConfig::toy(2), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ids: Vec<ParamId> = m.params().ids().collect();
        for id in ids {
            let name = m.params().name(id).to_string();
            if name.ends_with(".gamma") {
                let t = m.params_mut().get_mut(id);
                for v in t.data_mut() {
                    *v = if rng.random::<bool>() { 1.0 } else { -1.0 } * rng.random_range(0.5f32..2.0);
                }
            }
        }
        let x = random_images(4, 8, 9);
        // Only layers feeding Sign/Heaviside are sign-equivalent; compare the
        // first block's sign output.
        let first_block = |m: &Nqe| {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let mut h = xi;
            let (out, _) = {
                // Run the first four layers by hand.
                let w = m.quantized_weight(0).unwrap();
                let wv = g.input(w);
                h = g.conv2d(h, wv, ConvGeom::same(3)).unwrap();
                let bias: Vec<f32> = m
                    .fixed_bias()
                    .unwrap()
                    .iter()
                    .map(|&b| b as f32 * 2f32.powi(m.config().first_layer_exponent()))
                    .collect();
                let b = g.input(Tensor::new(&[bias.len()], bias).unwrap());
                h = g.bias_add(h, b).unwrap();
                let scale: Vec<f32> = match m.batch_norm_state(2) {
                    Some(bn) => bn.folded_scale(),
                    None => vec![1.0; 8],
                };
                h = g.channel_affine(h, scale, &[0.0; 8]).unwrap();
                (g.activation(h, ActKind::Sign), ())
            };
            g.take_value(out)
        };
        let before = first_block(&m);
        let logs = m.fold_normalization().unwrap();
        assert!(logs.iter().any(|l| l.flipped_channels > 0));
        assert!(m.is_folded());
        let after = first_block(&m);
        let mismatches = before.data().iter().zip(after.data()).filter(|(a, b)| a != b).count();
        // Recalibration may move a few quinary weights across thresholds.
        assert!(mismatches * 20 < before.len(), "{mismatches} of {}", before.len());
    }

    #[test]
    fn recalibration_is_deterministic() {
        let mut m = Nqe::new(ModelConfig::toy(2), 10).unwrap();
        let a = m.recalibrate().unwrap();
        let b = m.recalibrate().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn bias_fixed_point() {
        assert_eq!(bias_to_fixed(0.5, -9), 256);
        assert_eq!(bias_to_fixed(-1e9, -9), i16::MIN as i32);
        assert_eq!(bias_to_fixed(1.0 / 1024.0, -9), 1);
    }
}
