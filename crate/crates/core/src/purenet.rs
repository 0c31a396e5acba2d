//! Patch decoders: per-patch upsampling, optional full-frame refinement.
//!
//! Weights live in two stores so stage-wise training can freeze the
//! upsampling stack while the refinement keeps learning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{mosaic, ActKind, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::model::Mode;
use crate::norm::{update_moving_stats, BatchNormState, BatchStats, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::ops::{ConvGeom, ConvTransposeGeom};
use crate::tensor::Tensor;
use crate::topology::{DecoderVariant, PurenetConfig};

/// Store tag of the upsampling stack.
pub const UPSAMPLING_STORE: u32 = 1;
/// Store tag of the refinement stack (and the BBD head).
pub const REFINEMENT_STORE: u32 = 2;

/// Convolution + batch norm + ReLU.
#[derive(Clone, Debug, PartialEq)]
struct Cbr {
    name: String,
    weight: ParamId,
    kernel: usize,
    transpose: bool,
    gamma: ParamId,
    beta: ParamId,
    moving_mean: Vec<f32>,
    moving_var: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    config: PurenetConfig,
    code_bits: usize,
    pu_store: ParamStore,
    re_store: ParamStore,
    blocks: Vec<Cbr>,
    pu: Vec<usize>,
    entry: Option<usize>,
    rc: Vec<[usize; 2]>,
    up: usize,
    rc_final: [usize; 2],
    branches: [usize; 2],
    bbd_up: usize,
    rgb_weight: ParamId,
    rgb_bias: ParamId,
}

/// Batch statistics gathered by a training pass, keyed by block.
#[derive(Clone, Debug, Default)]
pub struct DecoderStats(Vec<(usize, BatchStats)>);

/// Normalization mode of each half of the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderMode {
    pub upsampling: Mode,
    pub refinement: Mode,
}

impl DecoderMode {
    pub const TRAIN: DecoderMode = DecoderMode {
        upsampling: Mode::Train,
        refinement: Mode::Train,
    };
    pub const EVAL: DecoderMode = DecoderMode {
        upsampling: Mode::Eval,
        refinement: Mode::Eval,
    };
}

struct Builder<'a> {
    rng: ChaCha8Rng,
    blocks: &'a mut Vec<Cbr>,
}

impl Builder<'_> {
    fn cbr(&mut self, store: &mut ParamStore, name: &str, kernel: usize, cin: usize, cout: usize, transpose: bool) -> usize {
        let a = (3.0 / (kernel * kernel * cin) as f32).sqrt();
        let w = Tensor::from_fn(&[kernel, kernel, cin, cout], |_| self.rng.random_range(-a..a));
        let cbr = Cbr {
            name: name.to_string(),
            weight: store.add(format!("{name}.weight"), w),
            kernel,
            transpose,
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[cout], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[cout])),
            moving_mean: vec![0.0; cout],
            moving_var: vec![1.0; cout],
        };
        self.blocks.push(cbr);
        self.blocks.len() - 1
    }
}

impl Decoder {
    /// Builds a decoder for codes of `code_bits` bits.
    pub fn new(config: PurenetConfig, code_bits: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if code_bits == 0 {
            return Err(Error::config("decoder needs a non-empty code"));
        }
        let mut pu_store = ParamStore::new(UPSAMPLING_STORE);
        let mut re_store = ParamStore::new(REFINEMENT_STORE);
        let mut blocks = Vec::new();
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            blocks: &mut blocks,
        };
        let mut cin = code_bits;
        let mut pu = Vec::new();
        for (i, &c) in config.pu_channels.iter().enumerate() {
            pu.push(b.cbr(&mut pu_store, &format!("pu{}", i + 1), 3, cin, c, true));
            cin = c;
        }
        let pu_out = cin;
        let n = config.n_feature;
        // Refinement blocks exist for every variant so PI and PURENET weights
        // are interchangeable; BBD keeps its own head next to them.
        let entry = (pu_out != n).then(|| b.cbr(&mut re_store, "re.entry", 1, pu_out, n, false));
        let mut rc = Vec::new();
        for i in 0..config.rc_blocks {
            rc.push([
                b.cbr(&mut re_store, &format!("re.rc{}.a", i + 1), 3, n, n, false),
                b.cbr(&mut re_store, &format!("re.rc{}.b", i + 1), 3, 2 * n, n, false),
            ]);
        }
        let up = b.cbr(&mut re_store, "re.up", 3, n, n, true);
        let rc_final = [
            b.cbr(&mut re_store, "re.rc_final.a", 3, n, n, false),
            b.cbr(&mut re_store, "re.rc_final.b", 3, 2 * n, n, false),
        ];
        let branches = [
            b.cbr(&mut re_store, "re.branch_value", 1, n, n, false),
            b.cbr(&mut re_store, "re.branch_weight", 1, n, n, false),
        ];
        let bbd_up = b.cbr(&mut re_store, "bbd.up", 3, pu_out, n, true);
        let a = (3.0 / n as f32).sqrt();
        let rgb = Tensor::from_fn(&[1, 1, n, 3], |_| b.rng.random_range(-a..a));
        let rgb_weight = re_store.add("rgb.weight", rgb);
        let rgb_bias = re_store.add("rgb.bias", Tensor::full(&[3], 0.5));
        Ok(Decoder {
            config,
            code_bits,
            pu_store,
            re_store,
            blocks,
            pu,
            entry,
            rc,
            up,
            rc_final,
            branches,
            bbd_up,
            rgb_weight,
            rgb_bias,
        })
    }

    pub fn config(&self) -> &PurenetConfig {
        &self.config
    }

    pub fn variant(&self) -> DecoderVariant {
        self.config.variant
    }

    pub fn code_bits(&self) -> usize {
        self.code_bits
    }

    pub fn patch_size(&self) -> usize {
        self.config.patch_size
    }

    /// Same weights, different variant. PI and PURENET share every block.
    pub fn with_variant(mut self, variant: DecoderVariant) -> Self {
        self.config.variant = variant;
        self
    }

    pub fn upsampling_params(&self) -> &ParamStore {
        &self.pu_store
    }

    pub fn refinement_params(&self) -> &ParamStore {
        &self.re_store
    }

    pub fn store_mut(&mut self, tag: u32) -> &mut ParamStore {
        if tag == UPSAMPLING_STORE {
            &mut self.pu_store
        } else {
            &mut self.re_store
        }
    }

    /// Both stores at once, for a joint optimizer step.
    pub fn stores_mut(&mut self) -> (&mut ParamStore, &mut ParamStore) {
        (&mut self.pu_store, &mut self.re_store)
    }

    pub fn store(&self, tag: u32) -> &ParamStore {
        if tag == UPSAMPLING_STORE {
            &self.pu_store
        } else {
            &self.re_store
        }
    }

    /// Parameter ids the current variant actually uses.
    pub fn used_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        let push_block = |i: usize, ids: &mut Vec<ParamId>| {
            let c = &self.blocks[i];
            ids.extend([c.weight, c.gamma, c.beta]);
        };
        for &i in &self.pu {
            push_block(i, &mut ids);
        }
        match self.config.variant {
            DecoderVariant::BlockBased => push_block(self.bbd_up, &mut ids),
            _ => {
                for i in self.refinement_blocks() {
                    push_block(i, &mut ids);
                }
            }
        }
        ids.extend([self.rgb_weight, self.rgb_bias]);
        ids
    }

    fn refinement_blocks(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.entry.into_iter().collect();
        v.extend(self.rc.iter().flatten());
        v.push(self.up);
        v.extend(self.rc_final);
        v.extend(self.branches);
        v
    }

    fn params_of(&self, id: ParamId) -> &ParamStore {
        self.store(id.store)
    }

    fn cbr(&self, g: &mut Graph, i: usize, x: Var, mode: Mode, stats: &mut DecoderStats) -> Result<Var> {
        let c = &self.blocks[i];
        let store = self.params_of(c.weight);
        let w = g.param(store, c.weight);
        let y = if c.transpose {
            g.conv_transpose2d(x, w, ConvTransposeGeom::upsample2())?
        } else {
            g.conv2d(x, w, ConvGeom::same(c.kernel))?
        };
        let y = match mode {
            Mode::Train => {
                let gm = g.param(store, c.gamma);
                let bt = g.param(store, c.beta);
                let (y, st) = g.batch_norm(y, gm, bt, DEFAULT_EPS)?;
                stats.0.push((i, st));
                y
            }
            Mode::Eval => {
                let bn = self.bn_state(i);
                g.channel_affine(y, bn.folded_scale(), &bn.folded_offset())?
            }
        };
        Ok(g.activation(y, ActKind::Relu))
    }

    fn bn_state(&self, i: usize) -> BatchNormState {
        let c = &self.blocks[i];
        let store = self.params_of(c.gamma);
        BatchNormState {
            gamma: store.get(c.gamma).data().to_vec(),
            beta: store.get(c.beta).data().to_vec(),
            moving_mean: c.moving_mean.clone(),
            moving_var: c.moving_var.clone(),
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    fn rc_block(&self, g: &mut Graph, pair: [usize; 2], x: Var, mode: Mode, stats: &mut DecoderStats) -> Result<Var> {
        let h1 = self.cbr(g, pair[0], x, mode, stats)?;
        let cat = g.concat(x, h1)?;
        let h2 = self.cbr(g, pair[1], cat, mode, stats)?;
        g.add(x, h2)
    }

    /// Upsamples codes `[N, bits]` to `[N, p/2, p/2, c]`.
    pub fn upsample(&self, g: &mut Graph, codes: Var, mode: Mode, stats: &mut DecoderStats) -> Result<Var> {
        let shape = g.value(codes).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.code_bits {
            return Err(Error::shape(format!(
                "decoder expects codes [N, {}], got {shape:?}",
                self.code_bits
            )));
        }
        let mut h = g.reshape(codes, &[shape[0], 1, 1, self.code_bits])?;
        for &i in &self.pu {
            h = self.cbr(g, i, h, mode, stats)?;
        }
        Ok(h)
    }

    /// Refines a half-resolution feature map to full-resolution RGB.
    pub fn refine(&self, g: &mut Graph, x: Var, mode: Mode, stats: &mut DecoderStats) -> Result<Var> {
        let mut h = match self.entry {
            Some(i) => self.cbr(g, i, x, mode, stats)?,
            None => x,
        };
        for pair in &self.rc {
            h = self.rc_block(g, *pair, h, mode, stats)?;
        }
        h = self.cbr(g, self.up, h, mode, stats)?;
        h = self.rc_block(g, self.rc_final, h, mode, stats)?;
        let value = self.cbr(g, self.branches[0], h, mode, stats)?;
        let weight = self.cbr(g, self.branches[1], h, mode, stats)?;
        let weight = g.softmax_channels(weight);
        let prod = g.mul(value, weight)?;
        self.project_rgb(g, prod)
    }

    fn project_rgb(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.re_store, self.rgb_weight);
        let b = g.param(&self.re_store, self.rgb_bias);
        let y = g.conv2d(x, w, ConvGeom::same(1))?;
        g.bias_add(y, b)
    }

    /// Decodes codes of `frames` images of `rows × cols` patches each
    /// (row-major per frame) into `[frames, rows·p, cols·p, 3]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        codes: Var,
        rows: usize,
        cols: usize,
        mode: DecoderMode,
        stats: &mut DecoderStats,
    ) -> Result<Var> {
        let patches = self.upsample(g, codes, mode.upsampling, stats)?;
        match self.config.variant {
            DecoderVariant::Purenet => {
                let frame = g.mosaic(patches, rows, cols)?;
                self.refine(g, frame, mode.refinement, stats)
            }
            DecoderVariant::PatchIndependent => {
                let out = self.refine(g, patches, mode.refinement, stats)?;
                g.mosaic(out, rows, cols)
            }
            DecoderVariant::BlockBased => {
                let h = self.cbr(g, self.bbd_up, patches, mode.refinement, stats)?;
                let out = self.bbd_rgb(g, h)?;
                g.mosaic(out, rows, cols)
            }
        }
    }

    fn bbd_rgb(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.project_rgb(g, x)
    }

    /// Evaluation-mode decode, clamped to `[0, 1]`.
    pub fn decode(&self, codes: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let c = g.input(codes.clone());
        let out = self.forward(&mut g, c, rows, cols, DecoderMode::EVAL, &mut DecoderStats::default())?;
        Ok(g.take_value(out).map(|v| v.clamp(0.0, 1.0)))
    }

    /// Evaluation-mode upsampling output, before aggregation.
    pub fn upsample_eval(&self, codes: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let c = g.input(codes.clone());
        let out = self.upsample(&mut g, c, Mode::Eval, &mut DecoderStats::default())?;
        Ok(g.take_value(out))
    }

    pub fn apply_batch_stats(&mut self, stats: &DecoderStats) {
        for (i, st) in &stats.0 {
            let mut bn = self.bn_state(*i);
            update_moving_stats(&mut bn, st);
            let c = &mut self.blocks[*i];
            c.moving_mean = bn.moving_mean;
            c.moving_var = bn.moving_var;
        }
    }

    /// Every tensor of the decoder by name, moving statistics included.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for store in [&self.pu_store, &self.re_store] {
            for id in store.ids() {
                out.push((store.name(id).to_string(), store.get(id).clone()));
            }
        }
        for c in &self.blocks {
            let n = c.moving_mean.len();
            out.push((format!("{}.moving_mean", c.name), Tensor::new(&[n], c.moving_mean.clone()).unwrap()));
            out.push((format!("{}.moving_var", c.name), Tensor::new(&[n], c.moving_var.clone()).unwrap()));
        }
        out
    }

    /// Overwrites tensors from [`Decoder::named_tensors`] output; every
    /// tensor must be present with a matching shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let lookup = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::format(format!("decoder tensor `{name}` missing")))
        };
        let check = |t: &Tensor, want: &Tensor, name: &str| {
            if t.shape() != want.shape() {
                Err(Error::format(format!(
                    "decoder tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    want.shape()
                )))
            } else {
                Ok(t.clone())
            }
        };
        for store in [&mut self.pu_store, &mut self.re_store] {
            let ids: Vec<ParamId> = store.ids().collect();
            for id in ids {
                let name = store.name(id).to_string();
                let t = check(lookup(&name)?, store.get(id), &name)?;
                *store.get_mut(id) = t;
            }
        }
        for c in &mut self.blocks {
            for (suffix, slot) in [("moving_mean", &mut c.moving_mean), ("moving_var", &mut c.moving_var)] {
                let name = format!("{}.{suffix}", c.name);
                let t = lookup(&name)?;
                if t.len() != slot.len() {
                    return Err(Error::format(format!("decoder tensor `{name}` has wrong length")));
                }
                *slot = t.data().to_vec();
            }
        }
        Ok(())
    }
}

/// Mean-patch baseline: every patch replaced by its per-channel mean.
pub fn mean_patch_baseline(frames: &Tensor, patch: usize) -> Result<Tensor> {
    let [n, h, w, c] = frames.dims4()?;
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!("{h}x{w} is not a multiple of {patch}")));
    }
    let mut out = frames.clone();
    let data = frames.data();
    let o = out.data_mut();
    for b in 0..n {
        for pr in 0..h / patch {
            for pc in 0..w / patch {
                let mut mean = vec![0.0f64; c];
                for y in 0..patch {
                    for x in 0..patch {
                        let base = ((b * h + pr * patch + y) * w + pc * patch + x) * c;
                        for (ch, m) in mean.iter_mut().enumerate() {
                            *m += data[base + ch] as f64;
                        }
                    }
                }
                for m in &mut mean {
                    *m /= (patch * patch) as f64;
                }
                for y in 0..patch {
                    for x in 0..patch {
                        let base = ((b * h + pr * patch + y) * w + pc * patch + x) * c;
                        for (ch, m) in mean.iter().enumerate() {
                            o[base + ch] = *m as f32;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Reassembles per-patch outputs; exposed for callers that decode patches
/// one at a time.
pub fn tile_patches(patches: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    mosaic(patches, rows, cols)
}
