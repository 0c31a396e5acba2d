//! Declarative encoder/classifier topology.
//!
//! [`topology`] expands a [`ModelConfig`] into the flat list of layers shared
//! by the trainable model, the integer lowering and the cost model.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::ActKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightPrecision {
    Quinary,
    Ternary,
    Binary,
}

impl WeightPrecision {
    /// Bits per weight under naive encoding.
    pub fn bits(self) -> u8 {
        match self {
            WeightPrecision::Quinary => 3,
            WeightPrecision::Ternary => 2,
            WeightPrecision::Binary => 1,
        }
    }

    pub fn levels(self) -> u8 {
        match self {
            WeightPrecision::Quinary => 5,
            WeightPrecision::Ternary => 3,
            WeightPrecision::Binary => 2,
        }
    }

    /// Entropy bitwidth `log2(levels)`.
    pub fn entropy_bits(self) -> f64 {
        (self.levels() as f64).log2()
    }

    /// Exponent of the deployed value grid: quinary values are `code/2`.
    pub fn exponent(self) -> i32 {
        match self {
            WeightPrecision::Quinary => -1,
            _ => 0,
        }
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        match bits {
            3 => Ok(WeightPrecision::Quinary),
            2 => Ok(WeightPrecision::Ternary),
            1 => Ok(WeightPrecision::Binary),
            _ => Err(Error::config(format!("no weight precision with {bits} bits"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BottleneckKind {
    /// One dense layer from the flattened feature map.
    Lfc,
    /// Fixed seeded Rademacher projection followed by a square dense layer.
    Rcs,
    /// Depthwise spatial collapse followed by a square dense layer.
    Dwconv,
}

impl std::str::FromStr for BottleneckKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lfc" => Ok(BottleneckKind::Lfc),
            "rcs" | "rcs_fc" | "rcs+fc" => Ok(BottleneckKind::Rcs),
            "dwconv" | "dwconv_fc" | "dwconv+fc" => Ok(BottleneckKind::Dwconv),
            other => Err(Error::config(format!("unknown bottleneck `{other}`"))),
        }
    }
}

impl fmt::Display for BottleneckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BottleneckKind::Lfc => "LFC",
            BottleneckKind::Rcs => "RCS+FC",
            BottleneckKind::Dwconv => "DWConv+FC",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Quinary/ternary/binary weights with HWMSB activations.
    Mixed,
    /// Binary weights and activations everywhere after the input.
    Binary,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mixed" => Ok(Precision::Mixed),
            "binary" => Ok(Precision::Binary),
            other => Err(Error::config(format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    /// Per-patch upsampling, patch aggregation, full-frame refinement.
    Purenet,
    /// Upsampling and refinement per patch, no aggregation.
    PatchIndependent,
    /// Upsampling plus one extra upsampling block per patch.
    BlockBased,
}

impl std::str::FromStr for DecoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "purenet" => Ok(DecoderVariant::Purenet),
            "pi" | "pi_purenet" | "pi-purenet" | "patch_independent" => Ok(DecoderVariant::PatchIndependent),
            "bbd" | "block_based" => Ok(DecoderVariant::BlockBased),
            other => Err(Error::config(format!("unknown decoder variant `{other}`"))),
        }
    }
}

/// Decoder hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurenetConfig {
    /// Refinement width.
    pub n_feature: usize,
    /// Output channels of each stride-2 upsampling block.
    pub pu_channels: Vec<usize>,
    /// Residual-concatenation blocks before the final upsampling.
    pub rc_blocks: usize,
    pub variant: DecoderVariant,
    /// Side of the square image patch one code describes.
    pub patch_size: usize,
}

impl Default for PurenetConfig {
    fn default() -> Self {
        PurenetConfig {
            n_feature: 32,
            pu_channels: vec![128, 64, 32, 32],
            rc_blocks: 3,
            variant: DecoderVariant::Purenet,
            patch_size: 32,
        }
    }
}

impl PurenetConfig {
    /// Small decoder for 8×8 patches.
    pub fn toy() -> Self {
        PurenetConfig {
            n_feature: 8,
            pu_channels: vec![16, 8],
            rc_blocks: 1,
            variant: DecoderVariant::Purenet,
            patch_size: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 4 || !self.patch_size.is_power_of_two() {
            return Err(Error::config(format!(
                "patch size must be a power of two >= 4, got {}",
                self.patch_size
            )));
        }
        // The upsampling stack takes a 1×1 code to half the patch size.
        let stages = (self.patch_size / 2).trailing_zeros() as usize;
        if self.pu_channels.len() != stages {
            return Err(Error::config(format!(
                "{} upsampling stages cannot raise 1x1 to {}x{}; need {stages}",
                self.pu_channels.len(),
                self.patch_size / 2,
                self.patch_size / 2
            )));
        }
        if self.n_feature == 0 || self.pu_channels.contains(&0) {
            return Err(Error::config("decoder widths must be positive"));
        }
        if self.rc_blocks == 0 {
            return Err(Error::config("refinement needs at least one RC block"));
        }
        Ok(())
    }
}

/// Encoder (+ classifier) configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature-map scale: channels of the first convolution module.
    pub f: usize,
    /// Group count of the last convolution.
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default = "default_bottleneck")]
    pub bottleneck: BottleneckKind,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    /// Side of the square RGB input.
    #[serde(default = "default_input")]
    pub input_size: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Seed of the fixed Rademacher projection.
    #[serde(default)]
    pub rcs_seed: u64,
    #[serde(default)]
    pub decoder: Option<PurenetConfig>,
}

fn default_groups() -> usize {
    4
}
fn default_bottleneck() -> BottleneckKind {
    BottleneckKind::Dwconv
}
fn default_precision() -> Precision {
    Precision::Mixed
}
fn default_input() -> usize {
    32
}
fn default_classes() -> usize {
    10
}

impl ModelConfig {
    /// The full configuration at scale `f`.
    pub fn full(f: usize) -> Self {
        ModelConfig {
            f,
            groups: 4,
            bottleneck: BottleneckKind::Dwconv,
            precision: Precision::Mixed,
            input_size: 32,
            classes: 10,
            rcs_seed: 0,
            decoder: None,
        }
    }

    /// Desk-scale configuration: `F = 8` on 8×8 inputs.
    pub fn toy(classes: usize) -> Self {
        ModelConfig {
            f: 8,
            input_size: 8,
            classes,
            ..Self::full(8)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.f < 8 || !self.f.is_multiple_of(4) {
            return Err(Error::config(format!("F must be >= 8 and divisible by 4, got {}", self.f)));
        }
        if self.groups == 0 || !(4 * self.f).is_multiple_of(self.groups) {
            return Err(Error::config(format!(
                "4F = {} channels are not divisible by {} groups",
                4 * self.f,
                self.groups
            )));
        }
        if self.input_size < 8 || !self.input_size.is_multiple_of(8) {
            return Err(Error::config(format!(
                "input size must be a positive multiple of 8, got {}",
                self.input_size
            )));
        }
        if self.classes < 2 {
            return Err(Error::config("a classifier needs at least two classes"));
        }
        if let Some(d) = &self.decoder {
            d.validate()?;
            if d.patch_size != self.input_size {
                return Err(Error::config(format!(
                    "decoder patch size {} differs from encoder input {}",
                    d.patch_size, self.input_size
                )));
            }
        }
        Ok(())
    }

    /// Length of the binary code emitted per patch.
    pub fn code_bits(&self) -> usize {
        4 * self.f
    }

    /// Exponent of the first layer's accumulator (input grid times weight grid).
    pub fn first_layer_exponent(&self) -> i32 {
        INPUT_EXPONENT + self.first_precision().exponent()
    }

    fn first_precision(&self) -> WeightPrecision {
        match self.precision {
            Precision::Mixed => WeightPrecision::Quinary,
            Precision::Binary => WeightPrecision::Binary,
        }
    }
}

/// 8-bit pixels enter as `p · 2^-8`.
pub const INPUT_EXPONENT: i32 = -8;
pub const INPUT_BITS: u8 = 8;

/// Layer operation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerKind {
    /// Stride-1 "same" convolution, optionally grouped with channel shuffle.
    Conv { kernel: usize, groups: usize },
    /// Valid per-channel convolution collapsing the spatial extent.
    Depthwise { kernel: usize },
    Dense,
    /// Fixed `±1` projection regenerated from a seed.
    Rademacher { seed: u64 },
    Bias,
    /// Batch normalization during stage 1, bit shift afterwards.
    Norm,
    /// Multiplication by 1/3 turning HWMSB codes back into values.
    Rescale3,
    Activation { kind: ActKind },
    MaxPool2,
    Flatten,
}

/// One layer with its shapes and precisions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Input `[H, W, C]` (`H = W = 1` after flattening).
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub weight: Option<WeightPrecision>,
    /// Bits of the activations this layer consumes.
    pub input_bits: u8,
}

impl LayerSpec {
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        let cin = self.input[2];
        let cout = self.output[2];
        match self.kind {
            LayerKind::Conv { kernel, groups } => Some(vec![kernel, kernel, cin / groups, cout]),
            LayerKind::Depthwise { kernel } => Some(vec![kernel, kernel, 1, cout]),
            LayerKind::Dense | LayerKind::Rademacher { .. } => Some(vec![self.input_units(), cout]),
            _ => None,
        }
    }

    pub fn input_units(&self) -> usize {
        self.input.iter().product()
    }

    /// Multiply-accumulates per sample.
    pub fn macs(&self) -> u64 {
        let [oh, ow, cout] = self.output;
        match self.kind {
            LayerKind::Conv { kernel, groups } => {
                (oh * ow * kernel * kernel * (self.input[2] / groups) * cout) as u64
            }
            LayerKind::Depthwise { kernel } => (oh * ow * kernel * kernel * cout) as u64,
            LayerKind::Dense | LayerKind::Rademacher { .. } => (self.input_units() * cout) as u64,
            _ => 0,
        }
    }

    pub fn param_count(&self) -> u64 {
        match self.kind {
            LayerKind::Rademacher { .. } => 0,
            _ => self.weight_shape().map_or(0, |s| s.iter().product::<usize>() as u64),
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv { kernel, groups } => kernel * kernel * self.input[2] / groups,
            LayerKind::Depthwise { kernel } => kernel * kernel,
            LayerKind::Dense | LayerKind::Rademacher { .. } => self.input_units(),
            _ => 0,
        }
    }

    pub fn is_weighted(&self) -> bool {
        self.weight_shape().is_some()
    }
}

/// Where the encoder ends and the classifier begins.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub layers: Vec<LayerSpec>,
    /// Number of leading layers forming the encoder (through the code
    /// activation).
    pub encoder_len: usize,
}

struct Builder {
    layers: Vec<LayerSpec>,
    shape: [usize; 3],
    bits: u8,
}

impl Builder {
    fn push(&mut self, name: &str, kind: LayerKind, out_c: usize, weight: Option<WeightPrecision>) {
        let [h, w, c] = self.shape;
        let output = match kind {
            LayerKind::Conv { .. } => [h, w, out_c],
            LayerKind::Depthwise { kernel } => [h - kernel + 1, w - kernel + 1, c],
            LayerKind::Dense | LayerKind::Rademacher { .. } => [1, 1, out_c],
            LayerKind::MaxPool2 => [h / 2, w / 2, c],
            LayerKind::Flatten => [1, 1, h * w * c],
            _ => [h, w, c],
        };
        self.layers.push(LayerSpec {
            name: name.to_string(),
            kind,
            input: self.shape,
            output,
            weight,
            input_bits: self.bits,
        });
        self.shape = output;
        if let LayerKind::Activation { kind } = kind {
            self.bits = match kind {
                ActKind::HwmsbCode => 2,
                ActKind::Relu => 32,
                ActKind::Sign | ActKind::Heaviside => 1,
            };
        }
    }

    fn act(&mut self, name: &str, kind: ActKind) {
        self.push(name, LayerKind::Activation { kind }, 0, None);
    }

    fn simple(&mut self, name: &str, kind: LayerKind) {
        self.push(name, kind, 0, None);
    }
}

/// Expands a configuration into its layer list.
pub fn topology(config: &ModelConfig) -> Result<Topology> {
    config.validate()?;
    let f = config.f;
    let s = config.input_size;
    let mut b = Builder {
        layers: Vec::new(),
        shape: [s, s, 3],
        bits: INPUT_BITS,
    };
    let conv = |groups| LayerKind::Conv { kernel: 3, groups };
    use ActKind::*;
    use WeightPrecision::*;
    match config.precision {
        Precision::Mixed => {
            b.push("conv1", conv(1), f, Some(Quinary));
            b.simple("conv1.bias", LayerKind::Bias);
            b.simple("conv1.norm", LayerKind::Norm);
            b.act("conv1.sign", Sign);
            b.push("conv2", conv(1), f, Some(Quinary));
            b.simple("conv2.norm", LayerKind::Norm);
            b.act("conv2.hwmsb", HwmsbCode);
            b.simple("pool1", LayerKind::MaxPool2);
            b.push("conv3", conv(1), 2 * f, Some(Ternary));
            b.simple("conv3.rescale", LayerKind::Rescale3);
            b.simple("conv3.norm", LayerKind::Norm);
            b.act("conv3.sign", Sign);
            b.push("conv4", conv(1), 2 * f, Some(Ternary));
            b.simple("conv4.norm", LayerKind::Norm);
            b.act("conv4.hwmsb", HwmsbCode);
            b.simple("pool2", LayerKind::MaxPool2);
            b.push("conv5", conv(1), 4 * f, Some(Binary));
            b.simple("conv5.rescale", LayerKind::Rescale3);
            b.simple("conv5.norm", LayerKind::Norm);
            b.act("conv5.sign", Sign);
        }
        Precision::Binary => {
            b.push("conv1", conv(1), f, Some(Binary));
            b.simple("conv1.bias", LayerKind::Bias);
            b.simple("conv1.norm", LayerKind::Norm);
            b.act("conv1.sign", Sign);
            b.push("conv2", conv(1), f, Some(Binary));
            b.simple("conv2.norm", LayerKind::Norm);
            b.simple("pool1", LayerKind::MaxPool2);
            b.act("conv2.sign", Sign);
            b.push("conv3", conv(1), 2 * f, Some(Binary));
            b.simple("conv3.norm", LayerKind::Norm);
            b.act("conv3.sign", Sign);
            b.push("conv4", conv(1), 2 * f, Some(Binary));
            b.simple("conv4.norm", LayerKind::Norm);
            b.simple("pool2", LayerKind::MaxPool2);
            b.act("conv4.sign", Sign);
            b.push("conv5", conv(1), 4 * f, Some(Binary));
            b.simple("conv5.norm", LayerKind::Norm);
            b.act("conv5.sign", Sign);
        }
    }
    b.push("gconv", conv(config.groups), 4 * f, Some(Binary));
    b.simple("gconv.norm", LayerKind::Norm);
    b.simple("pool3", LayerKind::MaxPool2);
    b.act("gconv.heaviside", Heaviside);
    let spatial = s / 8;
    match config.bottleneck {
        BottleneckKind::Lfc => {
            b.simple("flatten", LayerKind::Flatten);
            b.push("bottleneck.fc", LayerKind::Dense, 4 * f, Some(Binary));
        }
        BottleneckKind::Rcs => {
            b.simple("flatten", LayerKind::Flatten);
            b.push(
                "bottleneck.rcs",
                LayerKind::Rademacher { seed: config.rcs_seed },
                4 * f,
                None,
            );
            b.push("bottleneck.fc", LayerKind::Dense, 4 * f, Some(Binary));
        }
        BottleneckKind::Dwconv => {
            b.push(
                "bottleneck.dw",
                LayerKind::Depthwise { kernel: spatial },
                4 * f,
                Some(Binary),
            );
            b.simple("flatten", LayerKind::Flatten);
            b.push("bottleneck.fc", LayerKind::Dense, 4 * f, Some(Binary));
        }
    }
    b.simple("bottleneck.norm", LayerKind::Norm);
    b.act("bottleneck.heaviside", Heaviside);
    let encoder_len = b.layers.len();
    b.push("classifier", LayerKind::Dense, config.classes, Some(Binary));
    b.simple("classifier.norm", LayerKind::Norm);
    Ok(Topology {
        layers: b.layers,
        encoder_len,
    })
}

impl Topology {
    pub fn encoder(&self) -> &[LayerSpec] {
        &self.layers[..self.encoder_len]
    }

    pub fn weighted(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.is_weighted())
    }

    /// Human-readable structured listing.
    pub fn to_toml(&self) -> Result<String> {
        #[derive(Serialize)]
        struct File<'a> {
            encoder_layers: usize,
            layer: &'a [LayerSpec],
        }
        toml::to_string(&File {
            encoder_layers: self.encoder_len,
            layer: &self.layers,
        })
        .map_err(|e| Error::format(e.to_string()))
    }
}
