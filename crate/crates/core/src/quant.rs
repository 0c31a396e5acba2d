//! Weight quantizers.
//!
//! Linear symmetric quantization onto an odd number of levels in `[-1, 1]`,
//! with the step `Δ` calibrated from equal-mass quantiles of the proxy
//! weights so that every quantized level receives roughly the same share of
//! weights. Binary (sign) and Heaviside quantizers and the clipped-identity
//! straight-through gradient live here as well.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Level count, step and mean-absolute norm factor of one quantized layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    n_levels: u8,
    delta: f64,
    tau: f64,
}

impl QuantizerSpec {
    pub fn new(n_levels: u8, delta: f64, tau: f64) -> Result<Self> {
        check_levels(n_levels as usize)?;
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::config(format!("quantization step must be positive, got {delta}")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::config(format!("norm factor must be positive, got {tau}")));
        }
        Ok(Self { n_levels, delta, tau })
    }

    pub fn n_levels(&self) -> u8 {
        self.n_levels
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Largest integer level `(n-1)/2`.
    pub fn max_level(&self) -> i32 {
        (self.n_levels as i32 - 1) / 2
    }

    /// Integer level `k` with `q(x) = 2k/(n-1)`.
    pub fn level(&self, x: f64) -> i32 {
        let n = self.n_levels as f64;
        // f64::round is half-away-from-zero, keeping q odd.
        let k = ((n - 2.0) * x / (2.0 * self.delta)).round();
        let m = self.max_level() as f64;
        k.clamp(-m, m) as i32
    }

    pub fn quantize_scalar(&self, x: f64) -> f64 {
        2.0 * self.level(x) as f64 / (self.n_levels as f64 - 1.0)
    }
}

fn check_levels(n: usize) -> Result<()> {
    if n < 3 || n.is_multiple_of(2) || n > u8::MAX as usize {
        return Err(Error::config(format!(
            "level count must be odd and at least 3, got {n}"
        )));
    }
    Ok(())
}

/// `n + 1` points splitting a weight histogram into `n` equal-mass quantiles.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileSet {
    points: Vec<f64>,
}

impl QuantileSet {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 4 || !points.len().is_multiple_of(2) {
            return Err(Error::config(format!(
                "a quantile set needs n+1 points for odd n >= 3, got {}",
                points.len()
            )));
        }
        if points.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::config("quantile points must be non-decreasing"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn n_levels(&self) -> usize {
        self.points.len() - 1
    }
}

/// How a weight tensor is mapped to its deployed values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum WeightQuantizer {
    Linear(QuantizerSpec),
    Binary,
    /// Full-precision weights (decoder layers).
    Float,
}

impl WeightQuantizer {
    pub fn apply_scalar(&self, w: f32) -> f32 {
        match self {
            WeightQuantizer::Linear(spec) => spec.quantize_scalar(w as f64) as f32,
            WeightQuantizer::Binary => sign_scalar(w),
            WeightQuantizer::Float => w,
        }
    }

    pub fn is_quantized(&self) -> bool {
        !matches!(self, WeightQuantizer::Float)
    }
}

/// Elementwise `q(x; Δ)`; rejects non-finite input.
pub fn linear_symmetric_quantize(x: &Tensor, spec: &QuantizerSpec) -> Result<Tensor> {
    x.check_finite()?;
    Ok(x.map(|v| spec.quantize_scalar(v as f64) as f32))
}

/// Nearest-rank quantiles `q_k`, `k = 0..=n`, of the flattened weights.
pub fn compute_quantiles(weights: &[f32], n_levels: usize) -> Result<QuantileSet> {
    check_levels(n_levels)?;
    if weights.is_empty() {
        return Err(Error::Empty("weights for quantile estimation"));
    }
    if let Some(index) = weights.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            index,
            value: weights[index] as f64,
        });
    }
    let mut sorted: Vec<f32> = weights.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let count = sorted.len();
    let points = (0..=n_levels)
        .map(|k| {
            // rank = ceil(k * count / n), 1-based; q_0 is the minimum.
            let rank = (k * count).div_ceil(n_levels).max(1);
            sorted[rank - 1] as f64
        })
        .collect();
    QuantileSet::new(points)
}

/// Step `Δ` matching the inner quantiles to the quantizer thresholds.
///
/// Thresholds sit at `±Δ(2j-1)/(n-2)`, so the inner quantile magnitudes sum to
/// `2Δ((n-1)/2)²/(n-2)`. For `n = 3` this is `Δ = (|q1| + q2)/2`, for `n = 5`
/// `Δ = 3(|q1| + |q2| + q3 + q4)/8`. A non-positive estimate falls back to
/// `max(|q1|, |q_{n-1}|)`; if that is zero too the layer is degenerate.
pub fn estimate_delta(quantiles: &QuantileSet) -> Result<f64> {
    let q = quantiles.points();
    let n = quantiles.n_levels();
    let half = ((n - 1) / 2) as f64;
    let inner: f64 = q[1..n].iter().map(|v| v.abs()).sum();
    let delta = inner * (n as f64 - 2.0) / (2.0 * half * half);
    if delta > 0.0 && delta.is_finite() {
        return Ok(delta);
    }
    let fallback = q[1].abs().max(q[n - 1].abs());
    if fallback > 0.0 && fallback.is_finite() {
        log::warn!("quantile step estimate {delta} is degenerate, falling back to {fallback}");
        return Ok(fallback);
    }
    Err(Error::Degenerate(format!(
        "quantization step collapsed to {delta} (all inner quantiles zero)"
    )))
}

/// `τ = N·Δ / Σ|W_i|` with `N` the number of weights, i.e. `Δ = τ·mean|W|`.
pub fn mean_abs_norm_factor(weights: &[f32], delta: f64) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::Empty("weights for norm factor"));
    }
    let abs_sum: f64 = weights.iter().map(|w| w.abs() as f64).sum();
    if !(abs_sum > 0.0) {
        return Err(Error::Degenerate("all-zero weights have no norm factor".into()));
    }
    Ok(weights.len() as f64 * delta / abs_sum)
}

/// Full calibration of one layer: quantiles, step, norm factor.
///
/// When the step collapses and a previous spec exists it is kept unchanged.
pub fn calibrate(
    weights: &[f32],
    n_levels: usize,
    previous: Option<&QuantizerSpec>,
) -> Result<QuantizerSpec> {
    let quantiles = compute_quantiles(weights, n_levels)?;
    let delta = match (estimate_delta(&quantiles), previous) {
        (Ok(d), _) => d,
        (Err(e), Some(prev)) => {
            log::warn!("{e}; keeping previous step {}", prev.delta());
            return Ok(*prev);
        }
        (Err(e), None) => return Err(e),
    };
    let tau = mean_abs_norm_factor(weights, delta)?;
    QuantizerSpec::new(n_levels as u8, delta, tau)
}

/// The reference rule `Δ = τ·mean|W|` with a fixed `τ` (0.7 in the ternary
/// weight network literature), used as a comparison baseline.
pub fn fixed_tau_spec(weights: &[f32], n_levels: usize, tau: f64) -> Result<QuantizerSpec> {
    if weights.is_empty() {
        return Err(Error::Empty("weights for fixed-tau rule"));
    }
    let mean_abs = weights.iter().map(|w| w.abs() as f64).sum::<f64>() / weights.len() as f64;
    QuantizerSpec::new(n_levels as u8, tau * mean_abs, tau)
}

/// Fraction of weights landing on each level, ordered from `-1` to `+1`.
pub fn level_occupancy(weights: &[f32], spec: &QuantizerSpec) -> Vec<f64> {
    let m = spec.max_level();
    let mut counts = vec![0usize; (2 * m + 1) as usize];
    for &w in weights {
        counts[(spec.level(w as f64) + m) as usize] += 1;
    }
    counts
        .into_iter()
        .map(|c| c as f64 / weights.len() as f64)
        .collect()
}

pub fn sign_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub fn heaviside_scalar(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `+1` for `x >= 0`, `-1` otherwise.
pub fn sign_binarize(x: &Tensor) -> Tensor {
    x.map(sign_scalar)
}

/// `1` for `x > 0`, `0` otherwise.
pub fn heaviside(x: &Tensor) -> Tensor {
    x.map(heaviside_scalar)
}

/// Derivative of `Clip(x, -1, 1)` with the boundary included.
pub fn ste_gate(x: f32) -> f32 {
    if x.abs() <= 1.0 {
        1.0
    } else {
        0.0
    }
}

/// Clipped-identity straight-through gradient.
pub fn ste_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    x.zip_map(upstream, |v, g| ste_gate(v) * g)
}
