//! Batch normalization and its bit-shift replacement.
//!
//! Stage-1 training uses ordinary batch normalization. Before fine-tuning,
//! each layer's affine transform is replaced by one shared multiplication by
//! `2^s`, where `s = floor(log2 γ̃)` and `γ̃` is the 0.9-quantile of the
//! per-channel scale magnitudes. The bias is dropped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f32 = 1e-3;
pub const DEFAULT_MOMENTUM: f32 = 0.99;
pub const FOLD_QUANTILE: f64 = 0.9;
pub const MIN_SHIFT: i32 = -8;
pub const MAX_SHIFT: i32 = 7;

/// Trained statistics of one batch-normalization layer, one entry per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub moving_mean: Vec<f32>,
    pub moving_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            moving_mean: vec![0.0; channels],
            moving_var: vec![1.0; channels],
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if c == 0 {
            return Err(Error::Empty("normalization channels"));
        }
        if self.beta.len() != c || self.moving_mean.len() != c || self.moving_var.len() != c {
            return Err(Error::shape("normalization vectors differ in length"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("normalization eps must be positive"));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::config("normalization momentum must lie in (0, 1)"));
        }
        if self.moving_var.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::config("moving variance must be non-negative"));
        }
        Ok(())
    }

    /// Inference-time scale `γ/√(σ²+ε)` per channel.
    pub fn folded_scale(&self) -> Vec<f32> {
        self.gamma
            .iter()
            .zip(&self.moving_var)
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect()
    }

    /// Inference-time offset `β − γμ/√(σ²+ε)` per channel.
    pub fn folded_offset(&self) -> Vec<f32> {
        self.folded_scale()
            .iter()
            .zip(&self.beta)
            .zip(&self.moving_mean)
            .map(|((s, b), m)| b - s * m)
            .collect()
    }

    /// Channels whose folded scale is negative.
    pub fn negative_channels(&self) -> Vec<usize> {
        self.folded_scale()
            .iter()
            .enumerate()
            .filter(|(_, s)| **s < 0.0)
            .map(|(c, _)| c)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Per-channel batch statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub inv_std: Vec<f32>,
    /// Normalized input, same layout as the input.
    pub xhat: Vec<f32>,
}

/// Number of values reduced per channel (everything but the channel axis).
fn reduction_count(x: &Tensor) -> usize {
    x.len() / x.channels()
}

fn check_channels(x: &Tensor, state: &BatchNormState) -> Result<()> {
    if x.channels() != state.channels() {
        return Err(Error::shape(format!(
            "normalization over {} channels applied to {:?}",
            state.channels(),
            x.shape()
        )));
    }
    Ok(())
}

/// Batch statistics of `x` normalized with the given `γ`, `β`.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Result<(Tensor, BatchStats)> {
    let c = x.channels();
    let count = reduction_count(x);
    if count < 2 {
        return Err(Error::shape(
            "batch statistics need at least two values per channel",
        ));
    }
    let mut mean = vec![0f64; c];
    for row in x.data().chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0f64; c];
    for row in x.data().chunks(c) {
        for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v as f64 - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= count as f64);
    let inv_std: Vec<f32> = var.iter().map(|v| (1.0 / (v + eps as f64).sqrt()) as f32).collect();
    let mean: Vec<f32> = mean.into_iter().map(|m| m as f32).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for row in x.data().chunks(c) {
        for ch in 0..c {
            let h = (row[ch] - mean[ch]) * inv_std[ch];
            xhat.push(h);
            y.push(gamma[ch] * h + beta[ch]);
        }
    }
    let stats = BatchStats {
        mean,
        var: var.into_iter().map(|v| v as f32).collect(),
        inv_std,
        xhat,
    };
    Ok((Tensor::new(x.shape(), y)?, stats))
}

/// Gradients `(dx, dγ, dβ)` of batch normalization in training mode.
pub fn batch_norm_backward(dy: &[f32], stats: &BatchStats, gamma: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let c = gamma.len();
    let count = (dy.len() / c) as f32;
    let mut dgamma = vec![0f32; c];
    let mut dbeta = vec![0f32; c];
    for (g, h) in dy.chunks(c).zip(stats.xhat.chunks(c)) {
        for ch in 0..c {
            dbeta[ch] += g[ch];
            dgamma[ch] += g[ch] * h[ch];
        }
    }
    let mut dx = Vec::with_capacity(dy.len());
    for (g, h) in dy.chunks(c).zip(stats.xhat.chunks(c)) {
        for ch in 0..c {
            let k = gamma[ch] * stats.inv_std[ch] / count;
            dx.push(k * (count * g[ch] - dbeta[ch] - h[ch] * dgamma[ch]));
        }
    }
    (dx, dgamma, dbeta)
}

/// Exponential moving average update of the stored statistics.
pub fn update_moving_stats(state: &mut BatchNormState, stats: &BatchStats) {
    let m = state.momentum;
    for ch in 0..state.channels() {
        state.moving_mean[ch] = m * state.moving_mean[ch] + (1.0 - m) * stats.mean[ch];
        state.moving_var[ch] = m * state.moving_var[ch] + (1.0 - m) * stats.var[ch];
    }
}

/// Applies `y = γ(x−μ)/√(σ²+ε) + β`. Train mode uses batch statistics and
/// updates the moving averages; infer mode uses the stored statistics.
pub fn bn_forward(x: &Tensor, state: &mut BatchNormState, mode: BnMode) -> Result<Tensor> {
    state.validate()?;
    check_channels(x, state)?;
    match mode {
        BnMode::Train => {
            let (y, stats) = batch_norm_train(x, &state.gamma, &state.beta, state.eps)?;
            update_moving_stats(state, &stats);
            Ok(y)
        }
        BnMode::Infer => channel_affine(x, &state.folded_scale(), &state.folded_offset()),
    }
}

/// `y = a_c·x + b_c` along the channel axis.
pub fn channel_affine(x: &Tensor, scale: &[f32], offset: &[f32]) -> Result<Tensor> {
    let c = x.channels();
    if scale.len() != c || offset.len() != c {
        return Err(Error::shape("affine vectors do not match channel count"));
    }
    let mut y = x.clone();
    for row in y.data_mut().chunks_mut(c) {
        for ch in 0..c {
            row[ch] = scale[ch] * row[ch] + offset[ch];
        }
    }
    Ok(y)
}

/// A layer-shared power-of-two scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BsnScale {
    pub shift_exp: i32,
    /// The `γ̃` this scale was folded from.
    pub source_quantile: f64,
}

impl BsnScale {
    pub fn from_shift(shift_exp: i32) -> Result<Self> {
        if !(MIN_SHIFT..=MAX_SHIFT).contains(&shift_exp) {
            return Err(Error::config(format!(
                "bit shift {shift_exp} outside [{MIN_SHIFT}, {MAX_SHIFT}]"
            )));
        }
        Ok(BsnScale {
            shift_exp,
            source_quantile: 2f64.powi(shift_exp),
        })
    }

    pub fn factor(&self) -> f32 {
        2f32.powi(self.shift_exp)
    }
}

/// Exact `floor(log2 v)` for positive finite `v`.
fn floor_log2(v: f64) -> i32 {
    let mut e = v.log2().floor() as i32;
    // Guard against log2 rounding near powers of two.
    if 2f64.powi(e) > v {
        e -= 1;
    } else if 2f64.powi(e + 1) <= v {
        e += 1;
    }
    e
}

/// Folds a trained batch normalization into one bit shift.
pub fn fold_to_bsn(state: &BatchNormState) -> Result<BsnScale> {
    state.validate()?;
    let mut mags: Vec<f64> = state.folded_scale().iter().map(|s| s.abs() as f64).collect();
    if mags.iter().all(|&m| m == 0.0) {
        return Err(Error::Degenerate("every normalization scale is zero".into()));
    }
    mags.sort_by(f64::total_cmp);
    let rank = ((FOLD_QUANTILE * mags.len() as f64).ceil() as usize).max(1);
    let quantile = mags[rank - 1];
    if !(quantile > 0.0 && quantile.is_finite()) {
        return Err(Error::Degenerate(format!(
            "normalization scale quantile is {quantile}"
        )));
    }
    let raw = floor_log2(quantile);
    let shift_exp = raw.clamp(MIN_SHIFT, MAX_SHIFT);
    if shift_exp != raw {
        log::warn!("bit shift {raw} clamped to {shift_exp}");
    }
    Ok(BsnScale {
        shift_exp,
        source_quantile: quantile,
    })
}

/// Exact multiplication by `2^shift_exp`.
pub fn bsn_apply(x: &Tensor, scale: &BsnScale) -> Tensor {
    let f = scale.factor();
    x.map(|v| v * f)
}

/// What follows a bit-shift normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Consumer {
    Sign,
    Heaviside,
    Hwmsb,
    /// The final classifier scores.
    Logits,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elision {
    /// Drop the shift: the consumer is invariant to positive scaling.
    Elide,
    /// Move the shift into the HWMSB reference position.
    AbsorbIntoHwmsb,
    Keep,
}

pub fn elide_bsn(consumer: Consumer) -> Elision {
    match consumer {
        Consumer::Sign | Consumer::Heaviside | Consumer::Logits => Elision::Elide,
        Consumer::Hwmsb => Elision::AbsorbIntoHwmsb,
        Consumer::Other => Elision::Keep,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::{hwmsb_integer, hwmsb_scalar, ReferencePosition};
    use crate::quant::heaviside_scalar;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state_from(gamma: Vec<f32>, beta: Vec<f32>, mean: Vec<f32>, var: Vec<f32>, eps: f32) -> BatchNormState {
        BatchNormState {
            gamma,
            beta,
            moving_mean: mean,
            moving_var: var,
            eps,
            momentum: 0.99,
        }
    }

    #[test]
    fn infer_identity_and_direct_formula() {
        let mut s = state_from(vec![1.0], vec![0.0], vec![0.0], vec![1.0], 1e-12);
        let x = Tensor::new(&[3, 1], vec![-2.0, 0.5, 7.0]).unwrap();
        let y = bn_forward(&x, &mut s, BnMode::Infer).unwrap();
        assert_relative_eq!(y.data()[2], 7.0, max_relative = 1e-6);

        // eps must be positive, so use a tiny one for the eps = 0 example.
        let mut s = state_from(vec![2.0], vec![1.0], vec![3.0], vec![4.0], 1e-12);
        let y = bn_forward(&Tensor::new(&[1, 1], vec![5.0]).unwrap(), &mut s, BnMode::Infer).unwrap();
        assert_relative_eq!(y.data()[0], 3.0, max_relative = 1e-6);
    }

    #[test]
    fn train_mode_moments_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, c) = (64, 3);
        let x = Tensor::from_fn(&[n, c], |_| rng.random_range(-3.0..5.0));
        let gamma = vec![0.5, 2.0, -1.5];
        let beta = vec![0.1, -0.7, 2.0];
        let mut s = state_from(gamma.clone(), beta.clone(), vec![0.0; c], vec![1.0; c], 1e-12);
        let y = bn_forward(&x, &mut s, BnMode::Train).unwrap();
        for ch in 0..c {
            let col: Vec<f64> = (0..n).map(|i| y.data()[i * c + ch] as f64).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!((mean - beta[ch] as f64).abs() < 1e-5, "mean {mean}");
            assert!((var - (gamma[ch] as f64).powi(2)).abs() < 1e-5 * 4.0, "var {var}");
        }
        // Moving stats moved towards the batch stats.
        assert!(s.moving_mean.iter().all(|m| *m != 0.0));
    }

    #[test]
    fn train_rejects_single_value() {
        let mut s = BatchNormState::new(2);
        let x = Tensor::zeros(&[1, 2]);
        assert!(bn_forward(&x, &mut s, BnMode::Train).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gamma = [1.3f32, -0.4];
        let beta = [0.2f32, 0.1];
        let loss = |xs: &[f64]| -> f64 {
            let t = Tensor::new(&[6, 2], xs.iter().map(|v| *v as f32).collect()).unwrap();
            let (y, _) = batch_norm_train(&t, &gamma, &beta, 1e-3).unwrap();
            y.data().iter().zip(&w).map(|(a, b)| *a as f64 * b).sum()
        };
        let t = Tensor::new(&[6, 2], x.iter().map(|v| *v as f32).collect()).unwrap();
        let (_, stats) = batch_norm_train(&t, &gamma, &beta, 1e-3).unwrap();
        let dy: Vec<f32> = w.iter().map(|v| *v as f32).collect();
        let (dx, _, _) = batch_norm_backward(&dy, &stats, &gamma);
        for i in 0..12 {
            let h = 1e-3;
            let mut p = x.clone();
            p[i] += h;
            let mut m = x.clone();
            m[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - dx[i] as f64).abs() < 2e-3, "{i}: {fd} vs {}", dx[i]);
        }
    }

    fn with_scales(scales: &[f32]) -> BatchNormState {
        // Zero variance and eps chosen so that sqrt(var + eps) = 1 exactly.
        let c = scales.len();
        state_from(scales.to_vec(), vec![0.0; c], vec![0.0; c], vec![0.0; c], 1.0)
    }

    #[test]
    fn fold_examples() {
        let s = fold_to_bsn(&with_scales(&[0.3])).unwrap();
        assert_eq!(s.shift_exp, -2);
        assert_relative_eq!(s.source_quantile, 0.3, max_relative = 1e-6);

        let ten: Vec<f32> = (1..=10).map(|i| i as f32 / 10.0).collect();
        let s = fold_to_bsn(&with_scales(&ten)).unwrap();
        // Oracle: sort, take rank ceil(0.9 * 10) = 9.
        let mut sorted = ten.clone();
        sorted.sort_by(f32::total_cmp);
        assert_eq!(s.source_quantile as f32, sorted[8]);
        assert_eq!(s.shift_exp, -1);

        for k in -5..=5 {
            let v = 2f32.powi(k);
            let s = fold_to_bsn(&with_scales(&[v, v, v])).unwrap();
            assert_eq!(s.shift_exp, k);
            assert_eq!(s.source_quantile, v as f64);
        }
    }

    #[test]
    fn fold_uses_magnitudes_and_clamps() {
        let s = fold_to_bsn(&with_scales(&[-0.6, 0.1])).unwrap();
        assert_eq!(s.shift_exp, -1);
        assert_eq!(fold_to_bsn(&with_scales(&[1000.0])).unwrap().shift_exp, MAX_SHIFT);
        assert_eq!(fold_to_bsn(&with_scales(&[1e-5])).unwrap().shift_exp, MIN_SHIFT);
        assert!(fold_to_bsn(&with_scales(&[0.0, 0.0])).is_err());
        assert_eq!(with_scales(&[-0.6, 0.1, -2.0]).negative_channels(), vec![0, 2]);
    }

    #[test]
    fn bsn_apply_examples() {
        let x = Tensor::new(&[2], vec![8.0, -3.0]).unwrap();
        assert_eq!(bsn_apply(&x, &BsnScale::from_shift(0).unwrap()), x);
        assert_eq!(bsn_apply(&x, &BsnScale::from_shift(-3).unwrap()).data()[0], 1.0);
        assert!(BsnScale::from_shift(8).is_err());
    }

    #[test]
    fn elision_rules() {
        assert_eq!(elide_bsn(Consumer::Heaviside), Elision::Elide);
        assert_eq!(elide_bsn(Consumer::Sign), Elision::Elide);
        assert_eq!(elide_bsn(Consumer::Logits), Elision::Elide);
        assert_eq!(elide_bsn(Consumer::Hwmsb), Elision::AbsorbIntoHwmsb);
        assert_eq!(elide_bsn(Consumer::Other), Elision::Keep);
    }

    proptest! {
        #[test]
        fn fold_error_bounded(scales in proptest::collection::vec(1e-2f32..100.0, 1..40)) {
            let s = fold_to_bsn(&with_scales(&scales)).unwrap();
            let ratio = s.source_quantile / 2f64.powi(s.shift_exp);
            prop_assert!((1.0..2.0).contains(&ratio));
        }

        #[test]
        fn shift_preserves_sign(x in -1e3f32..1e3, s in MIN_SHIFT..=MAX_SHIFT) {
            let y = x * 2f32.powi(s);
            prop_assert_eq!(heaviside_scalar(y), heaviside_scalar(x));
            prop_assert_eq!(y >= 0.0, x >= 0.0);
        }

        #[test]
        fn absorption_is_exact(acc in -32768i64..32768, exp in -12i32..4, s in MIN_SHIFT..=MAX_SHIFT) {
            let real = acc as f64 * 2f64.powi(exp);
            let shifted = real * 2f64.powi(s);
            let direct = hwmsb_scalar(shifted);
            let absorbed = hwmsb_integer(acc, exp, ReferencePosition::default().absorb(s));
            prop_assert_eq!(direct, absorbed);
        }
    }
}
