//! Most-significant-bit activations.
//!
//! The MSB quantizer keeps only the position of the leading one of its input
//! (a log2 range compression followed by requantization). Its half-wave form,
//! HWMSB, zeroes negatives and emits a 2-bit code `c` standing for `c/3`.
//! The integer form locates the leading one of an accumulator directly and
//! absorbs any power-of-two prescale by moving the reference position.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Tensor;

/// 2-bit HWMSB output; represents exactly `code/3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct HwmsbCode(u8);

impl HwmsbCode {
    pub const ZERO: HwmsbCode = HwmsbCode(0);

    pub fn new(code: u8) -> Option<Self> {
        (code <= 3).then_some(HwmsbCode(code))
    }

    pub fn code(self) -> u8 {
        self.0
    }

    /// The represented value as the rational `(numerator, 3)`.
    pub fn rational(self) -> (u8, u8) {
        (self.0, 3)
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / 3.0
    }
}

/// Exponent offset locating the first significant bit (4 by default).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferencePosition {
    pub bias: i32,
}

impl Default for ReferencePosition {
    fn default() -> Self {
        ReferencePosition { bias: 4 }
    }
}

impl ReferencePosition {
    /// Absorbs a prescale by `2^shift`.
    pub fn absorb(self, shift: i32) -> Self {
        ReferencePosition {
            bias: self.bias + shift,
        }
    }
}

const EIGHTH: f64 = 0.125;

fn signum(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Continuous MSB curve: `sign(x)·min((4 + log2|x|)/3, 1)` for `|x| ≥ 1/8`,
/// `8x/3` below.
pub fn msb_real(x: f64) -> f64 {
    if x.abs() >= EIGHTH {
        signum(x) * ((4.0 + x.abs().log2()) / 3.0).min(1.0)
    } else {
        8.0 * x / 3.0
    }
}

/// Numerator of the MSB level of `|x|`: `min(floor(4 + log2|x|), 3)`, or 0
/// below 1/8. Bin edges belong to the upper bin.
fn msb_magnitude_code(a: f64) -> u8 {
    if a >= 0.5 {
        3
    } else if a >= 0.25 {
        2
    } else if a >= EIGHTH {
        1
    } else {
        0
    }
}

/// Signed MSB quantization of a scalar.
pub fn msb_quantize_scalar(x: f64) -> f64 {
    signum(x) * msb_magnitude_code(x.abs()) as f64 / 3.0
}

pub fn msb_quantize(x: &Tensor) -> Tensor {
    x.map(|v| msb_quantize_scalar(v as f64) as f32)
}

/// Straight-through gradient of the MSB quantizer; zero beyond `|x| > 1`.
pub fn msb_gradient(x: f64) -> f64 {
    let a = x.abs();
    if a < EIGHTH {
        8.0 / 3.0
    } else if a <= 1.0 {
        1.0 / (3.0 * a * LN_2)
    } else {
        0.0
    }
}

pub fn msb_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    x.zip_map(upstream, |v, g| (msb_gradient(v as f64) * g as f64) as f32)
}

/// Antiderivative of [`msb_gradient`]: the function the MSB straight-through
/// rule differentiates exactly. Equal to [`msb_real`] on `|x| ≤ 1/2`.
pub fn msb_surrogate(x: f64) -> f64 {
    let a = x.abs();
    if a < EIGHTH {
        8.0 * x / 3.0
    } else {
        signum(x) * (4.0 + a.min(1.0).log2()) / 3.0
    }
}

pub fn hwmsb_scalar(x: f64) -> HwmsbCode {
    if x > 0.0 {
        HwmsbCode(msb_magnitude_code(x))
    } else {
        HwmsbCode::ZERO
    }
}

/// Half-wave MSB: MSB quantization with negatives zeroed.
pub fn hwmsb(x: &Tensor) -> Vec<HwmsbCode> {
    x.data().iter().map(|&v| hwmsb_scalar(v as f64)).collect()
}

/// HWMSB backward rule: the inner slope `8/3` on `|x| < 1/8`, the MSB slope on
/// `[1/8, 1]`, zero for `x < -1/8` and `x > 1`.
pub fn hwmsb_gradient(x: f64) -> f64 {
    if x.abs() < EIGHTH || (EIGHTH..=1.0).contains(&x) {
        msb_gradient(x)
    } else {
        0.0
    }
}

pub fn hwmsb_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    x.zip_map(upstream, |v, g| (hwmsb_gradient(v as f64) * g as f64) as f32)
}

/// Antiderivative of [`hwmsb_gradient`], continuous everywhere.
pub fn hwmsb_surrogate(x: f64) -> f64 {
    if x <= -EIGHTH {
        -1.0 / 3.0
    } else if x < EIGHTH {
        8.0 * x / 3.0
    } else {
        (4.0 + x.min(1.0).log2()) / 3.0
    }
}

/// HWMSB of the real value `acc · 2^(scale_exp + bias - 4)`, computed from the
/// leading-one position of `acc` alone.
pub fn hwmsb_integer(acc: i64, scale_exp: i32, reference: ReferencePosition) -> HwmsbCode {
    if acc <= 0 {
        return HwmsbCode::ZERO;
    }
    let leading = 63 - acc.leading_zeros() as i32;
    // floor(log2 value) = leading + exponent; the code is that plus 4, clamped.
    let msb = leading + scale_exp + reference.bias - 4;
    HwmsbCode((msb + 4).clamp(0, 3) as u8)
}

/// Packs codes four to a byte, first code in the low bits.
pub fn pack_codes(codes: &[HwmsbCode]) -> Vec<u8> {
    codes
        .chunks(4)
        .map(|chunk| {
            chunk
                .iter()
                .enumerate()
                .fold(0u8, |byte, (i, c)| byte | (c.0 << (2 * i)))
        })
        .collect()
}

pub fn unpack_codes(bytes: &[u8], count: usize) -> Vec<HwmsbCode> {
    (0..count)
        .map(|i| HwmsbCode((bytes[i / 4] >> (2 * (i % 4))) & 0b11))
        .collect()
}
