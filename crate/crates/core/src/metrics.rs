//! PSNR and MS-SSIM over `[0, 1]` images.
//!
//! MS-SSIM uses the five-scale construction: 11×11 Gaussian window with
//! σ = 1.5, K1 = 0.01, K2 = 0.03, valid filtering, 2×2 average-pool
//! downsampling, contrast-structure terms of the four finer scales and the
//! full SSIM of the coarsest, per channel then averaged.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scale weights, finest first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// PSNR in dB for signals with peak 1; `+∞` when `mse == 0`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// PSNR of `a` against `b`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b)?;
    if a.is_empty() {
        return Err(Error::Empty("image"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    Ok(psnr_from_mse(mse))
}

/// Text rendering: `inf` for identical images.
pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

/// Structured-output value: infinity becomes the largest finite `f64`.
pub fn psnr_record(v: f64) -> f64 {
    if v.is_infinite() {
        f64::MAX
    } else {
        v
    }
}

/// Normalized 2-D Gaussian window, row-major.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// One channel plane.
#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn filter(&self, win: &[f64], k: usize) -> Plane {
        let (oh, ow) = (self.h - k + 1, self.w - k + 1);
        let mut v = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let mut s = 0.0;
                for dy in 0..k {
                    let row = &self.v[(y + dy) * self.w + x..(y + dy) * self.w + x + k];
                    for (a, b) in row.iter().zip(&win[dy * k..dy * k + k]) {
                        s += a * b;
                    }
                }
                v[y * ow + x] = s;
            }
        }
        Plane { h: oh, w: ow, v }
    }

    fn zip(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// 2×2 average pool; odd sizes first repeat the last row/column.
    fn downsample(&self) -> Plane {
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let at = |y: usize, x: usize| self.v[y.min(self.h - 1) * self.w + x.min(self.w - 1)];
        let mut v = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                v[y * w + x] = (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1)) / 4.0;
            }
        }
        Plane { h, w, v }
    }
}

/// Mean SSIM and mean contrast-structure of one channel at one scale.
fn ssim_terms(a: &Plane, b: &Plane, window: usize) -> (f64, f64) {
    let k = window.min(a.h).min(a.w);
    let win = gaussian_window(k, SSIM_SIGMA);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mu_a = a.filter(&win, k);
    let mu_b = b.filter(&win, k);
    let aa = a.zip(b, |x, y| x * x + y * y).filter(&win, k);
    let ab = a.zip(b, |x, y| x * y).filter(&win, k);
    let n = mu_a.v.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.v.len() {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let num0 = 2.0 * ma * mb;
        let den0 = ma * ma + mb * mb;
        let lum = (num0 + c1) / (den0 + c1);
        let c = (2.0 * ab.v[i] - num0 + c2) / (aa.v[i] - den0 + c2);
        ssim += lum * c;
        cs += c;
    }
    (ssim / n, cs / n)
}

fn planes(t: &Tensor) -> Result<Vec<Plane>> {
    let [n, h, w, c] = t.dims4()?;
    let mut out = Vec::with_capacity(n * c);
    for img in 0..n {
        for ch in 0..c {
            let v = (0..h * w).map(|i| t.data()[(img * h * w + i) * c + ch] as f64).collect();
            out.push(Plane { h, w, v });
        }
    }
    Ok(out)
}

/// Single-scale SSIM, averaged over images and channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (pa, pb) = (planes(a)?, planes(b)?);
    if pa.is_empty() {
        return Err(Error::Empty("image"));
    }
    Ok(pa.iter().zip(&pb).map(|(x, y)| ssim_terms(x, y, SSIM_WINDOW).0).sum::<f64>() / pa.len() as f64)
}

/// Five-scale MS-SSIM of NHWC images, averaged over images and channels.
///
/// Images smaller than the window at some scale use a window clipped to
/// that scale's size (same σ); from 176×176 up every scale has the full
/// window.
pub fn ms_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (pa, pb) = (planes(a)?, planes(b)?);
    if pa.is_empty() {
        return Err(Error::Empty("image"));
    }
    let mut total = 0.0;
    for (x, y) in pa.into_iter().zip(pb) {
        let (mut x, mut y) = (x, y);
        let mut value = 1.0;
        for (k, &weight) in MS_SSIM_WEIGHTS.iter().enumerate() {
            if k > 0 {
                x = x.downsample();
                y = y.downsample();
            }
            let (s, cs) = ssim_terms(&x, &y, SSIM_WINDOW);
            let term = if k + 1 == MS_SSIM_WEIGHTS.len() { s } else { cs };
            value *= term.max(0.0).powf(weight);
        }
        total += value;
    }
    Ok(total / a.batch().max(1) as f64 / a.channels() as f64)
}
