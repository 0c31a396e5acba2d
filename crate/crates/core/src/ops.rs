//! Layer kernels shared by the training path (f32) and the integer path.
//!
//! Feature maps are NHWC. Convolution weights are `[kh, kw, in_per_group,
//! out]`; dense weights are `[in, out]`. All convolutions have stride 1
//! (transpose convolutions have their own geometry).

use std::ops::{Add, AddAssign, Mul, Neg};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scalar types the kernels run on.
pub trait Element:
    Copy
    + Default
    + PartialEq
    + PartialOrd
    + AddAssign
    + Add<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
{
    fn zero() -> Self {
        Self::default()
    }
}

impl Element for f32 {}
impl Element for f64 {}
impl Element for i32 {}
impl Element for i64 {}

/// Geometry of a stride-1 grouped convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel_h: usize,
    pub kernel_w: usize,
    /// Zero padding on every side.
    pub pad: usize,
    pub groups: usize,
    /// Interleave the output channels of the groups (channel shuffle).
    pub shuffle: bool,
}

impl ConvGeom {
    pub fn square(kernel: usize, pad: usize) -> Self {
        ConvGeom {
            kernel_h: kernel,
            kernel_w: kernel,
            pad,
            groups: 1,
            shuffle: false,
        }
    }

    /// "Same" padding for an odd square kernel.
    pub fn same(kernel: usize) -> Self {
        Self::square(kernel, kernel / 2)
    }

    pub fn grouped(mut self, groups: usize, shuffle: bool) -> Self {
        self.groups = groups;
        self.shuffle = shuffle;
        self
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.pad;
        let pw = w + 2 * self.pad;
        if self.kernel_h > ph || self.kernel_w > pw {
            return Err(Error::shape(format!(
                "kernel {}x{} larger than padded input {ph}x{pw}",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok((ph - self.kernel_h + 1, pw - self.kernel_w + 1))
    }

    fn check(&self, cin: usize, cout: usize, wlen: usize) -> Result<usize> {
        if self.groups == 0 || !cin.is_multiple_of(self.groups) || !cout.is_multiple_of(self.groups) {
            return Err(Error::shape(format!(
                "channels {cin}->{cout} not divisible by {} groups",
                self.groups
            )));
        }
        let cin_g = cin / self.groups;
        let expected = self.kernel_h * self.kernel_w * cin_g * cout;
        if wlen != expected {
            return Err(Error::shape(format!(
                "weight holds {wlen} values, geometry needs {expected}"
            )));
        }
        Ok(cin_g)
    }
}

/// Position of pre-shuffle output channel `o` after the group shuffle.
pub fn shuffled_channel(o: usize, cout: usize, groups: usize) -> usize {
    let per = cout / groups;
    (o % per) * groups + o / per
}

fn shuffle_rows<T: Element>(data: &mut [T], cout: usize, groups: usize, inverse: bool) {
    let mut tmp = vec![T::zero(); cout];
    for row in data.chunks_mut(cout) {
        for (o, &v) in row.iter().enumerate() {
            let s = shuffled_channel(o, cout, groups);
            if inverse {
                tmp[o] = row[s];
            } else {
                tmp[s] = v;
            }
        }
        row.copy_from_slice(&tmp);
    }
}

/// Grouped stride-1 convolution (cross-correlation) over NHWC input.
pub fn conv2d_raw<T: Element>(
    x: &[T],
    xd: [usize; 4],
    w: &[T],
    cout: usize,
    geom: &ConvGeom,
) -> Result<(Vec<T>, [usize; 4])> {
    let [n, h, wd, cin] = xd;
    if x.len() != n * h * wd * cin {
        return Err(Error::shape("input length does not match its dims"));
    }
    let cin_g = geom.check(cin, cout, w.len())?;
    let (oh, ow) = geom.output_hw(h, wd)?;
    let cout_g = cout / geom.groups;
    let (kh, kw, pad) = (geom.kernel_h, geom.kernel_w, geom.pad as isize);
    let mut out = vec![T::zero(); n * oh * ow * cout];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = ((b * oh + oy) * ow + ox) * cout;
                let orow = &mut out[obase..obase + cout];
                for ky in 0..kh {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = ox as isize + kx as isize - pad;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let ibase = ((b * h + iy as usize) * wd + ix as usize) * cin;
                        let tap = (ky * kw + kx) * cin_g;
                        for g in 0..geom.groups {
                            let ostart = g * cout_g;
                            for ci in 0..cin_g {
                                let a = x[ibase + g * cin_g + ci];
                                if a == T::zero() {
                                    continue;
                                }
                                let wbase = (tap + ci) * cout + ostart;
                                let wrow = &w[wbase..wbase + cout_g];
                                for (o, &wv) in orow[ostart..ostart + cout_g].iter_mut().zip(wrow) {
                                    *o += a * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if geom.shuffle && geom.groups > 1 {
        shuffle_rows(&mut out, cout, geom.groups, false);
    }
    Ok((out, [n, oh, ow, cout]))
}

/// Gradients of [`conv2d_raw`] with respect to input and weights.
pub fn conv2d_backward_raw(
    x: &[f32],
    xd: [usize; 4],
    w: &[f32],
    cout: usize,
    geom: &ConvGeom,
    dy: &[f32],
) -> Result<(Vec<f32>, Vec<f32>)> {
    let [n, h, wd, cin] = xd;
    let cin_g = geom.check(cin, cout, w.len())?;
    let (oh, ow) = geom.output_hw(h, wd)?;
    if dy.len() != n * oh * ow * cout {
        return Err(Error::shape("upstream gradient does not match conv output"));
    }
    let mut dy = dy.to_vec();
    if geom.shuffle && geom.groups > 1 {
        shuffle_rows(&mut dy, cout, geom.groups, true);
    }
    let cout_g = cout / geom.groups;
    let (kh, kw, pad) = (geom.kernel_h, geom.kernel_w, geom.pad as isize);
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; w.len()];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = ((b * oh + oy) * ow + ox) * cout;
                let grow = &dy[obase..obase + cout];
                if grow.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for ky in 0..kh {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = ox as isize + kx as isize - pad;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let ibase = ((b * h + iy as usize) * wd + ix as usize) * cin;
                        let tap = (ky * kw + kx) * cin_g;
                        for g in 0..geom.groups {
                            let ostart = g * cout_g;
                            let gslice = &grow[ostart..ostart + cout_g];
                            for ci in 0..cin_g {
                                let wbase = (tap + ci) * cout + ostart;
                                let wrow = &w[wbase..wbase + cout_g];
                                let dot: f32 = wrow.iter().zip(gslice).map(|(a, b)| a * b).sum();
                                let xi = ibase + g * cin_g + ci;
                                dx[xi] += dot;
                                let a = x[xi];
                                if a != 0.0 {
                                    for (d, &gv) in dw[wbase..wbase + cout_g].iter_mut().zip(gslice) {
                                        *d += a * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw))
}

/// Geometry of a transpose convolution; output size is
/// `(in - 1)·stride - 2·pad + kernel + output_padding`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTransposeGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_padding: usize,
}

impl ConvTransposeGeom {
    /// 3×3, stride 2, doubling the spatial size.
    pub fn upsample2() -> Self {
        ConvTransposeGeom {
            kernel: 3,
            stride: 2,
            pad: 1,
            output_padding: 1,
        }
    }

    pub fn output_len(&self, len: usize) -> usize {
        ((len - 1) * self.stride + self.kernel + self.output_padding).saturating_sub(2 * self.pad)
    }
}

/// Transpose convolution, weights `[k, k, cin, cout]`.
pub fn conv_transpose2d_raw(
    x: &[f32],
    xd: [usize; 4],
    w: &[f32],
    cout: usize,
    geom: &ConvTransposeGeom,
) -> Result<(Vec<f32>, [usize; 4])> {
    let [n, h, wd, cin] = xd;
    let k = geom.kernel;
    if w.len() != k * k * cin * cout {
        return Err(Error::shape("transpose-conv weight size mismatch"));
    }
    let (oh, ow) = (geom.output_len(h), geom.output_len(wd));
    let mut out = vec![0.0f32; n * oh * ow * cout];
    for b in 0..n {
        for iy in 0..h {
            for ix in 0..wd {
                let ibase = ((b * h + iy) * wd + ix) * cin;
                for ky in 0..k {
                    let oy = (iy * geom.stride + ky) as isize - geom.pad as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ox = (ix * geom.stride + kx) as isize - geom.pad as isize;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        let obase = ((b * oh + oy as usize) * ow + ox as usize) * cout;
                        for ci in 0..cin {
                            let a = x[ibase + ci];
                            if a == 0.0 {
                                continue;
                            }
                            let wbase = ((ky * k + kx) * cin + ci) * cout;
                            for (o, &wv) in out[obase..obase + cout].iter_mut().zip(&w[wbase..wbase + cout]) {
                                *o += a * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out, [n, oh, ow, cout]))
}

pub fn conv_transpose2d_backward_raw(
    x: &[f32],
    xd: [usize; 4],
    w: &[f32],
    cout: usize,
    geom: &ConvTransposeGeom,
    dy: &[f32],
) -> Result<(Vec<f32>, Vec<f32>)> {
    let [n, h, wd, cin] = xd;
    let k = geom.kernel;
    let (oh, ow) = (geom.output_len(h), geom.output_len(wd));
    if dy.len() != n * oh * ow * cout {
        return Err(Error::shape("upstream gradient does not match transpose-conv output"));
    }
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; w.len()];
    for b in 0..n {
        for iy in 0..h {
            for ix in 0..wd {
                let ibase = ((b * h + iy) * wd + ix) * cin;
                for ky in 0..k {
                    let oy = (iy * geom.stride + ky) as isize - geom.pad as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ox = (ix * geom.stride + kx) as isize - geom.pad as isize;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        let obase = ((b * oh + oy as usize) * ow + ox as usize) * cout;
                        let grow = &dy[obase..obase + cout];
                        for ci in 0..cin {
                            let wbase = ((ky * k + kx) * cin + ci) * cout;
                            let wrow = &w[wbase..wbase + cout];
                            dx[ibase + ci] += wrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f32>();
                            let a = x[ibase + ci];
                            if a != 0.0 {
                                for (d, &gv) in dw[wbase..wbase + cout].iter_mut().zip(grow) {
                                    *d += a * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw))
}

/// `y = x · W` for `x: [n, in]`, `W: [in, out]`.
pub fn dense_raw<T: Element>(x: &[T], n: usize, w: &[T], fan_in: usize, out: usize) -> Result<Vec<T>> {
    if x.len() != n * fan_in || w.len() != fan_in * out {
        return Err(Error::shape(format!(
            "dense {fan_in}->{out} given input of {} and weights of {}",
            x.len(),
            w.len()
        )));
    }
    let mut y = vec![T::zero(); n * out];
    for b in 0..n {
        let yrow = &mut y[b * out..(b + 1) * out];
        for i in 0..fan_in {
            let a = x[b * fan_in + i];
            if a == T::zero() {
                continue;
            }
            for (o, &wv) in yrow.iter_mut().zip(&w[i * out..(i + 1) * out]) {
                *o += a * wv;
            }
        }
    }
    Ok(y)
}

pub fn dense_backward_raw(
    x: &[f32],
    n: usize,
    w: &[f32],
    fan_in: usize,
    out: usize,
    dy: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0f32; n * fan_in];
    let mut dw = vec![0.0f32; fan_in * out];
    for b in 0..n {
        let grow = &dy[b * out..(b + 1) * out];
        for i in 0..fan_in {
            let wrow = &w[i * out..(i + 1) * out];
            dx[b * fan_in + i] = wrow.iter().zip(grow).map(|(a, b)| a * b).sum();
            let a = x[b * fan_in + i];
            if a != 0.0 {
                for (d, &gv) in dw[i * out..(i + 1) * out].iter_mut().zip(grow) {
                    *d += a * gv;
                }
            }
        }
    }
    (dx, dw)
}

/// 2×2 stride-2 max pooling; returns the flat index of each winner (first on
/// ties).
pub fn maxpool2_raw<T: Element>(x: &[T], xd: [usize; 4]) -> Result<(Vec<T>, Vec<u32>, [usize; 4])> {
    let [n, h, w, c] = xd;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("max-pool needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best_i = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if x[i] > x[best_i] {
                            best_i = i;
                        }
                    }
                    out.push(x[best_i]);
                    arg.push(best_i as u32);
                }
            }
        }
    }
    Ok((out, arg, [n, oh, ow, c]))
}

pub fn conv2d(x: &Tensor, w: &Tensor, geom: &ConvGeom) -> Result<Tensor> {
    let xd = x.dims4()?;
    let cout = w.channels();
    let (y, yd) = conv2d_raw(x.data(), xd, w.data(), cout, geom)?;
    Tensor::new(&yd, y)
}

/// Grouped convolution with channel shuffle.
pub fn group_conv(x: &Tensor, w: &Tensor, kernel: usize, groups: usize) -> Result<Tensor> {
    conv2d(x, w, &ConvGeom::same(kernel).grouped(groups, true))
}

/// Per-channel valid convolution; weights `[k, k, 1, C]`.
pub fn depthwise_conv(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let [_, h, wd, c] = x.dims4()?;
    let shape = w.shape();
    if shape.len() != 4 || shape[2] != 1 || shape[3] != c {
        return Err(Error::shape(format!("depthwise weight {shape:?} for {c} channels")));
    }
    if shape[0] > h || shape[1] > wd {
        return Err(Error::shape(format!(
            "depthwise kernel {}x{} larger than input {h}x{wd}",
            shape[0], shape[1]
        )));
    }
    let geom = ConvGeom {
        kernel_h: shape[0],
        kernel_w: shape[1],
        pad: 0,
        groups: c,
        shuffle: false,
    };
    conv2d(x, w, &geom)
}

pub fn dense(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let [n, fan_in] = x.dims2()?;
    let [wi, out] = w.dims2()?;
    if wi != fan_in {
        return Err(Error::shape(format!("dense weight {wi}x{out} for input width {fan_in}")));
    }
    Tensor::new(&[n, out], dense_raw(x.data(), n, w.data(), fan_in, out)?)
}

pub fn maxpool2(x: &Tensor) -> Result<Tensor> {
    let (y, _, yd) = maxpool2_raw(x.data(), x.dims4()?)?;
    Tensor::new(&yd, y)
}

/// Adds one bias per channel (trailing dimension).
pub fn bias_add(x: &Tensor, b: &[f32]) -> Result<Tensor> {
    let c = x.channels();
    if b.len() != c {
        return Err(Error::shape(format!("{} biases for {c} channels", b.len())));
    }
    let mut y = x.clone();
    for row in y.data_mut().chunks_mut(c) {
        for (v, &bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
    Ok(y)
}
