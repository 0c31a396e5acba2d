//! Datasets: bundled synthetic sets plus CIFAR-10 / image-folder loaders.
//!
//! Every image is stored as `p/256` for 8-bit pixels `p`, the encoder's
//! input grid.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled images, NHWC.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let [n, ..] = images.dims4()?;
        if n != labels.len() {
            return Err(Error::shape(format!("{n} images but {} labels", labels.len())));
        }
        if n == 0 {
            return Err(Error::Empty("dataset"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::config(format!("label {bad} outside {classes} classes")));
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[1]
    }

    /// Gathers the given samples.
    pub fn select(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let samples: Vec<Tensor> = idx.iter().map(|&i| self.images.sample(i)).collect();
        let images = Tensor::stack(&samples).expect("same-shaped samples");
        (images, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Rounds `[0, 1]` intensities onto the 8-bit input grid.
pub fn to_input_grid(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 256.0
}

/// Oriented-texture classification set: class `k` draws stripes at angle
/// `k·π/classes` with random phase, period, colors and noise.
pub fn synthetic_textures(n: usize, size: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::config("need at least two classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * size * size * 3);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let angle = std::f32::consts::PI * label as f32 / classes as f32;
        let (dy, dx) = angle.sin_cos();
        let period = rng.random_range(3.0f32..5.0);
        let phase = rng.random_range(0.0f32..std::f32::consts::TAU);
        let fg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.5f32..1.0));
        let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0f32..0.4));
        for y in 0..size {
            for x in 0..size {
                let t = (x as f32 * dx + y as f32 * dy) * std::f32::consts::TAU / period + phase;
                let on = t.sin() > 0.0;
                for c in 0..3 {
                    let base = if on { fg[c] } else { bg[c] };
                    data.push(to_input_grid(base + rng.random_range(-0.05f32..0.05)));
                }
            }
        }
        labels.push(label);
    }
    let images = Tensor::new(&[n, size, size, 3], data)?;
    let mut ds = Dataset::new(images, labels, classes)?;
    // Interleaved labels are convenient to build but a poor sample order.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (images, labels) = ds.select(&order);
    ds.images = images;
    ds.labels = labels;
    Ok(ds)
}

/// Smooth natural-looking tiles: a color gradient plus a few soft-edged
/// discs and rectangles.
pub fn synthetic_tiles(n: usize, height: usize, width: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * height * width * 3);
    for _ in 0..n {
        let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.2f32..0.8));
        let gy: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.3f32..0.3));
        let gx: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.3f32..0.3));
        let shapes: Vec<(bool, f32, f32, f32, [f32; 3])> = (0..3)
            .map(|_| {
                (
                    rng.random::<bool>(),
                    rng.random_range(0.0..height as f32),
                    rng.random_range(0.0..width as f32),
                    rng.random_range(2.0f32..(height.min(width) as f32 / 2.0).max(2.5)),
                    std::array::from_fn(|_| rng.random_range(-0.4f32..0.4)),
                )
            })
            .collect();
        for y in 0..height {
            for x in 0..width {
                let fy = y as f32 / height as f32 - 0.5;
                let fx = x as f32 / width as f32 - 0.5;
                let mut px: [f32; 3] = std::array::from_fn(|c| base[c] + gy[c] * fy + gx[c] * fx);
                for &(disc, cy, cx, r, tint) in &shapes {
                    let d = if disc {
                        ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt() - r
                    } else {
                        (y as f32 - cy).abs().max((x as f32 - cx).abs()) - r
                    };
                    let alpha = (0.5 - d / 2.0).clamp(0.0, 1.0);
                    for c in 0..3 {
                        px[c] += alpha * tint[c];
                    }
                }
                data.extend(px.iter().map(|&v| to_input_grid(v)));
            }
        }
    }
    Tensor::new(&[n, height, width, 3], data).expect("consistent size")
}

/// Splits frames `[N, H, W, 3]` into non-overlapping patches
/// `[N·rows·cols, p, p, 3]`, row-major per frame.
pub fn frames_to_patches(frames: &Tensor, patch: usize) -> Result<(Tensor, usize, usize)> {
    let [_, h, w, _] = frames.dims4()?;
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!("{h}x{w} is not a multiple of the {patch}-pixel patch")));
    }
    let (rows, cols) = (h / patch, w / patch);
    Ok((crate::autograd::unmosaic(frames, rows, cols)?, rows, cols))
}

/// Reads CIFAR-10 binary batches (`1 + 3072` bytes per record, CHW).
pub fn load_cifar10(paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    const RECORD: usize = 1 + 3 * 32 * 32;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = fs::read(path)?;
        if bytes.len() % RECORD != 0 {
            return Err(Error::format(format!(
                "{}: {} bytes is not a whole number of CIFAR records",
                path.as_ref().display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks(RECORD) {
            labels.push(rec[0] as usize);
            let px = &rec[1..];
            for y in 0..32 {
                for x in 0..32 {
                    for c in 0..3 {
                        data.push(px[c * 1024 + y * 32 + x] as f32 / 256.0);
                    }
                }
            }
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new(&[n, 32, 32, 3], data)?, labels, 10)
}

/// Loads an 8-bit RGB image as `[1, H, W, 3]` on the input grid.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|p| p as f32 / 256.0).collect();
    Tensor::new(&[1, h as usize, w as usize, 3], data)
}

/// Writes `[1, H, W, 3]` in `[0, 1]` as an 8-bit image; format from the
/// extension.
pub fn save_image(path: &Path, frame: &Tensor) -> Result<()> {
    let [n, h, w, c] = frame.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::shape(format!("expected one RGB frame, got {:?}", frame.shape())));
    }
    let bytes: Vec<u8> = frame.data().iter().map(|&v| to_byte(v)).collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dims");
    img.save(path)?;
    Ok(())
}

/// Inverse of the input grid for pixels produced by the decoder.
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 256.0).round().min(255.0) as u8
}

/// Every non-overlapping `patch`-sized crop from the images of a folder,
/// cropped to a multiple of the patch first.
pub fn load_patch_folder(dir: &Path, patch: usize, limit: Option<usize>) -> Result<Tensor> {
    let mut entries: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pnm"))
        })
        .collect();
    entries.sort();
    let mut patches = Vec::new();
    for path in entries {
        let img = load_image(&path)?;
        let [_, h, w, _] = img.dims4()?;
        let (ch, cw) = (h / patch * patch, w / patch * patch);
        if ch == 0 || cw == 0 {
            continue;
        }
        let cropped = crop(&img, 0, 0, ch, cw)?;
        let (p, _, _) = frames_to_patches(&cropped, patch)?;
        for i in 0..p.batch() {
            patches.push(p.sample(i));
            if limit.is_some_and(|l| patches.len() >= l) {
                return Tensor::stack(&patches);
            }
        }
    }
    if patches.is_empty() {
        return Err(Error::Empty("image folder"));
    }
    Tensor::stack(&patches)
}

/// Crops `[1, H, W, C]` to the window at `(top, left)`.
pub fn crop(frame: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
    let [n, fh, fw, c] = frame.dims4()?;
    if n != 1 || top + h > fh || left + w > fw {
        return Err(Error::shape(format!(
            "crop {h}x{w} at ({top}, {left}) outside {:?}",
            frame.shape()
        )));
    }
    let mut out = Vec::with_capacity(h * w * c);
    for y in top..top + h {
        let row = (y * fw + left) * c;
        out.extend_from_slice(&frame.data()[row..row + w * c]);
    }
    Tensor::new(&[1, h, w, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_are_balanced_and_on_grid() {
        let ds = synthetic_textures(40, 8, 4, 1).unwrap();
        assert_eq!(ds.images.shape(), &[40, 8, 8, 3]);
        for k in 0..4 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == k).count(), 10);
        }
        assert!(ds.images.data().iter().all(|&v| (v * 256.0).fract() == 0.0 && v < 1.0));
    }

    #[test]
    fn tiles_patch_round_trip() {
        let t = synthetic_tiles(2, 16, 24, 3);
        let (p, rows, cols) = frames_to_patches(&t, 8).unwrap();
        assert_eq!((rows, cols), (2, 3));
        assert_eq!(p.shape(), &[12, 8, 8, 3]);
        assert_eq!(crate::autograd::mosaic(&p, rows, cols).unwrap(), t);
        assert!(frames_to_patches(&t, 5).is_err());
    }

    #[test]
    fn cifar_record_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i % 256) as u8));
        let path = dir.path().join("b.bin");
        fs::write(&path, &rec).unwrap();
        let ds = load_cifar10(&[&path]).unwrap();
        assert_eq!(ds.labels, vec![7]);
        // Pixel (0, 1): red from plane 0 offset 1, green from plane 1.
        assert_eq!(ds.images.data()[3], 1.0 / 256.0);
        assert_eq!(ds.images.data()[4], 1 as f32 / 256.0);
        fs::write(&path, &rec[..100]).unwrap();
        assert!(load_cifar10(&[&path]).is_err());
    }

    #[test]
    fn image_io_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = synthetic_tiles(1, 8, 8, 4);
        for ext in ["png", "ppm"] {
            let path = dir.path().join(format!("a.{ext}"));
            save_image(&path, &t).unwrap();
            assert_eq!(load_image(&path).unwrap(), t);
        }
        let patches = load_patch_folder(dir.path(), 4, Some(5)).unwrap();
        assert_eq!(patches.shape(), &[5, 4, 4, 3]);
    }
}
