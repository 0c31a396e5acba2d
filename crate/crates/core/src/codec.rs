//! Patch codec: tiling, per-patch binary codes, the bitstream file and
//! frame reconstruction.
//!
//! Stream layout (all integers little-endian):
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `NQEB` |
//! | 1 | version (1) |
//! | 4 | height |
//! | 4 | width |
//! | 2 | patch size |
//! | 2 | rows |
//! | 2 | cols |
//! | 2 | F |
//! | ⌈rows·cols·4F / 8⌉ | payload, 4F bits per patch, row-major, LSB first |
//! | 8 | first 8 bytes of SHA-256 over everything before |
//!
//! Unused bits of the last payload byte must be zero.

use bitvec::prelude::*;
use sha2::{Digest, Sha256};

use crate::data::frames_to_patches;
use crate::error::{Error, Result};
use crate::integer::{tensor_pixels, IntegerModel};
use crate::model::{Nqe, Output};
use crate::purenet::{tile_patches, Decoder};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"NQEB";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 4 + 2 * 4;
const CHECK_LEN: usize = 8;
/// Patches encoded per forward call.
const ENCODE_CHUNK: usize = 32;

/// Non-overlapping tiling of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    /// `[rows·cols, p, p, 3]`, row-major.
    pub patches: Tensor,
}

impl PatchGrid {
    pub fn patch_size(&self) -> usize {
        self.patches.shape()[1]
    }

    /// The frame the grid was cut from, `[1, H, W, 3]`.
    pub fn reassemble(&self) -> Result<Tensor> {
        tile_patches(&self.patches, self.rows, self.cols)
    }
}

/// Tiles a single `[1, H, W, 3]` frame; both sides must be multiples of
/// `patch`.
pub fn extract_patches(frame: &Tensor, patch: usize) -> Result<PatchGrid> {
    let [n, _, _, c] = frame.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::shape(format!("expected one RGB frame, got {:?}", frame.shape())));
    }
    if patch == 0 {
        return Err(Error::config("patch size must be positive"));
    }
    let (patches, rows, cols) = frames_to_patches(frame, patch)?;
    Ok(PatchGrid { rows, cols, patches })
}

/// Anything that maps `p×p` patches on the 8-bit input grid to `4F`-bit codes.
pub trait PatchEncoder {
    fn patch_size(&self) -> usize;
    fn code_bits(&self) -> usize;
    /// Codes of `[n, p, p, 3]` patches, `n · code_bits` values in `{0, 1}`.
    fn encode_patches(&self, patches: &Tensor) -> Result<Vec<bool>>;
}

impl PatchEncoder for Nqe {
    fn patch_size(&self) -> usize {
        self.config().input_size
    }

    fn code_bits(&self) -> usize {
        self.config().code_bits()
    }

    fn encode_patches(&self, patches: &Tensor) -> Result<Vec<bool>> {
        Ok(self.encode(patches)?.data().iter().map(|&v| v > 0.5).collect())
    }
}

impl PatchEncoder for IntegerModel {
    fn patch_size(&self) -> usize {
        self.config.input_size
    }

    fn code_bits(&self) -> usize {
        self.config.code_bits()
    }

    fn encode_patches(&self, patches: &Tensor) -> Result<Vec<bool>> {
        let pixels = tensor_pixels(patches)?;
        Ok(self
            .forward(&pixels, patches.batch(), Output::Code)?
            .into_iter()
            .map(|b| b == 1)
            .collect())
    }
}

/// Header and payload of one compressed frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
    pub f: usize,
    pub payload: BitVec<u8, Lsb0>,
}

fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::format(format!("{what} {v} does not fit the header")))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format(format!("{what} {v} does not fit the header")))
}

impl Bitstream {
    pub fn code_bits(&self) -> usize {
        4 * self.f
    }

    pub fn patches(&self) -> usize {
        self.rows * self.cols
    }

    /// Payload bits per pixel, header excluded.
    pub fn bits_per_pixel(&self) -> f64 {
        self.payload.len() as f64 / (self.height * self.width) as f64
    }

    /// Code of patch `i` (row-major).
    pub fn code(&self, i: usize) -> &BitSlice<u8, Lsb0> {
        let b = self.code_bits();
        &self.payload[i * b..(i + 1) * b]
    }

    /// Codes as a `[rows·cols, 4F]` tensor of `{0, 1}`.
    pub fn codes_tensor(&self) -> Tensor {
        let data = self.payload.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
        Tensor::new(&[self.patches(), self.code_bits()], data).expect("payload length checked")
    }

    fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.f == 0 {
            return Err(Error::format("patch size and F must be positive"));
        }
        if self.rows * self.patch != self.height || self.cols * self.patch != self.width {
            return Err(Error::format(format!(
                "{}x{} grid of {}-pixel patches does not cover {}x{}",
                self.rows, self.cols, self.patch, self.height, self.width
            )));
        }
        if self.payload.len() != self.patches() * self.code_bits() {
            return Err(Error::format(format!(
                "payload has {} bits, expected {}",
                self.payload.len(),
                self.patches() * self.code_bits()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len().div_ceil(8) + CHECK_LEN);
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&to_u32(self.height, "height")?.to_le_bytes());
        out.extend_from_slice(&to_u32(self.width, "width")?.to_le_bytes());
        for (v, what) in [
            (self.patch, "patch size"),
            (self.rows, "rows"),
            (self.cols, "cols"),
            (self.f, "F"),
        ] {
            out.extend_from_slice(&to_u16(v, what)?.to_le_bytes());
        }
        let mut payload = self.payload.clone();
        payload.set_uninitialized(false);
        out.extend_from_slice(payload.as_raw_slice());
        let check = Sha256::digest(&out);
        out.extend_from_slice(&check[..CHECK_LEN]);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + CHECK_LEN {
            return Err(Error::format("bitstream is shorter than its header"));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::format("not a bitstream (bad magic)"));
        }
        if bytes[4] != VERSION {
            return Err(Error::format(format!("unsupported bitstream version {}", bytes[4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().expect("2 bytes")) as usize;
        let (height, width) = (u32_at(5), u32_at(9));
        let (patch, rows, cols, f) = (u16_at(13), u16_at(15), u16_at(17), u16_at(19));
        let bits = rows * cols * 4 * f;
        let expected = HEADER_LEN + bits.div_ceil(8) + CHECK_LEN;
        if bytes.len() != expected {
            return Err(Error::format(format!(
                "bitstream has {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let body = &bytes[..expected - CHECK_LEN];
        if Sha256::digest(body)[..CHECK_LEN] != bytes[expected - CHECK_LEN..] {
            return Err(Error::format("bitstream checksum mismatch"));
        }
        let mut payload = BitVec::<u8, Lsb0>::from_slice(&body[HEADER_LEN..]);
        if payload[bits..].any() {
            return Err(Error::format("nonzero padding after the payload"));
        }
        payload.truncate(bits);
        let bs = Bitstream {
            height,
            width,
            patch,
            rows,
            cols,
            f,
            payload,
        };
        bs.validate()?;
        Ok(bs)
    }
}

/// Encodes a `[1, H, W, 3]` frame on the 8-bit input grid, one patch at a
/// time in effect (patches never see each other).
pub fn encode_image(frame: &Tensor, encoder: &dyn PatchEncoder) -> Result<Bitstream> {
    let code_bits = encoder.code_bits();
    if !code_bits.is_multiple_of(4) {
        return Err(Error::config(format!("code length {code_bits} is not 4F")));
    }
    let grid = extract_patches(frame, encoder.patch_size())?;
    let n = grid.patches.batch();
    let mut payload = BitVec::<u8, Lsb0>::with_capacity(n * code_bits);
    let mut start = 0;
    while start < n {
        let end = (start + ENCODE_CHUNK).min(n);
        let chunk = grid.patches.batch_range(start, end);
        let bits = encoder.encode_patches(&chunk)?;
        if bits.len() != (end - start) * code_bits {
            return Err(Error::shape(format!(
                "encoder returned {} bits for {} patches of {code_bits}",
                bits.len(),
                end - start
            )));
        }
        payload.extend(bits);
        start = end;
    }
    let [_, height, width, _] = frame.dims4()?;
    Ok(Bitstream {
        height,
        width,
        patch: grid.patch_size(),
        rows: grid.rows,
        cols: grid.cols,
        f: code_bits / 4,
        payload,
    })
}

/// Reconstructs the frame, `[1, H, W, 3]` in `[0, 1]`.
pub fn decode_image(bs: &Bitstream, decoder: &Decoder) -> Result<Tensor> {
    bs.validate()?;
    if decoder.code_bits() != bs.code_bits() {
        return Err(Error::config(format!(
            "decoder takes {}-bit codes, stream carries {}",
            decoder.code_bits(),
            bs.code_bits()
        )));
    }
    if decoder.patch_size() != bs.patch {
        return Err(Error::config(format!(
            "decoder emits {}-pixel patches, stream uses {}",
            decoder.patch_size(),
            bs.patch
        )));
    }
    decoder.decode(&bs.codes_tensor(), bs.rows, bs.cols)
}
