//! Run configuration files (TOML).
//!
//! ```toml
//! task = "classify"        # or "codec"
//! seed = 0
//!
//! [model]                  # encoder topology
//! f = 8
//! input_size = 8
//! classes = 4
//!
//! [train]                  # classification protocol
//! [model.decoder]          # decoder (codec task)
//! [codec]                  # codec protocol
//!
//! [data]
//! source = "synthetic"     # or "cifar10" / "folder"
//! ```

use std::path::{Path, PathBuf};

use nqe::codec::extract_patches;
use nqe::data::{crop, frames_to_patches, load_cifar10, load_image, load_patch_folder, synthetic_textures, synthetic_tiles, Dataset};
use nqe::topology::ModelConfig;
use nqe::train::{CodecConfig, TrainConfig};
use nqe::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Codec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub task: Option<Task>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub codec: Option<CodecConfig>,
    #[serde(default)]
    pub data: DataConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Cifar10,
    Folder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub source: DataSource,
    /// Training samples (classification images or codec frames).
    #[serde(default = "default_train")]
    pub train: usize,
    /// Held-out samples.
    #[serde(default = "default_test")]
    pub test: usize,
    /// Side of square codec frames (a multiple of the patch size); 0 takes
    /// whole images from a folder, which must then share one size.
    #[serde(default = "default_frame")]
    pub frame_size: usize,
    /// CIFAR-10 training batches.
    #[serde(default)]
    pub paths: Vec<PathBuf>,
    /// CIFAR-10 test batch.
    #[serde(default)]
    pub test_paths: Vec<PathBuf>,
    /// Image folder for codec training.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Image folder for codec evaluation.
    #[serde(default)]
    pub test_dir: Option<PathBuf>,
}

fn default_train() -> usize {
    512
}
fn default_test() -> usize {
    256
}
fn default_frame() -> usize {
    16
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            train: default_train(),
            test: default_test(),
            frame_size: default_frame(),
            paths: Vec::new(),
            test_paths: Vec::new(),
            dir: None,
            test_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        config.model.validate()?;
        if let Some(t) = &config.train {
            t.validate()?;
        }
        if let Some(c) = &config.codec {
            c.validate()?;
        }
        Ok(config)
    }

    /// Every file the configuration reads.
    pub fn input_files(&self) -> Vec<PathBuf> {
        let d = &self.data;
        d.paths.iter().chain(&d.test_paths).cloned().collect()
    }

    pub fn classification_data(&self, seed: u64) -> CliResult<(Dataset, Dataset)> {
        let d = &self.data;
        let m = &self.model;
        match d.source {
            DataSource::Synthetic => Ok((
                synthetic_textures(d.train, m.input_size, m.classes, seed)?,
                synthetic_textures(d.test, m.input_size, m.classes, seed + 1)?,
            )),
            DataSource::Cifar10 => {
                if d.paths.is_empty() || d.test_paths.is_empty() {
                    return Err(CliError::Validation("cifar10 needs `paths` and `test_paths`".into()));
                }
                Ok((load_cifar10(&d.paths)?, load_cifar10(&d.test_paths)?))
            }
            DataSource::Folder => Err(CliError::Validation("classification data cannot come from a folder".into())),
        }
    }

    /// Training and held-out frames `[N, H, W, 3]` for the codec.
    pub fn codec_frames(&self, seed: u64) -> CliResult<(Tensor, Tensor)> {
        let d = &self.data;
        let p = self.model.input_size;
        match d.source {
            DataSource::Synthetic => {
                if !d.frame_size.is_multiple_of(p) {
                    return Err(CliError::Validation(format!(
                        "frame_size {} is not a multiple of the {p}-pixel patch",
                        d.frame_size
                    )));
                }
                Ok((
                    synthetic_tiles(d.train, d.frame_size, d.frame_size, seed),
                    synthetic_tiles(d.test, d.frame_size, d.frame_size, seed + 1),
                ))
            }
            DataSource::Folder => {
                if !d.frame_size.is_multiple_of(p) {
                    return Err(CliError::Validation(format!(
                        "frame_size {} is not a multiple of the {p}-pixel patch",
                        d.frame_size
                    )));
                }
                let dir = d.dir.as_ref().ok_or_else(|| CliError::Validation("folder data needs `dir`".into()))?;
                let test = d.test_dir.as_ref().unwrap_or(dir);
                Ok((folder_frames(dir, d.frame_size, d.train)?, folder_frames(test, d.frame_size, d.test)?))
            }
            DataSource::Cifar10 => Err(CliError::Validation("codec data comes from `synthetic` or `folder`".into())),
        }
    }
}

/// `size × size` crops of a folder's images, or the images themselves.
fn folder_frames(dir: &Path, size: usize, limit: usize) -> CliResult<Tensor> {
    if size > 0 {
        return Ok(load_patch_folder(dir, size, Some(limit))?);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::input(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pnm"))
        })
        .collect();
    paths.sort();
    paths.truncate(limit);
    let frames = paths
        .iter()
        .map(|p| Ok(load_image(p)?))
        .collect::<CliResult<Vec<_>>>()?;
    if frames.is_empty() {
        return Err(CliError::Validation(format!("no images in {}", dir.display())));
    }
    Ok(Tensor::stack(&frames)?)
}

/// Frames cut into patches for stage A.
pub fn patches_of(frames: &Tensor, patch: usize) -> CliResult<Tensor> {
    Ok(frames_to_patches(frames, patch)?.0)
}

/// Loads an image and crops it to a multiple of `patch` when `crop_to_grid`.
pub fn load_frame(path: &Path, patch: usize, crop_to_grid: bool) -> CliResult<Tensor> {
    let img = load_image(path).map_err(|e| match e {
        nqe::Error::Io(io) => CliError::input(path, io),
        other => other.into(),
    })?;
    if !crop_to_grid {
        return Ok(img);
    }
    let [_, h, w, _] = img.dims4()?;
    let (ch, cw) = (h / patch * patch, w / patch * patch);
    if ch == 0 || cw == 0 {
        return Err(CliError::Validation(format!("{} is smaller than one patch", path.display())));
    }
    let img = crop(&img, 0, 0, ch, cw)?;
    extract_patches(&img, patch)?;
    Ok(img)
}
