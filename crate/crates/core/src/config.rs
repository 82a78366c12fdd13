//! Run configuration, read from and written to TOML.
//!
//! Every section rejects unknown keys. Missing keys take the `full` preset
//! defaults; [`RunConfig::desk`] is the reduced setting used by the tests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSpec, SceneSpec};
use crate::error::{Error, Result};
use crate::objective::{LossTerms, LossWeights, Normalization};
use crate::ssm::BlockConfig;

/// Dataset family; selects the default score weight `alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetStyle {
    Ped2,
    Avenue,
    Shanghai,
}

impl DatasetStyle {
    pub fn alpha(self) -> f64 {
        match self {
            DatasetStyle::Ped2 => 0.6,
            DatasetStyle::Avenue => 0.4,
            DatasetStyle::Shanghai => 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    /// Input frames per window; each window also carries one target frame.
    pub k: usize,
    pub frames_per_clip: usize,
    pub train_clips: usize,
    pub test_clips: usize,
    pub n_objects: usize,
    pub style: DatasetStyle,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            height: 256,
            width: 256,
            k: 16,
            frames_per_clip: 120,
            train_clips: 16,
            test_clips: 8,
            n_objects: 3,
            style: DatasetStyle::Ped2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub state_size: usize,
    pub expand: usize,
    pub n_blocks: usize,
    pub patch_sizes: Vec<usize>,
    pub temporal_windows: Vec<usize>,
    pub dw_kernels: Vec<usize>,
    pub memory_slots: usize,
    pub memory_temperature: f64,
    pub decoder_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 256,
            state_size: 16,
            expand: 2,
            n_blocks: 2,
            patch_sizes: vec![4, 8, 16],
            temporal_windows: vec![4, 8, 16],
            dw_kernels: vec![1, 3, 5],
            memory_slots: 10,
            memory_temperature: 0.1,
            decoder_channels: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Stop after this many optimiser steps (0 = no limit).
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 4,
            lr: 2e-4,
            lr_decay: 0.5,
            lr_decay_every: 20,
            max_steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    /// Frame-PSNR weight; the dataset style's value when absent.
    pub alpha: Option<f64>,
    pub psnr_ceiling: f64,
    pub normalization: Normalization,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            alpha: None,
            psnr_ceiling: crate::objective::PSNR_CEILING,
            normalization: Normalization::PerVideo,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub multi_scale_spatial: bool,
    pub multi_temporal: bool,
    pub decompose: bool,
    pub use_motion_loss: bool,
    pub use_separate_loss: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        multi_scale_spatial: true,
        multi_temporal: true,
        decompose: true,
        use_motion_loss: true,
        use_separate_loss: true,
    };

    /// Architecture ladder `M1`..`M4` and loss ladder `L1`..`L3`.
    pub fn preset(name: &str) -> Result<Ablation> {
        let f = Ablation::FULL;
        Ok(match name.to_ascii_uppercase().as_str() {
            "M1" => Ablation {
                multi_scale_spatial: false,
                multi_temporal: false,
                decompose: false,
                ..f
            },
            "M2" => Ablation {
                multi_temporal: false,
                decompose: false,
                ..f
            },
            "M3" => Ablation { decompose: false, ..f },
            "M4" | "L3" => f,
            "L1" => Ablation {
                use_motion_loss: false,
                use_separate_loss: false,
                ..f
            },
            "L2" => Ablation {
                use_separate_loss: false,
                ..f
            },
            other => return Err(Error::config(format!("unknown ablation preset {other:?}"))),
        })
    }

    pub fn loss_terms(&self) -> LossTerms {
        LossTerms {
            motion: self.use_motion_loss,
            separate: self.use_separate_loss && self.decompose,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub score: ScoreConfig,
    pub ablation: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            score: ScoreConfig::default(),
            ablation: Ablation::FULL,
        }
    }
}

impl RunConfig {
    pub fn full() -> Self {
        Self::default()
    }

    /// 64x64 frames, `D = 64`, `k = 8`, one epoch.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.data.height = 64;
        c.data.width = 64;
        c.data.k = 8;
        c.data.frames_per_clip = 48;
        c.model.d_model = 64;
        c.model.temporal_windows = vec![2, 4, 8];
        c.train.epochs = 1;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// Synthetic dataset matching the data section.
    pub fn dataset_spec(&self, write_raw: bool) -> DatasetSpec {
        let d = &self.data;
        DatasetSpec {
            scene: SceneSpec {
                height: d.height,
                width: d.width,
                frames: d.frames_per_clip,
                n_objects: d.n_objects,
                speed: SceneSpec::DEFAULT_SPEED,
            },
            train_clips: d.train_clips,
            test_clips: d.test_clips,
            k: d.k,
            seed: self.seed,
            write_raw,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.score.alpha.unwrap_or(self.data.style.alpha())
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.model.d_model,
            state_size: self.model.state_size,
            expand: self.model.expand,
            dw_kernels: self.model.dw_kernels.clone(),
            n_blocks: self.model.n_blocks,
            conv_kernel: 3,
            bidirectional: false,
        }
    }

    /// Patch sizes in use: the finest only without multi-scale spatial.
    pub fn active_patch_sizes(&self) -> Vec<usize> {
        if self.ablation.multi_scale_spatial {
            self.model.patch_sizes.clone()
        } else {
            self.model.patch_sizes[..1].to_vec()
        }
    }

    /// Difference counts per temporal scale. A clip of `k` frames holds
    /// `k - 1` differences, so longer windows are cut to that.
    pub fn active_windows(&self) -> Vec<usize> {
        let ws = if self.ablation.multi_temporal {
            &self.model.temporal_windows[..]
        } else {
            &self.model.temporal_windows[..1]
        };
        ws.iter().map(|&w| w.min(self.data.k - 1)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::config("seed must fit in a signed 64-bit integer"));
        }
        let d = &self.data;
        let m = &self.model;
        if d.k < 2 {
            return Err(Error::config("k must be at least 2"));
        }
        if d.frames_per_clip < d.k + 1 {
            return Err(Error::config("clips must hold at least k + 1 frames"));
        }
        if d.height == 0 || d.width == 0 {
            return Err(Error::config("frame size must be positive"));
        }
        for (name, list) in [("patch_sizes", &m.patch_sizes), ("temporal_windows", &m.temporal_windows)] {
            if list.len() != 3 {
                return Err(Error::config(format!("{name} must list three values, got {}", list.len())));
            }
            if list.iter().any(|&v| v == 0) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if m.patch_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("patch_sizes must be strictly increasing"));
        }
        for &r in &m.patch_sizes {
            if d.height % r != 0 || d.width % r != 0 {
                return Err(Error::config(format!(
                    "patch size {r} does not divide {}x{}",
                    d.height, d.width
                )));
            }
        }
        if m.d_model < 4 || m.state_size == 0 || m.expand == 0 || m.decoder_channels == 0 {
            return Err(Error::config("model widths must be positive (d_model >= 4)"));
        }
        if m.memory_slots == 0 {
            return Err(Error::config("memory_slots must be positive"));
        }
        if !(m.memory_temperature > 0.0 && m.memory_temperature.is_finite()) {
            return Err(Error::config("memory_temperature must be positive"));
        }
        self.block_config().validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.epochs == 0 || t.lr_decay_every == 0 {
            return Err(Error::config("batch_size, epochs and lr_decay_every must be positive"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || !(t.lr_decay > 0.0 && t.lr_decay <= 1.0) {
            return Err(Error::config("lr must be positive and lr_decay in (0, 1]"));
        }
        self.loss.validate()?;
        if let Some(a) = self.score.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::config(format!("alpha {a} outside [0, 1]")));
            }
        }
        if !(self.score.psnr_ceiling > 0.0 && self.score.psnr_ceiling.is_finite()) {
            return Err(Error::config("psnr_ceiling must be positive"));
        }
        Ok(())
    }
}
