//! Run configuration: model hyperparameters, training settings, ablation
//! toggles, and the evaluation-view grid. Serialized as TOML; every field
//! has a default so partial files work.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnapshotConfig {
    /// Square snapshot edge length in pixels.
    pub size: usize,
    pub fov_h_deg: f64,
    pub fov_v_deg: f64,
}

impl Default for SnapshotConfig {
    fn default() -> Self {
        SnapshotConfig {
            size: 64,
            fov_h_deg: 90.0,
            fov_v_deg: 90.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of generator blocks N (block 1 mixes tokens, 2..N are
    /// depthwise). Block i consumes the condition at patch size 2^(N-i).
    pub blocks: usize,
    /// Channel width of each block, length = blocks.
    pub widths: Vec<usize>,
    pub z_dim: usize,
    pub num_classes: usize,
    /// Output canvas height; width is always 2x.
    pub height: usize,
    pub depthwise_kernel: usize,
    pub layers_per_block: usize,
    pub disc_width: usize,
    pub disc_patch: usize,
    pub final_tanh: bool,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub snapshot: SnapshotConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: 5,
            widths: vec![128, 64, 32, 16, 8],
            z_dim: 64,
            num_classes: 24,
            height: 64,
            depthwise_kernel: 3,
            layers_per_block: 4,
            disc_width: 192,
            disc_patch: 16,
            final_tanh: true,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
            snapshot: SnapshotConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Patch size of block 1: 2^(N-1), so block N works at pixel resolution.
    pub fn base_patch(&self) -> usize {
        1 << (self.blocks - 1)
    }

    /// Patch size of the condition input at block i (1-based).
    pub fn patch_at(&self, block: usize) -> usize {
        1 << (self.blocks - block)
    }

    /// Token grid of block i (1-based): (rows, cols).
    pub fn grid_at(&self, block: usize) -> (usize, usize) {
        let p = self.patch_at(block);
        (self.height / p, 2 * self.height / p)
    }

    pub fn width_px(&self) -> usize {
        2 * self.height
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks < 2 {
            return Err(Error::Config(format!(
                "blocks must be >= 2, got {}",
                self.blocks
            )));
        }
        if self.widths.len() != self.blocks {
            return Err(Error::Config(format!(
                "widths must list {} entries, got {}",
                self.blocks,
                self.widths.len()
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("widths must be positive".into()));
        }
        if !self.height.is_multiple_of(self.base_patch()) {
            return Err(Error::Config(format!(
                "height {} is not divisible by the base patch {}",
                self.height,
                self.base_patch()
            )));
        }
        if self.depthwise_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "depthwise kernel must be odd, got {}",
                self.depthwise_kernel
            )));
        }
        if !self.disc_patch.is_power_of_two() {
            return Err(Error::Config(format!(
                "discriminator patch must be a power of two, got {}",
                self.disc_patch
            )));
        }
        if !self.height.is_multiple_of(self.disc_patch) {
            return Err(Error::Config(format!(
                "height {} is not divisible by the discriminator patch {}",
                self.height, self.disc_patch
            )));
        }
        if self.num_classes == 0 || self.z_dim == 0 {
            return Err(Error::Config(
                "num_classes and z_dim must be positive".into(),
            ));
        }
        if self.layers_per_block == 0 {
            return Err(Error::Config("layers_per_block must be positive".into()));
        }
        Ok(())
    }
}

/// Component ablation switches; each removes or replaces one piece of the
/// default recipe.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationToggles {
    /// Plain batch norm instead of class-conditional batch norm.
    pub plain_bn: bool,
    /// Drop the discriminator reconstruction loss from both objectives.
    pub no_dis_rec: bool,
    /// Drop the channel adversarial loss from both objectives.
    pub no_channel_loss: bool,
    /// Feed the embedded snapshot only to block 1.
    pub single_input: bool,
    /// Replace block 1's token-mixing layers with depthwise layers.
    pub no_mixer_block1: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub lambda_ch_g: f64,
    pub lambda_ch_d: f64,
    pub gamma_r1: f64,
    pub roll_augment: bool,
    /// 0 disables periodic checkpoints (a final one is always written).
    pub checkpoint_every: usize,
    /// 0 disables periodic sample images.
    pub sample_every: usize,
    pub log_every: usize,
    pub ablation: AblationToggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            batch_size: 16,
            lr: 2e-4,
            beta1: 0.0,
            beta2: 0.99,
            adam_epsilon: 1e-8,
            seed: 0,
            lambda_ch_g: 0.1,
            lambda_ch_d: 0.01,
            gamma_r1: 10.0,
            roll_augment: true,
            checkpoint_every: 500,
            sample_every: 500,
            log_every: 50,
            ablation: AblationToggles::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.lambda_ch_g < 0.0 || self.lambda_ch_d < 0.0 || self.gamma_r1 < 0.0 {
            return Err(Error::Config(
                "loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub view_size: usize,
    pub view_fov_deg: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            view_size: 64,
            view_fov_deg: 90.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn from_toml_str(s: &str) -> Result<Config> {
        let cfg: Config =
            toml::from_str(s).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
