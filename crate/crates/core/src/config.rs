//! Model and pipeline configuration.
//!
//! Everything that shapes the parameter set lives here; the checkpoint
//! manifest embeds a [`ModelConfig`] so any saved model is self-describing.

use crate::error::{Error, Result};
use crate::schedule::ScheduleConfig;
use serde::{Deserialize, Serialize};

pub const NORM_GROUPS: usize = 8;
/// Spatial reduction of the blueprint encoder and the autoencoder, fixed by
/// construction (three stride-2 stages).
pub const DOWNSAMPLE_FACTOR: usize = 8;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UNetConfig {
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    /// Cross-attention toggle per resolution level.
    pub attn_levels: Vec<bool>,
    pub attn_mid: bool,
    pub heads: usize,
    /// Width of the sinusoidal timestep embedding before its MLP.
    pub time_sin_dim: usize,
    /// Width of the embedding the resolution blocks consume.
    pub time_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_width: 32,
            channel_mults: vec![1, 2],
            res_blocks: 2,
            attn_levels: vec![false, true],
            attn_mid: true,
            heads: 4,
            time_sin_dim: 32,
            time_dim: 128,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PromptEncoderConfig {
    pub patch: usize,
    /// Token width d̂; must equal the UNet cross-attention context dimension.
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for PromptEncoderConfig {
    fn default() -> Self {
        PromptEncoderConfig {
            patch: 8,
            dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BlueprintEncoderConfig {
    /// Channel widths of the four body layers.
    pub channels: Vec<usize>,
}

impl Default for BlueprintEncoderConfig {
    fn default() -> Self {
        BlueprintEncoderConfig {
            channels: vec![16, 32, 64, 128],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AutoencoderConfig {
    pub base_width: usize,
    pub latent_channels: usize,
    /// 0 disables the KL head and makes the encoder a plain conv stack.
    pub kl_weight: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            base_width: 32,
            latent_channels: 4,
            kl_weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Training/generation image resolution (H = W).
    pub resolution: usize,
    /// Diffuse in autoencoder latents instead of pixels.
    pub latent_mode: bool,
    pub schedule: ScheduleConfig,
    pub unet: UNetConfig,
    pub prompt: PromptEncoderConfig,
    pub blueprint: BlueprintEncoderConfig,
    pub autoencoder: AutoencoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            resolution: 32,
            latent_mode: false,
            schedule: ScheduleConfig::desk(200),
            unet: UNetConfig::default(),
            prompt: PromptEncoderConfig::default(),
            blueprint: BlueprintEncoderConfig::default(),
            autoencoder: AutoencoderConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Smallest config that still exercises every pathway; used by gradient
    /// checks and fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            resolution: 8,
            latent_mode: false,
            schedule: ScheduleConfig {
                steps: 10,
                beta_start: 1e-3,
                beta_end: 0.2,
            },
            unet: UNetConfig {
                base_width: 8,
                channel_mults: vec![1, 2],
                res_blocks: 1,
                attn_levels: vec![false, true],
                attn_mid: true,
                heads: 2,
                time_sin_dim: 8,
                time_dim: 16,
            },
            prompt: PromptEncoderConfig {
                patch: 4,
                dim: 16,
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
            },
            blueprint: BlueprintEncoderConfig::default(),
            autoencoder: AutoencoderConfig {
                base_width: 8,
                latent_channels: 2,
                kl_weight: 0.0,
            },
        }
    }

    /// Channels the diffusion operates on: image channels in pixel mode,
    /// autoencoder latent channels otherwise.
    pub fn diffusion_channels(&self) -> usize {
        if self.latent_mode {
            self.autoencoder.latent_channels
        } else {
            3
        }
    }

    /// Spatial extent of the diffusion grid.
    pub fn diffusion_size(&self) -> usize {
        if self.latent_mode {
            self.resolution / DOWNSAMPLE_FACTOR
        } else {
            self.resolution
        }
    }

    /// Resolution the blueprint encoder consumes: always 8x the diffusion
    /// grid, so its output lands exactly on the denoiser input.
    pub fn blueprint_input_size(&self) -> usize {
        self.diffusion_size() * DOWNSAMPLE_FACTOR
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution % DOWNSAMPLE_FACTOR != 0 {
            return Err(Error::config(format!(
                "resolution {} must be a positive multiple of {DOWNSAMPLE_FACTOR}",
                self.resolution
            )));
        }
        if self.resolution % self.prompt.patch != 0 {
            return Err(Error::config(format!(
                "resolution {} not divisible by prompt patch {}",
                self.resolution, self.prompt.patch
            )));
        }
        if self.prompt.dim % self.prompt.heads != 0 {
            return Err(Error::config(
                "prompt dim must be divisible by prompt heads",
            ));
        }
        if self.unet.channel_mults.is_empty() {
            return Err(Error::config("unet needs at least one level"));
        }
        if self.unet.attn_levels.len() != self.unet.channel_mults.len() {
            return Err(Error::config(
                "unet attn_levels length must equal channel_mults length",
            ));
        }
        if self.unet.res_blocks == 0 {
            return Err(Error::config("unet needs at least one res block per level"));
        }
        let levels = self.unet.channel_mults.len();
        if self.diffusion_size() % (1 << (levels - 1)) != 0 {
            return Err(Error::config(format!(
                "diffusion size {} not divisible by 2^{} levels",
                self.diffusion_size(),
                levels - 1
            )));
        }
        for &m in &self.unet.channel_mults {
            let c = self.unet.base_width * m;
            if c % NORM_GROUPS != 0 {
                return Err(Error::config(format!(
                    "unet width {c} not divisible by {NORM_GROUPS} norm groups"
                )));
            }
            if c % self.unet.heads != 0 {
                return Err(Error::config(format!(
                    "unet width {c} not divisible by {} heads",
                    self.unet.heads
                )));
            }
        }
        if self.unet.time_sin_dim % 2 != 0 {
            return Err(Error::config("time_sin_dim must be even"));
        }
        if self.blueprint.channels.len() != 4 {
            return Err(Error::config("blueprint encoder has exactly four body layers"));
        }
        if self.schedule.steps < 1 {
            return Err(Error::config("schedule needs at least one step"));
        }
        Ok(())
    }
}
