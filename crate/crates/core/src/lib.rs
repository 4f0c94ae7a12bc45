//! Dual-condition image diffusion at desk scale.
//!
//! An images-to-image denoising diffusion model driven by two condition
//! images: a *blueprint* (line art) that is encoded by a small zero-initialized
//! convolutional branch and added to the denoiser input, and an *image prompt*
//! whose vision-transformer features feed every cross-attention layer as
//! keys/values. The crate also carries the self-supervised data pipeline
//! (procedural sprite corpus, blueprint extraction, similarity pair mining),
//! the joint trainer, DDPM/DDIM samplers, and a quantitative eval harness.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};

pub mod blueprint_encoder;
pub mod config;
pub mod params;
pub mod prompt_encoder;
pub mod schedule;
pub mod unet;
pub mod autoencoder;
pub mod model;
pub mod data;
pub mod imageio;
pub mod checkpoint;
pub mod trainer;
pub mod eval;
pub mod sampler;
