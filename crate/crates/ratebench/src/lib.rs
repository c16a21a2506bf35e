//! Fixed-bitrate audio VAE workbench.
//!
//! Trains small convolutional encoder-decoder models over waveforms with a
//! swappable information bottleneck (Gaussian with target-KL or free-bits
//! regularization, deterministic passthrough, or residual vector
//! quantization), measures KL-derived bitrates, sweeps rate ladders into
//! rate-distortion curves, and probes latent predictability with a toy
//! v-prediction diffusion model.
//!
//! The pure rate math lives in the `ratebench-core` crate; this crate adds
//! the tensor engine, models, training loops, file formats, and the
//! `ratebench` CLI.

pub mod bottleneck;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod dsp;
pub mod error;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod plot;
pub mod tensor;
pub mod trainer;
pub mod wav;

pub use error::{Error, Result};
