//! Rate bookkeeping for continuous audio codecs.
//!
//! Everything in this crate is plain `f64` math with no IO and no tensor
//! framework: the closed-form KL of a diagonal Gaussian posterior against a
//! standard-normal prior, the conversion between per-frame KL (nats) and a
//! theoretical bitrate, the squared-error loss that regresses a measured KL
//! to a target, the free-bits rate floor, and the variance-preserving noise
//! schedule used by the latent-diffusion probe.
//!
//! The crate is `no_std`-compatible (with `alloc`); the `std` feature is on
//! by default and only switches error-trait plumbing.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod rate;
pub mod rng;
pub mod schedule;

mod math;

pub use error::CoreError;
pub use rate::{
    bitrate_to_target_kl, free_bits_loss, gaussian_kl, gaussian_kl_grad, kl_mc_oracle,
    kl_to_bitrate, target_kl_loss, vq_bitrate, GaussianPosterior, McEstimate, RateSpec,
};
pub use schedule::NoiseSchedule;

/// ln 2; one nat is `1/LN_2` bits.
pub const LN_2: f64 = core::f64::consts::LN_2;

pub type Result<T> = core::result::Result<T, CoreError>;
