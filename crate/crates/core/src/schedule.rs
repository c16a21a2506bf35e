//! Variance-preserving noise schedule and v-parameterization helpers.
//!
//! The schedule is the shifted cosine construction in logSNR form:
//!
//! `logSNR(t) = -2 ln tan(pi t / 2) + 2 s`
//!
//! with `alpha_t = sqrt(sigmoid(logSNR))` and
//! `sigma_t = sqrt(sigmoid(-logSNR))`, so `alpha^2 + sigma^2 = 1` for every
//! `t`. A negative shift `s` moves the whole curve toward lower SNR (more
//! noise at the same `t`).

use alloc::format;
use alloc::vec::Vec;

use crate::error::invalid;
use crate::math;
use crate::Result;

/// Shifted cosine noise schedule, parameterized by the logSNR shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub shift_s: f64,
}

impl NoiseSchedule {
    pub fn new(shift_s: f64) -> Self {
        Self { shift_s }
    }

    /// Plain cosine schedule (no shift).
    pub fn cosine() -> Self {
        Self::new(0.0)
    }

    /// Default shift `s = ln(1/2)`, biasing training toward noisier steps.
    pub fn shifted_half() -> Self {
        Self::new(math::ln(0.5))
    }

    fn check_t(t: f64) -> Result<()> {
        if t.is_nan() || t <= 0.0 || t >= 1.0 {
            return Err(invalid(format!("t must lie in (0, 1), got {t}")));
        }
        Ok(())
    }

    /// logSNR at diffusion time `t` in (0, 1); strictly decreasing in `t`.
    pub fn log_snr(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok(-2.0 * math::ln(math::tan(core::f64::consts::FRAC_PI_2 * t)) + 2.0 * self.shift_s)
    }

    /// `(alpha_t, sigma_t)` with `alpha^2 + sigma^2 = 1`.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        let snr = self.log_snr(t)?;
        Ok((
            math::sqrt(math::sigmoid(snr)),
            math::sqrt(math::sigmoid(-snr)),
        ))
    }

    /// Noised latent `z_t = alpha_t z + sigma_t eps`.
    pub fn noised_latent(&self, z: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
        let (alpha, sigma) = self.alpha_sigma(t)?;
        check_shapes(z, eps)?;
        Ok(z.iter()
            .zip(eps)
            .map(|(&z, &e)| alpha * z + sigma * e)
            .collect())
    }

    /// Prediction target `v = alpha_t eps - sigma_t z` (z is the clean
    /// latent).
    pub fn v_target(&self, z: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
        let (alpha, sigma) = self.alpha_sigma(t)?;
        check_shapes(z, eps)?;
        Ok(z.iter()
            .zip(eps)
            .map(|(&z, &e)| alpha * e - sigma * z)
            .collect())
    }

    /// Inverts the v-parameterization: given the noised latent and `v`,
    /// recovers `(z_hat, eps_hat)`:
    ///
    /// `z_hat = alpha z_t - sigma v`, `eps_hat = sigma z_t + alpha v`.
    ///
    /// Exact (up to rounding) when `v` came from [`Self::v_target`], since
    /// `alpha^2 + sigma^2 = 1`.
    pub fn recover_from_v(&self, z_t: &[f64], v: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let (alpha, sigma) = self.alpha_sigma(t)?;
        check_shapes(z_t, v)?;
        let z_hat = z_t
            .iter()
            .zip(v)
            .map(|(&zt, &v)| alpha * zt - sigma * v)
            .collect();
        let eps_hat = z_t
            .iter()
            .zip(v)
            .map(|(&zt, &v)| sigma * zt + alpha * v)
            .collect();
        Ok((z_hat, eps_hat))
    }
}

fn check_shapes(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(invalid(format!(
            "shape mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}
