//! KL divergence, bitrate conversion, and rate-controlling losses.
//!
//! Conventions used throughout the workspace:
//!
//! * "per-frame KL" is the KL divergence of one latent frame, summed over
//!   latent dimensions, in nats.
//! * All KL values stay in nats; conversion to bits happens only inside
//!   [`kl_to_bitrate`] / [`vq_bitrate`].
//! * The theoretical bitrate of a model with frame rate `S` (Hz) and mean
//!   per-frame KL `k` is `S * k / ln 2` bits per second. No entropy coder is
//!   implied; the rate is a proxy for compression.

use alloc::format;
use alloc::vec::Vec;

use crate::error::invalid;
use crate::math;
use crate::rng::NormalSource;
use crate::{Result, LN_2};

/// Rate bookkeeping bundle tying a model's frame geometry to its rate target.
///
/// `frame_rate_hz * hop == sample_rate_hz` and
/// `target_kl_nats == target_bitrate_bps * ln 2 / frame_rate_hz` are enforced
/// at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RateSpec {
    pub sample_rate_hz: f64,
    pub hop: usize,
    pub frame_rate_hz: f64,
    pub latent_dim: usize,
    pub target_bitrate_bps: f64,
    pub target_kl_nats: f64,
}

impl RateSpec {
    /// Builds a spec from an explicit per-frame KL target (nats); the
    /// bitrate field is derived.
    pub fn from_target_kl(
        sample_rate_hz: f64,
        hop: usize,
        latent_dim: usize,
        target_kl_nats: f64,
    ) -> Result<Self> {
        let frame_rate_hz = Self::frame_rate(sample_rate_hz, hop)?;
        if latent_dim == 0 {
            return Err(invalid("latent_dim must be >= 1"));
        }
        if !target_kl_nats.is_finite() || target_kl_nats < 0.0 {
            return Err(invalid(format!(
                "target_kl_nats must be finite and >= 0, got {target_kl_nats}"
            )));
        }
        Ok(Self {
            sample_rate_hz,
            hop,
            frame_rate_hz,
            latent_dim,
            target_bitrate_bps: kl_to_bitrate(target_kl_nats, frame_rate_hz)?,
            target_kl_nats,
        })
    }

    /// Builds a spec from a bitrate target (bits/s); the KL target is
    /// derived.
    pub fn from_target_bitrate(
        sample_rate_hz: f64,
        hop: usize,
        latent_dim: usize,
        target_bitrate_bps: f64,
    ) -> Result<Self> {
        let frame_rate_hz = Self::frame_rate(sample_rate_hz, hop)?;
        let target_kl_nats = bitrate_to_target_kl(target_bitrate_bps, frame_rate_hz)?;
        Self::from_target_kl(sample_rate_hz, hop, latent_dim, target_kl_nats)
    }

    fn frame_rate(sample_rate_hz: f64, hop: usize) -> Result<f64> {
        if !sample_rate_hz.is_finite() || sample_rate_hz <= 0.0 {
            return Err(invalid(format!(
                "sample_rate_hz must be positive, got {sample_rate_hz}"
            )));
        }
        if hop == 0 {
            return Err(invalid("hop must be >= 1"));
        }
        Ok(sample_rate_hz / hop as f64)
    }

    /// Checks the structural invariants; useful after deserialization.
    pub fn validate(&self) -> Result<()> {
        let rel = |a: f64, b: f64| {
            let scale = a.abs().max(b.abs()).max(1e-300);
            (a - b).abs() / scale
        };
        if rel(self.frame_rate_hz * self.hop as f64, self.sample_rate_hz) > 1e-9 {
            return Err(invalid("frame_rate_hz * hop != sample_rate_hz"));
        }
        let expect_kl = self.target_bitrate_bps * LN_2 / self.frame_rate_hz;
        if self.target_kl_nats.abs().max(expect_kl.abs()) > 0.0
            && rel(self.target_kl_nats, expect_kl) > 1e-9
        {
            return Err(invalid(
                "target_kl_nats inconsistent with target_bitrate_bps",
            ));
        }
        if self.latent_dim == 0 {
            return Err(invalid("latent_dim must be >= 1"));
        }
        Ok(())
    }
}

/// Per-frame, per-dimension diagonal Gaussian posterior `(mu, log_var)`.
///
/// Stored flat, row-major `[frames * dim]`. Values are validated finite at
/// construction so downstream math never sees NaN/inf.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    mu: Vec<f64>,
    log_var: Vec<f64>,
    frames: usize,
    dim: usize,
}

impl GaussianPosterior {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>, frames: usize, dim: usize) -> Result<Self> {
        if dim == 0 || frames == 0 {
            return Err(invalid("posterior must have at least one frame and dim"));
        }
        let want = frames
            .checked_mul(dim)
            .ok_or_else(|| invalid("frames * dim overflows"))?;
        if mu.len() != want || log_var.len() != want {
            return Err(invalid(format!(
                "shape mismatch: mu {} / log_var {} vs frames*dim {}",
                mu.len(),
                log_var.len(),
                want
            )));
        }
        if mu.iter().chain(log_var.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("mu/log_var must be finite"));
        }
        Ok(Self {
            mu,
            log_var,
            frames,
            dim,
        })
    }

    /// Single-frame convenience constructor.
    pub fn single(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        let dim = mu.len();
        Self::new(mu, log_var, 1, dim)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }
}

/// Closed-form KL divergence of each frame's diagonal Gaussian against the
/// standard normal prior, in nats:
///
/// `kl[f] = 1/2 * sum_j (sigma_j^2 + mu_j^2 - 1 - log sigma_j^2)`
///
/// Non-negative for every finite input.
pub fn gaussian_kl(post: &GaussianPosterior) -> Vec<f64> {
    let mut out = Vec::with_capacity(post.frames);
    for f in 0..post.frames {
        let base = f * post.dim;
        let mut acc = 0.0;
        for j in 0..post.dim {
            let mu = post.mu[base + j];
            let lv = post.log_var[base + j];
            acc += math::exp(lv) + mu * mu - 1.0 - lv;
        }
        out.push(0.5 * acc);
    }
    out
}

/// Analytic gradients of the summed KL with respect to `mu` and `log_var`:
/// `d/d mu_j = mu_j`, `d/d log_var_j = (sigma_j^2 - 1) / 2`.
pub fn gaussian_kl_grad(post: &GaussianPosterior) -> (Vec<f64>, Vec<f64>) {
    let grad_mu = post.mu.clone();
    let grad_lv = post
        .log_var
        .iter()
        .map(|&lv| 0.5 * (math::exp(lv) - 1.0))
        .collect();
    (grad_mu, grad_lv)
}

/// Monte-Carlo estimate of the total KL with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

/// Unbiased sample-mean estimate of `KL(q || N(0, I))` over the whole
/// posterior (all frames), using the analytic log-densities of both
/// Gaussians. Deterministic for a fixed seed. Intended as an independent
/// oracle for [`gaussian_kl`]; for a multi-frame posterior it estimates the
/// sum of the per-frame KLs.
pub fn kl_mc_oracle(post: &GaussianPosterior, n_samples: usize, seed: u64) -> Result<McEstimate> {
    if n_samples < 1000 {
        return Err(invalid(format!(
            "n_samples must be >= 1000, got {n_samples}"
        )));
    }
    let mut normals = NormalSource::new(seed);
    // log q(z) - log p(z) with z = mu + sigma * eps reduces to
    // (z^2 - eps^2 - log_var) / 2 summed over coordinates.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for i in 0..n_samples {
        let mut s = 0.0;
        for j in 0..post.mu.len() {
            let eps = normals.next_normal();
            let sigma = math::exp(0.5 * post.log_var[j]);
            let z = post.mu[j] + sigma * eps;
            s += 0.5 * (z * z - eps * eps - post.log_var[j]);
        }
        let delta = s - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (s - mean);
    }
    let n = n_samples as f64;
    let var = m2 / (n - 1.0);
    Ok(McEstimate {
        estimate: mean,
        std_error: math::sqrt(var / n),
    })
}

/// Theoretical bitrate (bits/s) of a model with the given frame rate and
/// mean per-frame KL: `bps = frame_rate * kl / ln 2`.
pub fn kl_to_bitrate(kl_nats_per_frame: f64, frame_rate_hz: f64) -> Result<f64> {
    if !kl_nats_per_frame.is_finite() || kl_nats_per_frame < 0.0 {
        return Err(invalid(format!(
            "kl_nats_per_frame must be finite and >= 0, got {kl_nats_per_frame}"
        )));
    }
    if !frame_rate_hz.is_finite() || frame_rate_hz < 0.0 {
        return Err(invalid(format!(
            "frame_rate_hz must be finite and >= 0, got {frame_rate_hz}"
        )));
    }
    Ok(frame_rate_hz * kl_nats_per_frame / LN_2)
}

/// Per-frame KL target (nats) equivalent to a bitrate target:
/// `kl = bps * ln 2 / frame_rate`. Exact inverse of [`kl_to_bitrate`].
pub fn bitrate_to_target_kl(bps: f64, frame_rate_hz: f64) -> Result<f64> {
    if !bps.is_finite() || bps < 0.0 {
        return Err(invalid(format!("bps must be finite and >= 0, got {bps}")));
    }
    if !frame_rate_hz.is_finite() || frame_rate_hz <= 0.0 {
        return Err(invalid(format!(
            "frame_rate_hz must be finite and > 0, got {frame_rate_hz}"
        )));
    }
    Ok(bps * LN_2 / frame_rate_hz)
}

/// Squared penalty regressing the measured per-frame KL to the spec's
/// target, both normalized by latent size:
/// `loss = ((measured - target) / D)^2`.
///
/// `measured_kl` is the batch-mean per-frame KL in nats.
pub fn target_kl_loss(measured_kl: f64, spec: &RateSpec) -> Result<f64> {
    if !measured_kl.is_finite() || measured_kl < 0.0 {
        return Err(invalid(format!(
            "measured_kl must be finite and >= 0, got {measured_kl}"
        )));
    }
    let d = spec.latent_dim as f64;
    let delta = (measured_kl - spec.target_kl_nats) / d;
    Ok(delta * delta)
}

/// Free-bits rate term: each dimension's batch-expected KL is clamped from
/// below by `lambda_min` before summing, so every latent dimension is
/// charged at least `lambda_min` nats.
pub fn free_bits_loss(per_dim_kl: &[f64], lambda_min: f64) -> Result<f64> {
    if !lambda_min.is_finite() || lambda_min < 0.0 {
        return Err(invalid(format!(
            "lambda_min must be finite and >= 0, got {lambda_min}"
        )));
    }
    let mut acc = 0.0;
    for (j, &kl) in per_dim_kl.iter().enumerate() {
        if !kl.is_finite() || kl < 0.0 {
            return Err(invalid(format!(
                "per_dim_kl[{j}] must be finite and >= 0, got {kl}"
            )));
        }
        acc += kl.max(lambda_min);
    }
    Ok(acc)
}

/// Structural bitrate of a residual vector quantizer:
/// `bps = frame_rate * num_codebooks * log2(K)`.
///
/// Equivalently `kl_to_bitrate(num_codebooks * ln K, frame_rate)` -- a
/// deterministic posterior with a uniform prior has constant KL `ln K` per
/// codebook.
pub fn vq_bitrate(codebook_size: usize, num_codebooks: usize, frame_rate_hz: f64) -> Result<f64> {
    if codebook_size < 2 {
        return Err(invalid(format!(
            "codebook_size must be >= 2, got {codebook_size}"
        )));
    }
    if num_codebooks < 1 {
        return Err(invalid("num_codebooks must be >= 1"));
    }
    if !frame_rate_hz.is_finite() || frame_rate_hz < 0.0 {
        return Err(invalid(format!(
            "frame_rate_hz must be finite and >= 0, got {frame_rate_hz}"
        )));
    }
    Ok(frame_rate_hz * num_codebooks as f64 * math::log2(codebook_size as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn kl_zero_when_posterior_equals_prior() {
        let post = GaussianPosterior::new(vec![0.0; 12], vec![0.0; 12], 3, 4).unwrap();
        for kl in gaussian_kl(&post) {
            assert_eq!(kl, 0.0);
        }
    }

    #[test]
    fn kl_hand_evaluated_cases() {
        // mu=1, var=1: 0.5 * (1 + 1 - 1 - 0) = 0.5
        let post = GaussianPosterior::single(vec![1.0], vec![0.0]).unwrap();
        assert!(close(gaussian_kl(&post)[0], 0.5, 1e-15));

        // mu=0, var=e: 0.5 * (e - 2)
        let post = GaussianPosterior::single(vec![0.0], vec![1.0]).unwrap();
        let expect = 0.5 * (core::f64::consts::E - 2.0);
        assert!(close(gaussian_kl(&post)[0], expect, 1e-15));
        assert!((expect - 0.35914).abs() < 1e-5);
    }

    #[test]
    fn kl_nonnegative_on_random_inputs() {
        let mut rng = crate::rng::SplitMix64::new(7);
        for _ in 0..500 {
            let dim = 1 + (rng.next_u64() % 6) as usize;
            let mu: Vec<f64> = (0..dim).map(|_| 6.0 * rng.next_f64() - 3.0).collect();
            let lv: Vec<f64> = (0..dim).map(|_| 8.0 * rng.next_f64() - 4.0).collect();
            let post = GaussianPosterior::single(mu, lv).unwrap();
            assert!(gaussian_kl(&post)[0] >= 0.0);
        }
    }

    #[test]
    fn posterior_rejects_bad_inputs() {
        assert!(GaussianPosterior::new(vec![0.0; 3], vec![0.0; 4], 1, 4).is_err());
        assert!(GaussianPosterior::single(vec![f64::NAN], vec![0.0]).is_err());
        assert!(GaussianPosterior::single(vec![0.0], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn mc_oracle_matches_closed_form() {
        // Standard posterior -> KL 0.
        let post = GaussianPosterior::single(vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        let est = kl_mc_oracle(&post, 100_000, 1).unwrap();
        assert!(est.estimate.abs() <= 3.0 * est.std_error.max(1e-12));

        // mu=1, var=1 -> KL 0.5.
        let post = GaussianPosterior::single(vec![1.0], vec![0.0]).unwrap();
        let est = kl_mc_oracle(&post, 1_000_000, 2).unwrap();
        assert!((est.estimate - 0.5).abs() <= 3.0 * est.std_error);
    }

    #[test]
    fn mc_oracle_deterministic_and_validated() {
        let post = GaussianPosterior::single(vec![0.3, -0.7], vec![0.2, -0.4]).unwrap();
        let a = kl_mc_oracle(&post, 2000, 99).unwrap();
        let b = kl_mc_oracle(&post, 2000, 99).unwrap();
        assert_eq!(a, b);
        assert!(kl_mc_oracle(&post, 999, 0).is_err());
    }

    #[test]
    fn bitrate_golden_pairs_at_40hz() {
        // (per-frame KL in nats, kbps) pairs for a 40 Hz latent.
        let pairs = [
            (132.63, 7.65),
            (200.39, 11.56),
            (341.26, 19.69),
            (642.35, 37.06),
            (1284.21, 74.10),
        ];
        for (kl, kbps) in pairs {
            let bps = kl_to_bitrate(kl, 40.0).unwrap();
            assert!(
                close(bps / 1000.0, kbps, 1e-3),
                "kl {kl} -> {bps} bps, want ~{kbps} kbps"
            );
        }
    }

    #[test]
    fn bitrate_conversion_round_trip() {
        let mut rng = crate::rng::SplitMix64::new(11);
        for _ in 0..200 {
            let kl = 2000.0 * rng.next_f64();
            let s = 1.0 + 99.0 * rng.next_f64();
            let back = bitrate_to_target_kl(kl_to_bitrate(kl, s).unwrap(), s).unwrap();
            assert!(close(back, kl, 1e-9));
        }
        assert_eq!(kl_to_bitrate(0.0, 40.0).unwrap(), 0.0);
    }

    #[test]
    fn target_kl_from_bitrate() {
        // 7.68 kbps at 40 Hz -> about 133.08 nats per frame.
        let kl = bitrate_to_target_kl(7680.0, 40.0).unwrap();
        assert!((kl - 133.084).abs() < 1e-2);
        let kl = bitrate_to_target_kl(19_693.0, 40.0).unwrap();
        assert!((kl - 341.26).abs() < 0.01);
        assert!(bitrate_to_target_kl(100.0, 0.0).is_err());
        assert!(bitrate_to_target_kl(-1.0, 40.0).is_err());
    }

    #[test]
    fn target_kl_loss_cases() {
        let spec = RateSpec::from_target_kl(48_000.0, 1200, 128, 341.34).unwrap();
        assert_eq!(target_kl_loss(341.34, &spec).unwrap(), 0.0);

        let spec = RateSpec::from_target_kl(48_000.0, 1200, 128, 133.08).unwrap();
        let loss = target_kl_loss(200.0, &spec).unwrap();
        let expect = ((200.0 - 133.08) / 128.0) * ((200.0 - 133.08) / 128.0);
        assert!(close(loss, expect, 1e-12));
        assert!((expect - 0.27333).abs() < 1e-4);
        assert!(target_kl_loss(-1.0, &spec).is_err());
    }

    #[test]
    fn free_bits_cases() {
        // All entries above the floor: purely the sum.
        assert_eq!(free_bits_loss(&[1.0, 2.0, 3.0], 0.5).unwrap(), 6.0);
        // All below: D * lambda.
        assert_eq!(free_bits_loss(&[0.1, 0.2, 0.3], 0.5).unwrap(), 1.5);
        // Mixed.
        assert_eq!(free_bits_loss(&[0.1, 2.0, 0.5], 0.5).unwrap(), 3.0);
        assert!(free_bits_loss(&[-0.1], 0.5).is_err());
        assert!(free_bits_loss(&[0.1], -0.5).is_err());
    }

    #[test]
    fn free_bits_bounds() {
        let mut rng = crate::rng::SplitMix64::new(3);
        for _ in 0..200 {
            let d = 1 + (rng.next_u64() % 8) as usize;
            let kls: Vec<f64> = (0..d).map(|_| 3.0 * rng.next_f64()).collect();
            let lam = 1.5 * rng.next_f64();
            let fb = free_bits_loss(&kls, lam).unwrap();
            let sum: f64 = kls.iter().sum();
            assert!(fb >= sum - 1e-12);
            assert!(fb >= d as f64 * lam - 1e-12);
        }
    }

    #[test]
    fn vq_bitrate_cases() {
        assert!(close(vq_bitrate(2, 1, 1.0).unwrap(), 1.0, 1e-12));
        // DAC-style 9 codebooks of 1024 at 75 Hz: 75 * 9 * 10 bits/s.
        assert!(close(vq_bitrate(1024, 9, 75.0).unwrap(), 6750.0, 1e-12));
        assert!(vq_bitrate(1, 1, 40.0).is_err());
        assert!(vq_bitrate(16, 0, 40.0).is_err());
    }

    #[test]
    fn vq_bitrate_is_change_of_log_base() {
        let mut rng = crate::rng::SplitMix64::new(5);
        for _ in 0..100 {
            let k = 2 + (rng.next_u64() % 4096) as usize;
            let n = 1 + (rng.next_u64() % 12) as usize;
            let s = 1.0 + 99.0 * rng.next_f64();
            let via_vq = vq_bitrate(k, n, s).unwrap();
            let via_kl = kl_to_bitrate(n as f64 * math::ln(k as f64), s).unwrap();
            assert!(close(via_vq, via_kl, 1e-9));
        }
    }

    #[test]
    fn rate_spec_invariants() {
        let spec = RateSpec::from_target_bitrate(16_000.0, 400, 16, 7680.0).unwrap();
        assert!(close(spec.frame_rate_hz, 40.0, 1e-12));
        assert!(close(spec.target_kl_nats, 7680.0 * LN_2 / 40.0, 1e-12));
        spec.validate().unwrap();

        let mut broken = spec.clone();
        broken.target_kl_nats *= 2.0;
        assert!(broken.validate().is_err());
        assert!(RateSpec::from_target_kl(16_000.0, 0, 16, 10.0).is_err());
        assert!(RateSpec::from_target_kl(16_000.0, 400, 0, 10.0).is_err());
        assert!(RateSpec::from_target_kl(-1.0, 400, 16, 10.0).is_err());
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let mut rng = crate::rng::SplitMix64::new(17);
        for _ in 0..50 {
            let dim = 1 + (rng.next_u64() % 6) as usize;
            let mu: Vec<f64> = (0..dim).map(|_| 4.0 * rng.next_f64() - 2.0).collect();
            let lv: Vec<f64> = (0..dim).map(|_| 6.0 * rng.next_f64() - 3.0).collect();
            let post = GaussianPosterior::single(mu.clone(), lv.clone()).unwrap();
            let (gmu, glv) = gaussian_kl_grad(&post);

            let h = 1e-6;
            for j in 0..dim {
                let mut mp = mu.clone();
                mp[j] += h;
                let mut mm = mu.clone();
                mm[j] -= h;
                let up = gaussian_kl(&GaussianPosterior::single(mp, lv.clone()).unwrap())[0];
                let dn = gaussian_kl(&GaussianPosterior::single(mm, lv.clone()).unwrap())[0];
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (fd - gmu[j]).abs() <= 1e-4 * fd.abs().max(gmu[j].abs()).max(1e-6),
                    "d/dmu mismatch: fd {fd} vs analytic {}",
                    gmu[j]
                );

                let mut lp = lv.clone();
                lp[j] += h;
                let mut lm = lv.clone();
                lm[j] -= h;
                let up = gaussian_kl(&GaussianPosterior::single(mu.clone(), lp).unwrap())[0];
                let dn = gaussian_kl(&GaussianPosterior::single(mu.clone(), lm).unwrap())[0];
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (fd - glv[j]).abs() <= 1e-4 * fd.abs().max(glv[j].abs()).max(1e-6),
                    "d/dlog_var mismatch: fd {fd} vs analytic {}",
                    glv[j]
                );
            }
        }
    }
}
