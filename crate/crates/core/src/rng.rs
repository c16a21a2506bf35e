//! Minimal deterministic RNG for the Monte-Carlo oracle.
//!
//! SplitMix64 for the uniform stream, Box-Muller for normals. Kept in-crate
//! so the oracle has no dependencies and produces identical streams on every
//! platform.

use crate::math;

pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Standard-normal sampler over a SplitMix64 stream (Box-Muller, both
/// outputs used).
pub struct NormalSource {
    rng: SplitMix64,
    spare: Option<f64>,
}

impl NormalSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: SplitMix64::new(seed),
            spare: None,
        }
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.rng.next_f64();
        let u2 = self.rng.next_f64();
        let r = math::sqrt(-2.0 * math::ln(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare = Some(r * math::sin(theta));
        r * math::cos(theta)
    }
}

/// Cheap stateless mix of a seed and a stream index; used to derive
/// independent per-item streams from one master seed.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut s = SplitMix64::new(seed ^ stream.wrapping_mul(0xA076_1D64_78BD_642F));
    s.next_u64()
}
