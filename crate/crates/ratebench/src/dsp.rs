//! Mel filterbanks, framed mel features, and small signal utilities shared
//! by the model (encoder mel skip), the losses, and dataset ingestion.

use crate::tensor::fft::StftPlan;

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, row-major `[n_mels, n_fft/2 + 1]`, spanning
/// 0 Hz to Nyquist.
pub fn mel_filterbank(sample_rate_hz: f64, n_fft: usize, n_mels: usize) -> Vec<f32> {
    let bins = n_fft / 2 + 1;
    let fmax = sample_rate_hz / 2.0;
    let mel_max = hz_to_mel(fmax);
    // n_mels + 2 edge points, mel-spaced.
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = vec![0.0f32; n_mels * bins];
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate_hz / n_fft as f64;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            fb[m * bins + k] = w as f32;
        }
    }
    fb
}

/// Reflect-pads `x` by `left`/`right` samples (signal must be longer than
/// the pad).
pub fn reflect_pad(x: &[f32], left: usize, right: usize) -> Vec<f32> {
    let n = x.len();
    assert!(n > left && n > right, "reflect_pad: signal too short");
    let mut out = Vec::with_capacity(n + left + right);
    for i in (1..=left).rev() {
        out.push(x[i]);
    }
    out.extend_from_slice(x);
    for i in 0..right {
        out.push(x[n - 2 - i]);
    }
    out
}

/// Log-mel features aligned to the model's latent frames: reflect-padded,
/// centered framing with exactly `len / hop` frames. Returns channel-major
/// `[n_mels, frames]` (ready to drop into a `[B, C, T]` tensor) and the
/// frame count.
pub struct MelExtractor {
    plan: StftPlan,
    fb: Vec<f32>,
    pub n_mels: usize,
    pub hop: usize,
    n_fft: usize,
}

impl MelExtractor {
    pub fn new(sample_rate_hz: f64, n_fft: usize, hop: usize, n_mels: usize) -> Self {
        Self {
            plan: StftPlan::new(n_fft, hop),
            fb: mel_filterbank(sample_rate_hz, n_fft, n_mels),
            n_mels,
            hop,
            n_fft,
        }
    }

    pub fn frames_for(&self, len: usize) -> usize {
        len / self.hop
    }

    /// log(mel + 1e-5) of a hop-multiple signal.
    pub fn log_mel(&self, x: &[f32]) -> Vec<f32> {
        assert!(x.len().is_multiple_of(self.hop), "input must be a hop multiple");
        let frames = self.frames_for(x.len());
        let bins = self.plan.bins();
        let padded = reflect_pad(x, self.n_fft / 2, self.n_fft / 2);
        // Trim so the no-centering plan produces exactly `frames` frames.
        let needed = (frames - 1) * self.hop + self.n_fft;
        let mut mag = vec![0.0f32; bins * frames];
        let mut spec = vec![0.0f32; frames * bins * 2];
        self.plan.magnitude(&padded[..needed], &mut mag, &mut spec);
        // mel[m, f] = log(sum_k fb[m, k] * mag[k, f] + 1e-5)
        let mut out = vec![0.0f32; self.n_mels * frames];
        for m in 0..self.n_mels {
            let w = &self.fb[m * bins..(m + 1) * bins];
            for f in 0..frames {
                let mut acc = 0.0f32;
                for k in 0..bins {
                    acc += w[k] * mag[k * frames + f];
                }
                out[m * frames + f] = (acc + 1e-5).ln();
            }
        }
        out
    }
}

/// Linear-interpolation resampler; adequate for tones and desk-scale test
/// material.
pub fn resample_linear(x: &[f32], from_hz: f64, to_hz: f64) -> Vec<f32> {
    if (from_hz - to_hz).abs() < 1e-9 {
        return x.to_vec();
    }
    let ratio = from_hz / to_hz;
    let out_len = ((x.len() as f64) / ratio).floor() as usize;
    (0..out_len)
        .map(|i| {
            let src = i as f64 * ratio;
            let i0 = src.floor() as usize;
            let frac = (src - i0 as f64) as f32;
            let a = x[i0.min(x.len() - 1)];
            let b = x[(i0 + 1).min(x.len() - 1)];
            a + (b - a) * frac
        })
        .collect()
}

/// Peak-normalizes to the given amplitude; silent input is returned as-is.
pub fn peak_normalize(x: &mut [f32], peak: f32) {
    let max = x.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    if max > 1e-9 {
        let g = peak / max;
        for v in x.iter_mut() {
            *v *= g;
        }
    }
}
