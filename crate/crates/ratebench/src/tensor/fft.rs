//! Iterative radix-2 FFT and the short-time transform plan used by the
//! spectral losses.
//!
//! The transform is linear, so the backward pass of a magnitude spectrogram
//! is another FFT of the (conjugated) bin gradients; see
//! [`StftPlan::accumulate_adjoint`].

/// Complex FFT of power-of-two size with precomputed twiddles.
pub struct Fft {
    n: usize,
    rev: Vec<u32>,
    // Twiddles for all stages, flattened; stage with half-size h occupies
    // entries [h - 1, 2h - 1).
    tw_re: Vec<f32>,
    tw_im: Vec<f32>,
}

impl Fft {
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two() && n >= 2, "fft size must be 2^k >= 2");
        let bits = n.trailing_zeros();
        let rev = (0..n as u32).map(|i| i.reverse_bits() >> (32 - bits)).collect();
        let mut tw_re = vec![0.0; n - 1];
        let mut tw_im = vec![0.0; n - 1];
        let mut half = 1;
        while half < n {
            for j in 0..half {
                let ang = -std::f64::consts::PI * j as f64 / half as f64;
                tw_re[half - 1 + j] = ang.cos() as f32;
                tw_im[half - 1 + j] = ang.sin() as f32;
            }
            half *= 2;
        }
        Self { n, rev, tw_re, tw_im }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// In-place DFT with the e^{-2 pi i k n / N} kernel.
    pub fn forward(&self, re: &mut [f32], im: &mut [f32]) {
        let n = self.n;
        debug_assert_eq!(re.len(), n);
        debug_assert_eq!(im.len(), n);
        for i in 0..n {
            let j = self.rev[i] as usize;
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut half = 1;
        while half < n {
            let base = half - 1;
            let step = half * 2;
            let tw_re = &self.tw_re[base..base + half];
            let tw_im = &self.tw_im[base..base + half];
            let mut start = 0;
            while start < n {
                // Indices stay below n by construction (start + j + half <
                // start + step <= n); unchecked access keeps the butterfly
                // tight.
                unsafe {
                    for j in 0..half {
                        let wr = *tw_re.get_unchecked(j);
                        let wi = *tw_im.get_unchecked(j);
                        let a = start + j;
                        let b = a + half;
                        let br = *re.get_unchecked(b);
                        let bi = *im.get_unchecked(b);
                        let tr = br * wr - bi * wi;
                        let ti = br * wi + bi * wr;
                        let ar = *re.get_unchecked(a);
                        let ai = *im.get_unchecked(a);
                        *re.get_unchecked_mut(b) = ar - tr;
                        *im.get_unchecked_mut(b) = ai - ti;
                        *re.get_unchecked_mut(a) = ar + tr;
                        *im.get_unchecked_mut(a) = ai + ti;
                    }
                }
                start += step;
            }
            half = step;
        }
    }
}

/// Hann-windowed magnitude STFT geometry shared by forward and adjoint
/// passes. Frames are hop-spaced with no centering: frame `f` covers
/// `[f * hop, f * hop + n_fft)`, so inputs must be at least `n_fft` long.
pub struct StftPlan {
    pub n_fft: usize,
    pub hop: usize,
    window: Vec<f32>,
    fft: Fft,
}

impl StftPlan {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        assert!(hop >= 1);
        let window = (0..n_fft)
            .map(|i| {
                let x = 2.0 * std::f64::consts::PI * i as f64 / n_fft as f64;
                (0.5 - 0.5 * x.cos()) as f32
            })
            .collect();
        Self { n_fft, hop, window, fft: Fft::new(n_fft) }
    }

    /// One-sided bin count.
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn num_frames(&self, len: usize) -> usize {
        assert!(len >= self.n_fft, "input shorter than the fft window");
        1 + (len - self.n_fft) / self.hop
    }

    /// Computes the magnitude spectrogram of `x` into `mag` (bins-major:
    /// `mag[k * frames + f]`) and stashes the complex spectrum into `spec`
    /// (`[frames * bins * 2]`, re/im interleaved) for the adjoint pass.
    pub fn magnitude(&self, x: &[f32], mag: &mut [f32], spec: &mut [f32]) {
        let frames = self.num_frames(x.len());
        let bins = self.bins();
        debug_assert_eq!(mag.len(), bins * frames);
        debug_assert_eq!(spec.len(), frames * bins * 2);
        let mut re = vec![0.0f32; self.n_fft];
        let mut im = vec![0.0f32; self.n_fft];
        for f in 0..frames {
            let start = f * self.hop;
            for i in 0..self.n_fft {
                re[i] = x[start + i] * self.window[i];
                im[i] = 0.0;
            }
            self.fft.forward(&mut re, &mut im);
            for k in 0..bins {
                let m = (re[k] * re[k] + im[k] * im[k] + MAG_EPS).sqrt();
                mag[k * frames + f] = m;
                spec[(f * bins + k) * 2] = re[k];
                spec[(f * bins + k) * 2 + 1] = im[k];
            }
        }
    }

    /// Accumulates `d loss / d x` into `grad_x` given the magnitude
    /// gradients (`grad_mag`, bins-major) and the saved spectrum.
    pub fn accumulate_adjoint(
        &self,
        grad_mag: &[f32],
        spec: &[f32],
        mag: &[f32],
        grad_x: &mut [f32],
    ) {
        let bins = self.bins();
        let frames = grad_mag.len() / bins;
        let mut re = vec![0.0f32; self.n_fft];
        let mut im = vec![0.0f32; self.n_fft];
        for f in 0..frames {
            for v in re.iter_mut() {
                *v = 0.0;
            }
            for v in im.iter_mut() {
                *v = 0.0;
            }
            // d|X_k|/d(re, im) = (re, im) / |X_k|; pack the conjugated bin
            // gradient so one more forward FFT yields the time gradient.
            for k in 0..bins {
                let g = grad_mag[k * frames + f];
                if g == 0.0 {
                    continue;
                }
                let m = mag[k * frames + f];
                let sr = spec[(f * bins + k) * 2];
                let si = spec[(f * bins + k) * 2 + 1];
                re[k] = g * sr / m;
                im[k] = -(g * si / m);
            }
            self.fft.forward(&mut re, &mut im);
            let start = f * self.hop;
            for i in 0..self.n_fft {
                grad_x[start + i] += re[i] * self.window[i];
            }
        }
    }
}

/// Floor inside the magnitude sqrt; keeps the gradient finite at silent
/// bins.
pub const MAG_EPS: f32 = 1e-12;
