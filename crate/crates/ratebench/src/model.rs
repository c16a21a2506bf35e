//! Desk-scale fully convolutional encoder-decoder over waveforms.
//!
//! The encoder downsamples by the configured stride plan (product == hop)
//! and emits a feature map for the bottleneck: `2 * latent_dim` channels for
//! Gaussian bottlenecks (mean and log-variance), `latent_dim` for VQ. A
//! linear projection of the input's log-mel spectrogram is added to the
//! encoder output; the projection starts at zero so it is a no-op at init.
//! The decoder mirrors the encoder with transposed convolutions and ends in
//! tanh.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::AudioBatch;
use crate::dsp::MelExtractor;
use crate::error::{Error, Result};
use crate::tensor::optim::{Bindings, ParamId, ParamStore};
use crate::tensor::{NodeId, Shape, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub sample_rate_hz: u32,
    pub hop: usize,
    pub latent_dim: usize,
    /// Output width of each encoder stage; the decoder mirrors it.
    pub encoder_channels: Vec<usize>,
    /// Stride of each encoder stage; the product must equal `hop`.
    pub strides: Vec<usize>,
    pub n_mels: usize,
    /// FFT size for the encoder mel skip (power of two).
    pub mel_fft: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            hop: 400,
            latent_dim: 16,
            encoder_channels: vec![8, 16, 32, 64],
            strides: vec![5, 4, 4, 5],
            n_mels: 80,
            mel_fft: 1024,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.strides.len() != self.encoder_channels.len() {
            return Err(Error::invalid(
                "encoder_channels and strides must be non-empty and equal length",
            ));
        }
        let product: usize = self.strides.iter().product();
        if product != self.hop {
            return Err(Error::invalid(format!(
                "stride product {product} must equal hop {}",
                self.hop
            )));
        }
        if self.latent_dim == 0 || self.n_mels == 0 || self.sample_rate_hz == 0 {
            return Err(Error::invalid("latent_dim, n_mels, sample_rate_hz must be positive"));
        }
        if !self.mel_fft.is_power_of_two() || self.mel_fft < self.hop {
            return Err(Error::invalid(
                "mel_fft must be a power of two at least as large as hop",
            ));
        }
        Ok(())
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.sample_rate_hz as f64 / self.hop as f64
    }
}

/// Kernel/padding rule for exact stride-fold resampling: even strides use
/// k = 2s with pad s/2, odd strides k = 2s - 1 with pad (s - 1) / 2.
fn stride_kernel(stride: usize) -> (usize, usize) {
    if stride.is_multiple_of(2) {
        (2 * stride, stride / 2)
    } else {
        (2 * stride - 1, (stride - 1) / 2)
    }
}

const LEAK: f32 = 0.2;

struct ResUnit {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

struct ConvIds {
    w: ParamId,
    b: ParamId,
}

pub struct AudioModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub feature_channels: usize,
    enc_in: ConvIds,
    enc_stages: Vec<(ConvIds, ResUnit)>,
    enc_out: ConvIds,
    dec_in: ConvIds,
    dec_stages: Vec<(ConvIds, ResUnit)>,
    dec_out: ConvIds,
    mel_proj: ConvIds,
    mel: MelExtractor,
}

impl AudioModel {
    /// `feature_channels` is the bottleneck's input width: `2 * latent_dim`
    /// for Gaussian bottlenecks, `latent_dim` for VQ.
    pub fn new(config: ModelConfig, feature_channels: usize) -> Result<Self> {
        config.validate()?;
        if feature_channels != config.latent_dim && feature_channels != 2 * config.latent_dim {
            return Err(Error::invalid(format!(
                "feature_channels {feature_channels} must be latent_dim or 2 * latent_dim"
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6d6f_6465_6c00_0001);
        let ch = &config.encoder_channels;
        let n = ch.len();

        let conv = |store: &mut ParamStore,
                    rng: &mut ChaCha8Rng,
                    name: &str,
                    c_out: usize,
                    c_in: usize,
                    k: usize,
                    gain: f32| {
            let w = store.register_uniform(
                format!("{name}.w"),
                Shape::new(c_out, c_in, k),
                c_in * k,
                gain,
                rng,
            );
            let b = store.register_zeros(format!("{name}.b"), Shape::new(1, c_out, 1));
            ConvIds { w, b }
        };
        // Transposed conv weights are [C_in, C_out, K].
        let conv_t = |store: &mut ParamStore,
                      rng: &mut ChaCha8Rng,
                      name: &str,
                      c_in: usize,
                      c_out: usize,
                      k: usize| {
            let w = store.register_uniform(
                format!("{name}.w"),
                Shape::new(c_in, c_out, k),
                c_in * k,
                1.0,
                rng,
            );
            let b = store.register_zeros(format!("{name}.b"), Shape::new(1, c_out, 1));
            ConvIds { w, b }
        };
        let res = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize| ResUnit {
            w1: store.register_uniform(format!("{name}.c1.w"), Shape::new(c, c, 5), c * 5, 1.0, rng),
            b1: store.register_zeros(format!("{name}.c1.b"), Shape::new(1, c, 1)),
            w2: store.register_uniform(format!("{name}.c2.w"), Shape::new(c, c, 1), c, 1.0, rng),
            b2: store.register_zeros(format!("{name}.c2.b"), Shape::new(1, c, 1)),
        };

        let enc_in = conv(&mut store, &mut rng, "enc.in", ch[0], 1, 7, 1.0);
        let mut enc_stages = Vec::with_capacity(n);
        for i in 0..n {
            let c_in = ch[i];
            let c_out = ch[(i + 1).min(n - 1)];
            let (k, _) = stride_kernel(config.strides[i]);
            let sc = conv(&mut store, &mut rng, &format!("enc.s{i}"), c_out, c_in, k, 1.0);
            let ru = res(&mut store, &mut rng, &format!("enc.s{i}.res"), c_out);
            enc_stages.push((sc, ru));
        }
        // Small output gain keeps the initial posterior near the prior.
        let enc_out = conv(&mut store, &mut rng, "enc.out", feature_channels, ch[n - 1], 3, 0.1);

        let dec_in = conv(&mut store, &mut rng, "dec.in", ch[n - 1], config.latent_dim, 3, 1.0);
        let mut dec_stages = Vec::with_capacity(n);
        for i in 0..n {
            // Mirror: decoder stage i undoes encoder stage n-1-i.
            let c_in = ch[n - 1 - i];
            let c_out = ch[(n - 1 - i).saturating_sub(1).min(n - 1)];
            let (k, _) = stride_kernel(config.strides[n - 1 - i]);
            let sc = conv_t(&mut store, &mut rng, &format!("dec.s{i}"), c_in, c_out, k);
            // Residual unit precedes the upsample, so it runs at c_in.
            let ru = res(&mut store, &mut rng, &format!("dec.s{i}.res"), c_in);
            dec_stages.push((sc, ru));
        }
        let dec_out = conv(&mut store, &mut rng, "dec.out", 1, ch[0], 7, 1.0);

        // Zero init: adding the projected mel is a no-op until trained.
        let mel_proj = ConvIds {
            w: store.register_zeros("mel_proj.w", Shape::new(feature_channels, config.n_mels, 1)),
            b: store.register_zeros("mel_proj.b", Shape::new(1, feature_channels, 1)),
        };

        let mel = MelExtractor::new(
            config.sample_rate_hz as f64,
            config.mel_fft,
            config.hop,
            config.n_mels,
        );

        Ok(Self {
            config,
            store,
            feature_channels,
            enc_in,
            enc_stages,
            enc_out,
            dec_in,
            dec_stages,
            dec_out,
            mel_proj,
            mel,
        })
    }

    pub fn validate_batch(&self, batch: &AudioBatch) -> Result<()> {
        if batch.sample_rate_hz != self.config.sample_rate_hz {
            return Err(Error::invalid(format!(
                "batch sample rate {} != model {}",
                batch.sample_rate_hz, self.config.sample_rate_hz
            )));
        }
        if !batch.samples.is_multiple_of(self.config.hop) {
            return Err(Error::invalid(format!(
                "batch length {} is not a multiple of hop {}; pad on ingestion",
                batch.samples, self.config.hop
            )));
        }
        if batch.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("batch contains non-finite samples"));
        }
        Ok(())
    }

    fn res_forward(
        &self,
        tape: &mut Tape,
        bindings: &mut Bindings,
        x: NodeId,
        ru: &ResUnit,
    ) -> NodeId {
        let w1 = self.store.bind(ru.w1, tape, bindings);
        let b1 = self.store.bind(ru.b1, tape, bindings);
        let w2 = self.store.bind(ru.w2, tape, bindings);
        let b2 = self.store.bind(ru.b2, tape, bindings);
        let h = tape.leaky_relu(x, LEAK);
        let h = tape.conv1d(h, w1, Some(b1), 1, 2);
        let h = tape.leaky_relu(h, LEAK);
        let h = tape.conv1d(h, w2, Some(b2), 1, 0);
        tape.add(x, h)
    }

    /// Waveform batch to bottleneck features `[B, feature_channels,
    /// samples / hop]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bindings: &mut Bindings,
        batch: &AudioBatch,
    ) -> Result<NodeId> {
        self.validate_batch(batch)?;
        let x = tape.constant(
            Shape::new(batch.batch, 1, batch.samples),
            batch.data.clone(),
        );
        Ok(self.encode_node(tape, bindings, x))
    }

    fn encode_node(&self, tape: &mut Tape, bindings: &mut Bindings, x: NodeId) -> NodeId {
        let w = self.store.bind(self.enc_in.w, tape, bindings);
        let b = self.store.bind(self.enc_in.b, tape, bindings);
        let mut h = tape.conv1d(x, w, Some(b), 1, 3);
        for (i, (sc, ru)) in self.enc_stages.iter().enumerate() {
            let stride = self.config.strides[i];
            let (_, pad) = stride_kernel(stride);
            let w = self.store.bind(sc.w, tape, bindings);
            let b = self.store.bind(sc.b, tape, bindings);
            let a = tape.leaky_relu(h, LEAK);
            h = tape.conv1d(a, w, Some(b), stride, pad);
            h = self.res_forward(tape, bindings, h, ru);
        }
        let a = tape.leaky_relu(h, LEAK);
        let w = self.store.bind(self.enc_out.w, tape, bindings);
        let b = self.store.bind(self.enc_out.b, tape, bindings);
        tape.conv1d(a, w, Some(b), 1, 1)
    }

    /// Log-mel features of a batch, `[B, n_mels, frames]` with `frames ==
    /// samples / hop`, as plain data (the mel skip input carries no
    /// gradient).
    pub fn mel_features(&self, batch: &AudioBatch) -> Vec<f32> {
        let frames = batch.samples / self.config.hop;
        let mut out = Vec::with_capacity(batch.batch * self.config.n_mels * frames);
        for i in 0..batch.batch {
            out.extend(self.mel.log_mel(batch.item(i)));
        }
        out
    }

    /// Single-item variant of [`Self::mel_features`].
    pub fn mel_features_item(&self, samples: &[f32]) -> Vec<f32> {
        self.mel.log_mel(samples)
    }

    /// Adds the linear mel projection to the encoder output. The mel tensor
    /// must be frame-aligned with the features.
    pub fn mel_projection_add(
        &self,
        tape: &mut Tape,
        bindings: &mut Bindings,
        features: NodeId,
        mel: &[f32],
    ) -> Result<NodeId> {
        let fs = tape.shape(features);
        let want = fs.b * self.config.n_mels * fs.t;
        if mel.len() != want {
            return Err(Error::invalid(format!(
                "mel feature length {} does not match {} frames of {} mels",
                mel.len(),
                fs.t,
                self.config.n_mels
            )));
        }
        if fs.c != self.feature_channels {
            return Err(Error::invalid("features do not come from this encoder"));
        }
        let mel_node = tape.constant(Shape::new(fs.b, self.config.n_mels, fs.t), mel.to_vec());
        let w = self.store.bind(self.mel_proj.w, tape, bindings);
        let b = self.store.bind(self.mel_proj.b, tape, bindings);
        let proj = tape.conv1d(mel_node, w, Some(b), 1, 0);
        Ok(tape.add(features, proj))
    }

    /// Latents `[B, D, frames]` to waveform `[B, 1, frames * hop]`, range
    /// (-1, 1).
    pub fn decode(&self, tape: &mut Tape, bindings: &mut Bindings, z: NodeId) -> Result<NodeId> {
        let zs = tape.shape(z);
        if zs.c != self.config.latent_dim {
            return Err(Error::invalid(format!(
                "latent has {} channels, model wants {}",
                zs.c, self.config.latent_dim
            )));
        }
        if tape.value(z).iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite latent"));
        }
        let n = self.config.strides.len();
        let w = self.store.bind(self.dec_in.w, tape, bindings);
        let b = self.store.bind(self.dec_in.b, tape, bindings);
        let mut h = tape.conv1d(z, w, Some(b), 1, 1);
        for (i, (sc, ru)) in self.dec_stages.iter().enumerate() {
            let stride = self.config.strides[n - 1 - i];
            let (_, pad) = stride_kernel(stride);
            // Mirror of the encoder: the residual unit runs at the coarse
            // rate, before upsampling.
            h = self.res_forward(tape, bindings, h, ru);
            let w = self.store.bind(sc.w, tape, bindings);
            let b = self.store.bind(sc.b, tape, bindings);
            let a = tape.leaky_relu(h, LEAK);
            h = tape.conv_transpose1d(a, w, Some(b), stride, pad);
        }
        let a = tape.leaky_relu(h, LEAK);
        let w = self.store.bind(self.dec_out.w, tape, bindings);
        let b = self.store.bind(self.dec_out.b, tape, bindings);
        let y = tape.conv1d(a, w, Some(b), 1, 3);
        Ok(tape.tanh(y))
    }
}
