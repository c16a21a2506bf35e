//! Reconstruction and adversarial losses plus assembly of the total
//! training objective.
//!
//! The reconstruction bundle is multi-scale log-mel L1 + multi-scale STFT
//! (log-magnitude L1 and spectral convergence) + waveform L1, weighted
//! 15 / 2 / 0.1 by default. The rate term comes in as a tape node built by
//! [`target_kl_node`] or [`free_bits_node`] from the bottleneck's KL nodes.
//! The adversarial path is a multi-resolution spectrogram discriminator
//! with least-squares GAN losses and L1 feature matching; it is off by
//! default (`adv_weight = 0`).

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ratebench_core::RateSpec;
use serde::{Deserialize, Serialize};

use crate::dsp::mel_filterbank;
use crate::error::{Error, Result};
use crate::tensor::fft::StftPlan;
use crate::tensor::optim::{Bindings, ParamStore};
use crate::tensor::{NodeId, Shape, Tape};

/// Log-mel scales for the `mel_distance` metric: (n_fft, n_mels).
pub const DEFAULT_MEL_SCALES: [(usize, usize); 2] = [(2048, 80), (512, 80)];
/// Log-mel scales for the differentiable reconstruction bundle (coarser
/// hop than the metric; the trainer calls this every step).
pub const TRAIN_MEL_SCALES: [(usize, usize); 2] = [(1024, 64), (256, 48)];
/// FFT sizes for the multi-scale STFT reconstruction term.
pub const DEFAULT_STFT_FFTS: [usize; 2] = [512, 128];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub recon_weight: f64,
    /// Weight on the rate term (the sweep's lambda: 1, 2, 10).
    pub rate_weight: f64,
    /// 0 disables the adversarial path entirely.
    pub adv_weight: f64,
    pub feature_match_weight: f64,
    /// Weights inside the reconstruction bundle.
    pub mel_weight: f64,
    pub stft_weight: f64,
    pub waveform_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon_weight: 1.0,
            rate_weight: 1.0,
            adv_weight: 0.0,
            feature_match_weight: 2.0,
            mel_weight: 15.0,
            stft_weight: 2.0,
            waveform_weight: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("recon_weight", self.recon_weight),
            ("rate_weight", self.rate_weight),
            ("adv_weight", self.adv_weight),
            ("feature_match_weight", self.feature_match_weight),
            ("mel_weight", self.mel_weight),
            ("stft_weight", self.stft_weight),
            ("waveform_weight", self.waveform_weight),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mean over scales of the L1 distance between log-mel spectrograms.
/// Symmetric, zero iff the signals are spectrally identical at those
/// scales, and fully deterministic.
pub fn mel_distance(
    x: &[f32],
    y: &[f32],
    sample_rate_hz: f64,
    scales: &[(usize, usize)],
) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if scales.is_empty() {
        return Err(Error::invalid("at least one mel scale required"));
    }
    let mut total = 0.0f64;
    for &(n_fft, n_mels) in scales {
        if x.len() < n_fft {
            return Err(Error::invalid(format!(
                "signal of {} samples shorter than n_fft {n_fft}",
                x.len()
            )));
        }
        let plan = StftPlan::new(n_fft, n_fft / 4);
        let fb = mel_filterbank(sample_rate_hz, n_fft, n_mels);
        let lx = log_mel_frames(&plan, &fb, n_mels, x);
        let ly = log_mel_frames(&plan, &fb, n_mels, y);
        let l1 = lx
            .iter()
            .zip(&ly)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>()
            / lx.len() as f64;
        total += l1;
    }
    Ok(total / scales.len() as f64)
}

fn log_mel_frames(plan: &StftPlan, fb: &[f32], n_mels: usize, x: &[f32]) -> Vec<f32> {
    let frames = plan.num_frames(x.len());
    let bins = plan.bins();
    let used = (frames - 1) * plan.hop + plan.n_fft;
    let mut mag = vec![0.0f32; bins * frames];
    let mut spec = vec![0.0f32; frames * bins * 2];
    plan.magnitude(&x[..used], &mut mag, &mut spec);
    let mut out = vec![0.0f32; n_mels * frames];
    for m in 0..n_mels {
        for f in 0..frames {
            let mut acc = 0.0f32;
            for k in 0..bins {
                acc += fb[m * bins + k] * mag[k * frames + f];
            }
            out[m * frames + f] = (acc + 1e-5).ln();
        }
    }
    out
}

struct MelScale {
    plan: Arc<StftPlan>,
    fb: Vec<f32>,
    n_mels: usize,
    bins: usize,
}

/// Differentiable reconstruction bundle over tape nodes.
pub struct ReconLoss {
    mel_scales: Vec<MelScale>,
    stft_plans: Vec<Arc<StftPlan>>,
}

/// The bundle's tape nodes, unweighted.
pub struct ReconParts {
    pub mel_l1: NodeId,
    pub stft: NodeId,
    pub waveform_l1: NodeId,
    /// mel_weight * mel + stft_weight * stft + waveform_weight * l1
    pub bundle: NodeId,
}

/// Precomputed reference-side spectra for one item; targets are constants,
/// so computing them once per item (not once per step) halves the loss-side
/// transform cost.
#[derive(Clone)]
pub struct RefSpectra {
    /// Per mel scale: log-mel `[n_mels, frames]`.
    mel: Vec<Vec<f32>>,
    /// Per STFT size: magnitude `[bins, frames]`.
    mag: Vec<Vec<f32>>,
    /// Per STFT size: squared Frobenius norm of the magnitude.
    mag_sq_norm: Vec<f64>,
    samples: usize,
}

impl ReconLoss {
    pub fn new(sample_rate_hz: f64) -> Self {
        Self::with_scales(sample_rate_hz, &TRAIN_MEL_SCALES, &DEFAULT_STFT_FFTS)
    }

    pub fn with_scales(
        sample_rate_hz: f64,
        mel_scales: &[(usize, usize)],
        stft_ffts: &[usize],
    ) -> Self {
        let mel_scales = mel_scales
            .iter()
            .map(|&(n_fft, n_mels)| MelScale {
                plan: Arc::new(StftPlan::new(n_fft, n_fft / 2)),
                fb: mel_filterbank(sample_rate_hz, n_fft, n_mels),
                n_mels,
                bins: n_fft / 2 + 1,
            })
            .collect();
        let stft_plans = stft_ffts
            .iter()
            .map(|&n| Arc::new(StftPlan::new(n, n / 2)))
            .collect();
        Self {
            mel_scales,
            stft_plans,
        }
    }

    /// Computes the reference-side targets for one waveform.
    pub fn reference_spectra(&self, x: &[f32]) -> RefSpectra {
        let mut mel = Vec::with_capacity(self.mel_scales.len());
        for scale in &self.mel_scales {
            mel.push(log_mel_frames(&scale.plan, &scale.fb, scale.n_mels, x));
        }
        let mut mag = Vec::with_capacity(self.stft_plans.len());
        let mut mag_sq_norm = Vec::with_capacity(self.stft_plans.len());
        for plan in &self.stft_plans {
            let frames = plan.num_frames(x.len());
            let bins = plan.bins();
            let used = (frames - 1) * plan.hop + plan.n_fft;
            let mut m = vec![0.0f32; bins * frames];
            let mut spec = vec![0.0f32; frames * bins * 2];
            plan.magnitude(&x[..used], &mut m, &mut spec);
            mag_sq_norm.push(m.iter().map(|&v| (v as f64) * (v as f64)).sum());
            mag.push(m);
        }
        RefSpectra {
            mel,
            mag,
            mag_sq_norm,
            samples: x.len(),
        }
    }

    fn log_mel_node(&self, tape: &mut Tape, scale: &MelScale, x: NodeId) -> NodeId {
        let mag = tape.stft_mag(x, &scale.plan);
        let w = tape.constant(
            Shape::new(scale.n_mels, scale.bins, 1),
            scale.fb.clone(),
        );
        let mel = tape.conv1d(mag, w, None, 1, 0);
        let mel = tape.add_scalar(mel, 1e-5);
        tape.ln(mel)
    }

    /// Multi-scale log-mel L1 between a prediction node and a reference
    /// node (mean over scales).
    pub fn mel_l1(&self, tape: &mut Tape, y_hat: NodeId, y_ref: NodeId) -> NodeId {
        let mut acc: Option<NodeId> = None;
        for scale in &self.mel_scales {
            let a = self.log_mel_node(tape, scale, y_hat);
            let b = self.log_mel_node(tape, scale, y_ref);
            let l1 = tape.l1(a, b);
            acc = Some(match acc {
                None => l1,
                Some(prev) => tape.add(prev, l1),
            });
        }
        let total = acc.expect("at least one mel scale");
        tape.scale(total, 1.0 / self.mel_scales.len() as f32)
    }

    /// Sum over FFT sizes of log-magnitude L1 plus spectral convergence.
    pub fn multiscale_stft(&self, tape: &mut Tape, y_hat: NodeId, y_ref: NodeId) -> NodeId {
        let mut acc: Option<NodeId> = None;
        for plan in &self.stft_plans {
            let mh = tape.stft_mag(y_hat, plan);
            let mr = tape.stft_mag(y_ref, plan);
            let lh = tape.add_scalar(mh, 1e-5);
            let lh = tape.ln(lh);
            let lr = tape.add_scalar(mr, 1e-5);
            let lr = tape.ln(lr);
            let logmag = tape.l1(lh, lr);

            // ||mh - mr||_F / ||mr||_F; the reference norm is a constant.
            let diff = tape.sub(mh, mr);
            let sq = tape.square(diff);
            let ss = tape.sum_all(sq);
            let norm = tape.unary(ss, crate::tensor::Unary::Sqrt);
            let ref_norm = tape
                .value(mr)
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt()
                .max(1e-9) as f32;
            let sc = tape.scale(norm, 1.0 / ref_norm);

            let term = tape.add(logmag, sc);
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(prev, term),
            });
        }
        acc.expect("at least one stft size")
    }

    /// Full bundle against reference waveform data (`[B, T]` flat),
    /// computing reference spectra on the fly.
    pub fn forward(
        &self,
        tape: &mut Tape,
        y_hat: NodeId,
        reference: &[f32],
        weights: &LossWeights,
    ) -> Result<ReconParts> {
        let s = tape.shape(y_hat);
        if reference.len() != s.b * s.t {
            return Err(Error::invalid(format!(
                "reference length {} != prediction {}",
                reference.len(),
                s.b * s.t
            )));
        }
        let refs: Vec<RefSpectra> = (0..s.b)
            .map(|i| self.reference_spectra(&reference[i * s.t..(i + 1) * s.t]))
            .collect();
        let ref_views: Vec<&RefSpectra> = refs.iter().collect();
        self.forward_with_refs(tape, y_hat, &ref_views, reference, weights)
    }

    /// Full bundle with precomputed reference spectra (one per batch item).
    pub fn forward_with_refs(
        &self,
        tape: &mut Tape,
        y_hat: NodeId,
        refs: &[&RefSpectra],
        reference: &[f32],
        weights: &LossWeights,
    ) -> Result<ReconParts> {
        let s = tape.shape(y_hat);
        if s.c != 1 {
            return Err(Error::invalid("reconstruction loss expects [B, 1, T]"));
        }
        if refs.len() != s.b || reference.len() != s.b * s.t {
            return Err(Error::invalid("reference batch size mismatch"));
        }
        if refs.iter().any(|r| r.samples != s.t) {
            return Err(Error::invalid("reference spectra were built for a different length"));
        }

        // Multi-scale log-mel L1 (mean over scales).
        let mut mel_acc: Option<NodeId> = None;
        for (si, scale) in self.mel_scales.iter().enumerate() {
            let pred = self.log_mel_node(tape, scale, y_hat);
            let ps = tape.shape(pred);
            let mut target = Vec::with_capacity(ps.numel());
            for r in refs {
                target.extend_from_slice(&r.mel[si]);
            }
            let tgt = tape.constant(ps, target);
            let l1 = tape.l1(pred, tgt);
            mel_acc = Some(match mel_acc {
                None => l1,
                Some(prev) => tape.add(prev, l1),
            });
        }
        let mel_sum = mel_acc.expect("at least one mel scale");
        let mel_l1 = tape.scale(mel_sum, 1.0 / self.mel_scales.len() as f32);

        // Multi-scale STFT: log-magnitude L1 + spectral convergence.
        let mut stft_acc: Option<NodeId> = None;
        for (pi, plan) in self.stft_plans.iter().enumerate() {
            let mh = tape.stft_mag(y_hat, plan);
            let ms = tape.shape(mh);
            let mut target = Vec::with_capacity(ms.numel());
            let mut sq_norm = 0.0f64;
            for r in refs {
                target.extend_from_slice(&r.mag[pi]);
                sq_norm += r.mag_sq_norm[pi];
            }
            let mr = tape.constant(ms, target);
            let lh = tape.add_scalar(mh, 1e-5);
            let lh = tape.ln(lh);
            let lr = tape.add_scalar(mr, 1e-5);
            let lr = tape.ln(lr);
            let logmag = tape.l1(lh, lr);

            let diff = tape.sub(mh, mr);
            let sq = tape.square(diff);
            let ss = tape.sum_all(sq);
            let norm = tape.unary(ss, crate::tensor::Unary::Sqrt);
            let sc = tape.scale(norm, 1.0 / (sq_norm.sqrt().max(1e-9) as f32));

            let term = tape.add(logmag, sc);
            stft_acc = Some(match stft_acc {
                None => term,
                Some(prev) => tape.add(prev, term),
            });
        }
        let stft = stft_acc.expect("at least one stft size");

        let y_ref = tape.constant(s, reference.to_vec());
        let waveform_l1 = tape.l1(y_hat, y_ref);

        let wm = tape.scale(mel_l1, weights.mel_weight as f32);
        let ws = tape.scale(stft, weights.stft_weight as f32);
        let ww = tape.scale(waveform_l1, weights.waveform_weight as f32);
        let sum = tape.add(wm, ws);
        let bundle = tape.add(sum, ww);
        Ok(ReconParts {
            mel_l1,
            stft,
            waveform_l1,
            bundle,
        })
    }
}

/// Differentiable target-KL rate term:
/// `((mean_kl - target) / latent_dim)^2`.
pub fn target_kl_node(tape: &mut Tape, kl_mean: NodeId, spec: &RateSpec) -> NodeId {
    let centered = tape.add_scalar(kl_mean, -(spec.target_kl_nats as f32));
    let normed = tape.scale(centered, 1.0 / spec.latent_dim as f32);
    tape.square(normed)
}

/// Differentiable free-bits rate term: `sum_j max(lambda, kl_j)` over the
/// per-dimension expected KL node `[1, D, 1]`.
pub fn free_bits_node(tape: &mut Tape, per_dim_kl: NodeId, lambda_min: f64) -> NodeId {
    let clamped = tape.clamp(per_dim_kl, lambda_min as f32, f32::INFINITY);
    tape.sum_all(clamped)
}

/// Adversarial nodes handed to [`total_objective`].
pub struct AdvParts {
    pub generator: NodeId,
    pub feature_match: NodeId,
}

pub struct LossReport {
    pub total: f64,
    pub recon: f64,
    pub rate: f64,
    pub adv: f64,
    pub feature_match: f64,
    /// Batch-mean per-frame KL of this step (absent for passthrough and
    /// VQ).
    pub measured_kl_per_frame: Option<f64>,
    /// True when the rate term was structurally absent (passthrough batch).
    pub rate_excluded: bool,
    /// Unweighted component values for logging.
    pub components: BTreeMap<String, f64>,
    pub total_node: NodeId,
}

/// Assembles `total = recon_weight * recon + rate_weight * rate +
/// adv_weight * adv + feature_match_weight * fm + extras`, recording every
/// component unweighted.
pub fn total_objective(
    tape: &mut Tape,
    recon: NodeId,
    rate: Option<NodeId>,
    adv: Option<AdvParts>,
    extras: &[(&str, NodeId, f64)],
    weights: &LossWeights,
) -> Result<LossReport> {
    weights.validate()?;
    let mut components = BTreeMap::new();
    let recon_v = tape.scalar(recon) as f64;
    components.insert("recon".to_string(), recon_v);

    let mut total = tape.scale(recon, weights.recon_weight as f32);
    let mut rate_v = 0.0;
    if let Some(rate) = rate {
        rate_v = tape.scalar(rate) as f64;
        let w = tape.scale(rate, weights.rate_weight as f32);
        total = tape.add(total, w);
    }
    components.insert("rate".to_string(), rate_v);

    let (mut adv_v, mut fm_v) = (0.0, 0.0);
    if let Some(parts) = adv {
        adv_v = tape.scalar(parts.generator) as f64;
        fm_v = tape.scalar(parts.feature_match) as f64;
        let wa = tape.scale(parts.generator, weights.adv_weight as f32);
        let wf = tape.scale(parts.feature_match, weights.feature_match_weight as f32);
        total = tape.add(total, wa);
        total = tape.add(total, wf);
    }
    components.insert("adv".to_string(), adv_v);
    components.insert("feature_match".to_string(), fm_v);

    let mut extra_total = 0.0;
    for (name, node, weight) in extras {
        if *weight < 0.0 {
            return Err(Error::invalid(format!("extra weight for {name} must be >= 0")));
        }
        let v = tape.scalar(*node) as f64;
        components.insert((*name).to_string(), v);
        extra_total += weight * v;
        let w = tape.scale(*node, *weight as f32);
        total = tape.add(total, w);
    }

    let total_v = weights.recon_weight * recon_v
        + weights.rate_weight * rate_v
        + weights.adv_weight * adv_v
        + weights.feature_match_weight * fm_v
        + extra_total;

    Ok(LossReport {
        total: total_v,
        recon: recon_v,
        rate: rate_v,
        adv: adv_v,
        feature_match: fm_v,
        measured_kl_per_frame: None,
        rate_excluded: rate.is_none(),
        components,
        total_node: total,
    })
}

struct DiscBranch {
    plan: Arc<StftPlan>,
    w1: crate::tensor::optim::ParamId,
    b1: crate::tensor::optim::ParamId,
    w2: crate::tensor::optim::ParamId,
    b2: crate::tensor::optim::ParamId,
    w3: crate::tensor::optim::ParamId,
    b3: crate::tensor::optim::ParamId,
}

/// Multi-resolution log-spectrogram discriminator: per resolution, a small
/// conv stack over frames with frequency bins as input channels, emitting
/// per-frame scores. Least-squares GAN convention: real -> 1, fake -> 0.
pub struct Discriminator {
    pub store: ParamStore,
    branches: Vec<DiscBranch>,
    channels: usize,
}

impl Discriminator {
    pub fn new(ffts: &[usize], channels: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6469_7363_0000_0001);
        let mut branches = Vec::with_capacity(ffts.len());
        for (i, &n_fft) in ffts.iter().enumerate() {
            let bins = n_fft / 2 + 1;
            let w1 = store.register_uniform(
                format!("disc.r{i}.c1.w"),
                Shape::new(channels, bins, 5),
                bins * 5,
                1.0,
                &mut rng,
            );
            let b1 = store.register_zeros(format!("disc.r{i}.c1.b"), Shape::new(1, channels, 1));
            let w2 = store.register_uniform(
                format!("disc.r{i}.c2.w"),
                Shape::new(channels, channels, 5),
                channels * 5,
                1.0,
                &mut rng,
            );
            let b2 = store.register_zeros(format!("disc.r{i}.c2.b"), Shape::new(1, channels, 1));
            let w3 = store.register_uniform(
                format!("disc.r{i}.c3.w"),
                Shape::new(1, channels, 3),
                channels * 3,
                1.0,
                &mut rng,
            );
            let b3 = store.register_zeros(format!("disc.r{i}.c3.b"), Shape::new(1, 1, 1));
            branches.push(DiscBranch {
                plan: Arc::new(StftPlan::new(n_fft, n_fft / 4)),
                w1,
                b1,
                w2,
                b2,
                w3,
                b3,
            });
        }
        Self {
            store,
            branches,
            channels: channels.max(1),
        }
    }

    /// Scores and intermediate activations for one waveform node. With
    /// `trainable` false the weights enter the tape as constants (the
    /// generator step must not touch them).
    fn forward(
        &self,
        tape: &mut Tape,
        bindings: &mut Bindings,
        audio: NodeId,
        trainable: bool,
    ) -> (Vec<NodeId>, Vec<NodeId>) {
        let _ = self.channels;
        let mut scores = Vec::new();
        let mut feats = Vec::new();
        for br in &self.branches {
            let mag = tape.stft_mag(audio, &br.plan);
            let lg = tape.add_scalar(mag, 1e-5);
            let lg = tape.ln(lg);
            let bind = |store: &ParamStore, id, tape: &mut Tape, bindings: &mut Bindings| {
                if trainable {
                    store.bind(id, tape, bindings)
                } else {
                    let p = store.get(id);
                    tape.constant(p.shape, p.data.clone())
                }
            };
            let w1 = bind(&self.store, br.w1, tape, bindings);
            let b1 = bind(&self.store, br.b1, tape, bindings);
            let h1 = tape.conv1d(lg, w1, Some(b1), 1, 2);
            let a1 = tape.leaky_relu(h1, 0.2);
            let w2 = bind(&self.store, br.w2, tape, bindings);
            let b2 = bind(&self.store, br.b2, tape, bindings);
            let h2 = tape.conv1d(a1, w2, Some(b2), 1, 2);
            let a2 = tape.leaky_relu(h2, 0.2);
            let w3 = bind(&self.store, br.w3, tape, bindings);
            let b3 = bind(&self.store, br.b3, tape, bindings);
            let score = tape.conv1d(a2, w3, Some(b3), 1, 1);
            scores.push(score);
            feats.push(a1);
            feats.push(a2);
        }
        (scores, feats)
    }

    /// LSGAN discriminator loss: `mean((D(real) - 1)^2) + mean(D(fake)^2)`.
    /// Both inputs should be constants on this tape (the generator is not
    /// updated here).
    pub fn discriminator_loss(
        &self,
        tape: &mut Tape,
        bindings: &mut Bindings,
        real: NodeId,
        fake: NodeId,
    ) -> NodeId {
        let (real_scores, _) = self.forward(tape, bindings, real, true);
        let (fake_scores, _) = self.forward(tape, bindings, fake, true);
        let mut acc: Option<NodeId> = None;
        for (r, f) in real_scores.into_iter().zip(fake_scores) {
            let rm = tape.add_scalar(r, -1.0);
            let rsq = tape.square(rm);
            let rterm = tape.mean_all(rsq);
            let fsq = tape.square(f);
            let fterm = tape.mean_all(fsq);
            let sum = tape.add(rterm, fterm);
            acc = Some(match acc {
                None => sum,
                Some(prev) => tape.add(prev, sum),
            });
        }
        let total = acc.expect("at least one resolution");
        tape.scale(total, 1.0 / self.branches.len() as f32)
    }

    /// LSGAN generator loss plus L1 feature matching against the real
    /// activations. Discriminator weights are constants here.
    pub fn generator_losses(
        &self,
        tape: &mut Tape,
        real: NodeId,
        fake: NodeId,
    ) -> AdvParts {
        let mut scratch = Bindings::new();
        let (real_scores, real_feats) = self.forward(tape, &mut scratch, real, false);
        let (fake_scores, fake_feats) = self.forward(tape, &mut scratch, fake, false);
        let mut adv: Option<NodeId> = None;
        for f in fake_scores {
            let fm1 = tape.add_scalar(f, -1.0);
            let sq = tape.square(fm1);
            let term = tape.mean_all(sq);
            adv = Some(match adv {
                None => term,
                Some(prev) => tape.add(prev, term),
            });
        }
        let adv = adv.expect("at least one resolution");
        let adv = tape.scale(adv, 1.0 / self.branches.len() as f32);
        let _ = real_scores;

        let mut fm: Option<NodeId> = None;
        let n_feats = real_feats.len() as f32;
        for (rf, ff) in real_feats.into_iter().zip(fake_feats) {
            let l1 = tape.l1(ff, rf);
            fm = Some(match fm {
                None => l1,
                Some(prev) => tape.add(prev, l1),
            });
        }
        let fm = fm.expect("at least one feature map");
        let fm = tape.scale(fm, 1.0 / n_feats);
        AdvParts {
            generator: adv,
            feature_match: fm,
        }
    }
}
