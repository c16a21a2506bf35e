//! Toy latent diffusion probe: a small residual conv net trained with
//! v-prediction on frozen-VAE latents under the shifted cosine schedule.
//! Its validation v-MSE, normalized by the variance of the target, scores
//! how predictable a VAE's latent space is; the score is reported next to
//! the VAE's bitrate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use ratebench_core::rng::mix_seed;
use ratebench_core::NoiseSchedule;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::optim::{AdamW, Bindings, ParamId, ParamStore};
use crate::tensor::{NodeId, Shape, Tape};
use crate::trainer::Trainer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondKind {
    None,
    ClassLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub t_embed_dim: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub sampler_steps: usize,
    pub conditioning: CondKind,
    /// logSNR shift; ln(1/2) biases sampling toward noisier steps.
    pub shift_s: f64,
    pub seed: u64,
    /// Diffusion times are drawn uniformly from (t_min, 1 - t_min) to
    /// avoid the logSNR singularities.
    pub t_min: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            blocks: 2,
            t_embed_dim: 32,
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.01,
            sampler_steps: 32,
            conditioning: CondKind::ClassLabel,
            shift_s: (0.5f64).ln(),
            seed: 0,
            t_min: 1e-5,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.t_embed_dim == 0 || !self.t_embed_dim.is_multiple_of(2) {
            return Err(Error::invalid(
                "hidden must be positive and t_embed_dim a positive even number",
            ));
        }
        if self.steps < 1 || self.batch_size < 1 || self.sampler_steps < 1 {
            return Err(Error::invalid("steps, batch_size, sampler_steps must be >= 1"));
        }
        if !(self.t_min > 0.0 && self.t_min < 0.5) {
            return Err(Error::invalid("t_min must lie in (0, 0.5)"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::new(self.shift_s)
    }
}

/// Latent examples for the probe: channel-major `[D, frames]` per item.
#[derive(Debug, Clone)]
pub struct LatentSet {
    pub latents: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub latent_dim: usize,
    pub frames: usize,
    pub n_classes: usize,
}

impl LatentSet {
    pub fn mean_square(&self) -> f64 {
        let mut acc = 0.0f64;
        let mut n = 0usize;
        for z in &self.latents {
            acc += z.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            n += z.len();
        }
        acc / n as f64
    }
}

/// Extracts eval-mode latents from a trained VAE for the probe. `train`
/// selects the VAE's train or eval split.
pub fn extract_latents(vae: &mut Trainer, train: bool) -> Result<LatentSet> {
    if vae.step_count() == 0 {
        return Err(Error::precondition(
            "latent extraction needs a trained VAE checkpoint",
        ));
    }
    let indices: Vec<usize> = if train {
        vae.dataset.train_idx.clone()
    } else {
        vae.dataset.eval_idx.clone()
    };
    let set = vae.encode_latents(&indices)?;
    Ok(set)
}

struct ConvIds {
    w: ParamId,
    b: ParamId,
}

/// Small residual 1-D conv net over latent frames with sinusoidal time
/// embedding and optional class conditioning, predicting v.
pub struct Denoiser {
    pub cfg: DiffusionConfig,
    pub store: ParamStore,
    pub latent_dim: usize,
    pub n_classes: usize,
    in_proj: ConvIds,
    t_proj: ConvIds,
    cond_proj: Option<ConvIds>,
    blocks: Vec<(ConvIds, ConvIds)>,
    out_proj: ConvIds,
    t_freqs: Vec<f64>,
}

impl Denoiser {
    pub fn new(cfg: DiffusionConfig, latent_dim: usize, n_classes: usize) -> Result<Self> {
        cfg.validate()?;
        if latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be >= 1"));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6465_6e6f_0000_0001);
        let h = cfg.hidden;
        let conv = |store: &mut ParamStore,
                    rng: &mut ChaCha8Rng,
                    name: &str,
                    c_out: usize,
                    c_in: usize,
                    k: usize,
                    gain: f32| ConvIds {
            w: store.register_uniform(format!("{name}.w"), Shape::new(c_out, c_in, k), c_in * k, gain, rng),
            b: store.register_zeros(format!("{name}.b"), Shape::new(1, c_out, 1)),
        };
        let in_proj = conv(&mut store, &mut rng, "dn.in", h, latent_dim, 1, 1.0);
        let t_proj = conv(&mut store, &mut rng, "dn.t", h, cfg.t_embed_dim, 1, 1.0);
        let cond_proj = match cfg.conditioning {
            CondKind::ClassLabel => Some(conv(&mut store, &mut rng, "dn.cond", h, n_classes.max(1), 1, 1.0)),
            CondKind::None => None,
        };
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let c1 = conv(&mut store, &mut rng, &format!("dn.b{i}.c1"), h, h, 3, 1.0);
            let c2 = conv(&mut store, &mut rng, &format!("dn.b{i}.c2"), h, h, 3, 1.0);
            blocks.push((c1, c2));
        }
        // Zero-initialized head: the untrained net predicts exactly v = 0,
        // so its initial loss is the second moment of the target.
        let out_proj = ConvIds {
            w: store.register_zeros("dn.out.w", Shape::new(latent_dim, h, 1)),
            b: store.register_zeros("dn.out.b", Shape::new(1, latent_dim, 1)),
        };
        let half = cfg.t_embed_dim / 2;
        let t_freqs = (0..half)
            .map(|i| 1000f64.powf(i as f64 / (half.max(1)) as f64))
            .collect();
        Ok(Self {
            cfg,
            store,
            latent_dim,
            n_classes: n_classes.max(1),
            in_proj,
            t_proj,
            cond_proj,
            blocks,
            out_proj,
            t_freqs,
        })
    }

    fn t_embedding(&self, ts: &[f64]) -> Vec<f32> {
        let e = self.cfg.t_embed_dim;
        let mut out = Vec::with_capacity(ts.len() * e);
        for &t in ts {
            for &f in &self.t_freqs {
                out.push((t * f).sin() as f32);
            }
            for &f in &self.t_freqs {
                out.push((t * f).cos() as f32);
            }
        }
        out
    }

    fn one_hot(&self, labels: &[usize]) -> Vec<f32> {
        let mut out = vec![0.0f32; labels.len() * self.n_classes];
        for (i, &l) in labels.iter().enumerate() {
            out[i * self.n_classes + l.min(self.n_classes - 1)] = 1.0;
        }
        out
    }

    /// v prediction for a batch of noised latents `[B, D, F]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bindings: &mut Bindings,
        z_t: NodeId,
        ts: &[f64],
        labels: &[usize],
    ) -> Result<NodeId> {
        let s = tape.shape(z_t);
        if s.c != self.latent_dim {
            return Err(Error::invalid(format!(
                "denoiser expects {} latent channels, got {}",
                self.latent_dim, s.c
            )));
        }
        if ts.len() != s.b || labels.len() != s.b {
            return Err(Error::invalid("per-item time/label count mismatch"));
        }
        let w = self.store.bind(self.in_proj.w, tape, bindings);
        let b = self.store.bind(self.in_proj.b, tape, bindings);
        let mut h = tape.conv1d(z_t, w, Some(b), 1, 0);

        let emb = tape.constant(
            Shape::new(s.b, self.cfg.t_embed_dim, 1),
            self.t_embedding(ts),
        );
        let w = self.store.bind(self.t_proj.w, tape, bindings);
        let b = self.store.bind(self.t_proj.b, tape, bindings);
        let temb = tape.conv1d(emb, w, Some(b), 1, 0);
        h = tape.broadcast_add_time(h, temb);

        if let Some(cond) = &self.cond_proj {
            let oh = tape.constant(Shape::new(s.b, self.n_classes, 1), self.one_hot(labels));
            let w = self.store.bind(cond.w, tape, bindings);
            let b = self.store.bind(cond.b, tape, bindings);
            let cemb = tape.conv1d(oh, w, Some(b), 1, 0);
            h = tape.broadcast_add_time(h, cemb);
        }

        for (c1, c2) in &self.blocks {
            let w1 = self.store.bind(c1.w, tape, bindings);
            let b1 = self.store.bind(c1.b, tape, bindings);
            let w2 = self.store.bind(c2.w, tape, bindings);
            let b2 = self.store.bind(c2.b, tape, bindings);
            let a = tape.leaky_relu(h, 0.2);
            let a = tape.conv1d(a, w1, Some(b1), 1, 1);
            let a = tape.leaky_relu(a, 0.2);
            let a = tape.conv1d(a, w2, Some(b2), 1, 1);
            h = tape.add(h, a);
        }
        let a = tape.leaky_relu(h, 0.2);
        let w = self.store.bind(self.out_proj.w, tape, bindings);
        let b = self.store.bind(self.out_proj.b, tape, bindings);
        Ok(tape.conv1d(a, w, Some(b), 1, 0))
    }
}

/// One validation pass: v-MSE of the denoiser over the whole latent set
/// with draws derived from `seed` (deterministic).
pub fn validation_v_mse(
    denoiser: &Denoiser,
    latents: &LatentSet,
    draws_per_item: usize,
    seed: u64,
) -> Result<f64> {
    let sched = denoiser.cfg.schedule();
    let t_min = denoiser.cfg.t_min;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for draw in 0..draws_per_item {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed ^ 0x7661_6c00, draw as u64));
        for (i, z) in latents.latents.iter().enumerate() {
            let t = t_min + (1.0 - 2.0 * t_min) * rng.random_range(0.0..1.0f64);
            let (alpha, sigma) = sched.alpha_sigma(t)?;
            let (a, s) = (alpha as f32, sigma as f32);
            let eps: Vec<f32> = (0..z.len()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            let z_t: Vec<f32> = z.iter().zip(&eps).map(|(&z, &e)| a * z + s * e).collect();
            let v: Vec<f32> = z.iter().zip(&eps).map(|(&z, &e)| a * e - s * z).collect();
            let mut tape = Tape::new();
            let mut bindings = Bindings::new();
            let shape = Shape::new(1, latents.latent_dim, latents.frames);
            let zt = tape.constant(shape, z_t);
            let vt = tape.constant(shape, v);
            let vh = denoiser.forward(&mut tape, &mut bindings, zt, &[t], &[latents.labels[i]])?;
            let mse = tape.mse(vh, vt);
            total += tape.scalar(mse) as f64;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Second moment of the v target under the schedule and uniform t draws,
/// from data statistics: `E||v||^2 = E_t[alpha^2] + E_t[sigma^2] E||z||^2`
/// (unit-variance noise). Evaluated by quadrature over t.
pub fn expected_v_sq(latents: &LatentSet, schedule: &NoiseSchedule, t_min: f64) -> Result<f64> {
    let n = 20_000;
    let mut ea2 = 0.0f64;
    let mut es2 = 0.0f64;
    for i in 0..n {
        let t = t_min + (1.0 - 2.0 * t_min) * ((i as f64 + 0.5) / n as f64);
        let (a, s) = schedule.alpha_sigma(t)?;
        ea2 += a * a;
        es2 += s * s;
    }
    ea2 /= n as f64;
    es2 /= n as f64;
    Ok(ea2 + es2 * latents.mean_square())
}

/// Trains the denoiser on the latent set; returns the loss curve (one value
/// per step).
pub fn train_denoiser(
    denoiser: &mut Denoiser,
    latents: &LatentSet,
) -> Result<Vec<f64>> {
    if latents.latents.is_empty() {
        return Err(Error::invalid("empty latent set"));
    }
    if latents.latent_dim != denoiser.latent_dim {
        return Err(Error::invalid(format!(
            "latent dim {} does not match denoiser {}",
            latents.latent_dim, denoiser.latent_dim
        )));
    }
    let cfg = denoiser.cfg.clone();
    let sched = cfg.schedule();
    let mut opt = AdamW::new(&denoiser.store, cfg.lr as f32, cfg.weight_decay as f32);
    let n = latents.latents.len();
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ 0x6466_7374, step));
        let bs = cfg.batch_size.min(n);
        let mut z_t = Vec::with_capacity(bs * latents.latent_dim * latents.frames);
        let mut v = Vec::with_capacity(z_t.capacity());
        let mut ts = Vec::with_capacity(bs);
        let mut labels = Vec::with_capacity(bs);
        for _ in 0..bs {
            let idx = rng.random_range(0..n);
            let z = &latents.latents[idx];
            let t = cfg.t_min + (1.0 - 2.0 * cfg.t_min) * rng.random_range(0.0..1.0f64);
            let (alpha, sigma) = sched.alpha_sigma(t)?;
            let (a, s) = (alpha as f32, sigma as f32);
            for (j, &zj) in z.iter().enumerate() {
                let e: f32 = rng.sample(StandardNormal);
                z_t.push(a * zj + s * e);
                v.push(a * e - s * zj);
                let _ = j;
            }
            ts.push(t);
            labels.push(latents.labels[idx]);
        }
        let mut tape = Tape::new();
        let mut bindings = Bindings::new();
        let shape = Shape::new(bs, latents.latent_dim, latents.frames);
        let zt_node = tape.constant(shape, z_t);
        let v_node = tape.constant(shape, v);
        let v_hat = denoiser.forward(&mut tape, &mut bindings, zt_node, &ts, &labels)?;
        let loss = tape.mse(v_hat, v_node);
        let value = tape.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                snapshot: format!("v-mse {value}"),
            });
        }
        let grads = tape.backward(loss);
        opt.step(&mut denoiser.store, &tape, &grads, &bindings);
        losses.push(value);
    }
    Ok(losses)
}

/// Deterministic DDIM-style sampler over the shifted schedule; returns one
/// latent `[D, frames]`.
pub fn sample(
    denoiser: &Denoiser,
    steps: usize,
    label: usize,
    frames: usize,
    seed: u64,
) -> Result<Vec<f32>> {
    if steps < 1 {
        return Err(Error::invalid("sampler needs at least one step"));
    }
    let sched = denoiser.cfg.schedule();
    let t_min = denoiser.cfg.t_min.max(1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(denoiser.cfg.seed ^ 0x7361_6d70, seed));
    let numel = denoiser.latent_dim * frames;
    let mut z: Vec<f32> = (0..numel).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    // Time grid from near-1 down to near-0.
    let grid: Vec<f64> = (0..=steps)
        .map(|i| (1.0 - t_min) - (1.0 - 2.0 * t_min) * i as f64 / steps as f64)
        .collect();
    let mut z_clean = z.clone();
    for w in grid.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let (alpha, sigma) = sched.alpha_sigma(t)?;
        let (a, s) = (alpha as f32, sigma as f32);
        let mut tape = Tape::new();
        let mut bindings = Bindings::new();
        let shape = Shape::new(1, denoiser.latent_dim, frames);
        let zt = tape.constant(shape, z.clone());
        let vh = denoiser.forward(&mut tape, &mut bindings, zt, &[t], &[label])?;
        let v = tape.value(vh);
        let z_hat: Vec<f32> = z.iter().zip(v).map(|(&zt, &v)| a * zt - s * v).collect();
        let eps_hat: Vec<f32> = z.iter().zip(v).map(|(&zt, &v)| s * zt + a * v).collect();
        let (an, sn) = sched.alpha_sigma(t_next)?;
        let (an, sn) = (an as f32, sn as f32);
        z = z_hat
            .iter()
            .zip(&eps_hat)
            .map(|(&zh, &eh)| an * zh + sn * eh)
            .collect();
        z_clean = z_hat;
    }
    Ok(z_clean)
}

/// Probe output written next to the VAE checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub vae_id: String,
    pub measured_kl: f64,
    pub measured_bitrate_bps: f64,
    pub predictability_score: f64,
    pub init_v_mse: f64,
    pub final_train_v_mse: f64,
    pub expected_v_sq: f64,
}

/// Trains a denoiser on the VAE's train-split latents, then scores the
/// validation v-MSE normalized by the analytic `E||v||^2` on the eval
/// split. Lower means more predictable latents.
pub fn predictability_score(
    vae: &mut Trainer,
    cfg: &DiffusionConfig,
    vae_id: &str,
) -> Result<ProbeReport> {
    cfg.validate()?;
    let train_latents = extract_latents(vae, true)?;
    let val_latents = extract_latents(vae, false)?;
    let mut denoiser = Denoiser::new(cfg.clone(), train_latents.latent_dim, train_latents.n_classes)?;

    let init_v_mse = validation_v_mse(&denoiser, &val_latents, 8, cfg.seed)?;
    let losses = train_denoiser(&mut denoiser, &train_latents)?;
    let final_v_mse = validation_v_mse(&denoiser, &val_latents, 8, cfg.seed)?;
    let evsq = expected_v_sq(&val_latents, &cfg.schedule(), cfg.t_min)?;
    let (kl, bps) = vae.measure_kl_bitrate()?;

    let tail = &losses[losses.len().saturating_sub(50)..];
    Ok(ProbeReport {
        vae_id: vae_id.to_string(),
        measured_kl: kl,
        measured_bitrate_bps: bps,
        predictability_score: final_v_mse / evsq.max(1e-12),
        init_v_mse,
        final_train_v_mse: tail.iter().sum::<f64>() / tail.len() as f64,
        expected_v_sq: evsq,
    })
}
