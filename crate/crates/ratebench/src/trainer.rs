//! Seeded training loop tying the model, bottleneck, and objectives
//! together; tracks the measured KL, converts it to a bitrate, and writes
//! metrics and checkpoints.
//!
//! Determinism is a hard contract here: for a fixed config the metrics
//! stream is bit-identical across runs. Every random draw derives from
//! (seed, step) or (seed, epoch), so no stream depends on another's
//! consumption.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ratebench_core::rng::mix_seed;
use ratebench_core::{kl_to_bitrate, vq_bitrate, RateSpec};
use serde::{Deserialize, Serialize};

use crate::bottleneck::{choose_passthrough, Bottleneck, BottleneckConfig, BottleneckKind, RateLossKind};
use crate::checkpoint::{self, Checkpoint};
use crate::data::{AudioBatch, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::model::{AudioModel, ModelConfig};
use crate::objectives::{
    self, free_bits_node, mel_distance, target_kl_node, Discriminator, LossReport, LossWeights,
    ReconLoss, RefSpectra, DEFAULT_MEL_SCALES,
};
use crate::tensor::optim::{AdamW, Bindings};
use crate::tensor::{NodeId, Shape, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub bottleneck: BottleneckConfig,
    pub weights: LossWeights,
    /// Per-frame KL target in nats; exactly one of this and
    /// `target_bitrate_bps` is needed when the rate loss is target-KL.
    pub target_kl_nats: Option<f64>,
    pub target_bitrate_bps: Option<f64>,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub dataset: DatasetSpec,
    /// Linearly ramps the rate weight over the first N steps (0 disables).
    /// Softens the huge early pull of far-from-target quadratics so
    /// reconstruction learning is not drowned out.
    pub rate_warmup_steps: u64,
    /// Test hook: overrides the per-batch passthrough draw.
    pub force_passthrough: Option<bool>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            bottleneck: BottleneckConfig::default(),
            weights: LossWeights::default(),
            target_kl_nats: Some(20.0),
            target_bitrate_bps: None,
            steps: 2000,
            batch_size: 4,
            lr: 1e-4,
            weight_decay: 0.01,
            seed: 0,
            eval_every: 250,
            dataset: DatasetSpec::default(),
            rate_warmup_steps: 0,
            force_passthrough: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.bottleneck.validate()?;
        self.weights.validate()?;
        self.dataset.validate()?;
        if self.steps < 1 {
            return Err(Error::invalid("steps must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.eval_every < 1 {
            return Err(Error::invalid("eval_every must be >= 1"));
        }
        if self.model.latent_dim != self.bottleneck.latent_dim {
            return Err(Error::invalid(format!(
                "model latent_dim {} != bottleneck latent_dim {}",
                self.model.latent_dim, self.bottleneck.latent_dim
            )));
        }
        if self.bottleneck.kind == BottleneckKind::Gaussian
            && self.bottleneck.rate_loss == RateLossKind::TargetKl
            && self.target_kl_nats.is_none()
            && self.target_bitrate_bps.is_none()
        {
            return Err(Error::invalid(
                "target-KL rate loss needs target_kl_nats or target_bitrate_bps",
            ));
        }
        self.rate_spec()?;
        Ok(())
    }

    /// Rate bookkeeping derived from the model geometry and the configured
    /// target; the frame rate and latent size always match the model.
    pub fn rate_spec(&self) -> Result<RateSpec> {
        let sr = self.model.sample_rate_hz as f64;
        let spec = match (self.target_kl_nats, self.target_bitrate_bps) {
            (Some(kl), None) => {
                RateSpec::from_target_kl(sr, self.model.hop, self.model.latent_dim, kl)?
            }
            (None, Some(bps)) => {
                RateSpec::from_target_bitrate(sr, self.model.hop, self.model.latent_dim, bps)?
            }
            (Some(kl), Some(bps)) => {
                let spec =
                    RateSpec::from_target_kl(sr, self.model.hop, self.model.latent_dim, kl)?;
                let rel = (spec.target_bitrate_bps - bps).abs() / bps.abs().max(1e-300);
                if rel > 1e-9 {
                    return Err(Error::invalid(format!(
                        "target_kl_nats {kl} and target_bitrate_bps {bps} disagree"
                    )));
                }
                spec
            }
            (None, None) => {
                RateSpec::from_target_kl(sr, self.model.hop, self.model.latent_dim, 0.0)?
            }
        };
        Ok(spec)
    }
}

/// One metrics emission; rows serialize as JSON lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub total: f64,
    pub recon: f64,
    pub rate: f64,
    pub adv: f64,
    pub measured_kl_per_frame: f64,
    pub measured_bitrate_bps: f64,
    pub mel_distance: f64,
    pub components: BTreeMap<String, f64>,
}

const KL_EMA_DECAY: f64 = 0.99;

pub struct Trainer {
    pub cfg: TrainConfig,
    pub rate_spec: RateSpec,
    pub model: AudioModel,
    pub bottleneck: Bottleneck,
    pub dataset: Arc<Dataset>,
    recon: ReconLoss,
    disc: Option<Discriminator>,
    opt: AdamW,
    disc_opt: Option<AdamW>,
    step: u64,
    kl_ema: Option<f64>,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
    ref_cache: Vec<Option<Arc<RefSpectra>>>,
    mel_cache: Vec<Option<Arc<Vec<f32>>>>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = Arc::new(Dataset::build(
            &cfg.dataset,
            cfg.model.sample_rate_hz,
            cfg.model.hop,
        )?);
        Self::with_dataset(cfg, dataset)
    }

    /// Shares an already-built dataset (sweeps reuse one corpus across
    /// points).
    pub fn with_dataset(cfg: TrainConfig, dataset: Arc<Dataset>) -> Result<Self> {
        cfg.validate()?;
        if dataset.train_idx.len() < cfg.batch_size {
            return Err(Error::invalid(format!(
                "batch_size {} exceeds train split of {}",
                cfg.batch_size,
                dataset.train_idx.len()
            )));
        }
        let rate_spec = cfg.rate_spec()?;
        let model = AudioModel::new(cfg.model.clone(), cfg.bottleneck.feature_channels())?;
        debug_assert!((model.config.frame_rate_hz() - rate_spec.frame_rate_hz).abs() < 1e-9);
        let bottleneck = Bottleneck::new(cfg.bottleneck.clone())?;
        let recon = ReconLoss::new(cfg.model.sample_rate_hz as f64);
        let disc = (cfg.weights.adv_weight > 0.0)
            .then(|| Discriminator::new(&[512, 128], 16, cfg.seed));
        let opt = AdamW::new(&model.store, cfg.lr as f32, cfg.weight_decay as f32);
        let disc_opt = disc
            .as_ref()
            .map(|d| AdamW::new(&d.store, cfg.lr as f32, cfg.weight_decay as f32));
        let n_items = dataset.items.len();
        Ok(Self {
            cfg,
            rate_spec,
            model,
            bottleneck,
            dataset,
            recon,
            disc,
            opt,
            disc_opt,
            step: 0,
            kl_ema: None,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
            ref_cache: vec![None; n_items],
            mel_cache: vec![None; n_items],
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn measured_kl_ema(&self) -> Option<f64> {
        self.kl_ema
    }

    fn next_indices(&mut self) -> Vec<usize> {
        let bs = self.cfg.batch_size;
        if self.order.is_empty() || self.cursor + bs > self.order.len() {
            let mut order = self.dataset.train_idx.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                self.cfg.seed ^ 0x6461_7461_0000_0000,
                self.epoch,
            ));
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            self.order = order;
            self.cursor = 0;
            self.epoch += 1;
        }
        let out = self.order[self.cursor..self.cursor + bs].to_vec();
        self.cursor += bs;
        out
    }

    fn batch_from(&self, indices: &[usize]) -> Result<AudioBatch> {
        let items: Vec<&crate::data::AudioItem> =
            indices.iter().map(|&i| &self.dataset.items[i]).collect();
        AudioBatch::from_items(&items, self.dataset.sample_rate_hz)
    }

    fn cached_refs(&mut self, indices: &[usize]) -> Vec<Arc<RefSpectra>> {
        indices
            .iter()
            .map(|&i| {
                if self.ref_cache[i].is_none() {
                    let spectra = self.recon.reference_spectra(&self.dataset.items[i].samples);
                    self.ref_cache[i] = Some(Arc::new(spectra));
                }
                Arc::clone(self.ref_cache[i].as_ref().unwrap())
            })
            .collect()
    }

    fn cached_mel(&mut self, indices: &[usize], batch: &AudioBatch) -> Vec<f32> {
        let mut out = Vec::new();
        for (pos, &i) in indices.iter().enumerate() {
            if self.mel_cache[i].is_none() {
                let mel = self.model.mel_features_item(batch.item(pos));
                self.mel_cache[i] = Some(Arc::new(mel));
            }
            out.extend_from_slice(self.mel_cache[i].as_ref().unwrap());
        }
        out
    }

    /// One optimizer step. Returns the loss report for the step.
    pub fn train_step(&mut self) -> Result<LossReport> {
        let indices = self.next_indices();
        let batch = self.batch_from(&indices)?;
        let passthrough = self.cfg.force_passthrough.unwrap_or_else(|| {
            choose_passthrough(self.step, self.cfg.bottleneck.passthrough_prob, self.cfg.seed)
        });

        let mut tape = Tape::new();
        let mut bindings = Bindings::new();
        let features = self.model.encode(&mut tape, &mut bindings, &batch)?;
        let mel = self.cached_mel(&indices, &batch);
        let features = self
            .model
            .mel_projection_add(&mut tape, &mut bindings, features, &mel)?;

        let mut sample_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed ^ 0x7361_6d70_0000_0000, self.step));
        let bn_out = if passthrough {
            self.bottleneck.passthrough_forward(&mut tape, features)?
        } else {
            match self.cfg.bottleneck.kind {
                BottleneckKind::Gaussian => {
                    self.bottleneck
                        .gaussian_forward(&mut tape, features, true, &mut sample_rng)?
                }
                BottleneckKind::Vq => {
                    if !self.bottleneck.codebooks_initialized() {
                        let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(
                            self.cfg.seed ^ 0x7671_0000_0000_0000,
                            0,
                        ));
                        self.bottleneck.init_codebooks(&tape, features, &mut init_rng)?;
                    }
                    self.bottleneck
                        .vq_forward(&mut tape, features, true, &mut sample_rng)?
                }
            }
        };

        let y_hat = self.model.decode(&mut tape, &mut bindings, bn_out.z)?;

        let recon_node = if self.cfg.weights.recon_weight > 0.0 {
            let refs = self.cached_refs(&indices);
            let ref_views: Vec<&RefSpectra> = refs.iter().map(|a| a.as_ref()).collect();
            let parts = self.recon.forward_with_refs(
                &mut tape,
                y_hat,
                &ref_views,
                &batch.data,
                &self.cfg.weights,
            )?;
            parts.bundle
        } else {
            tape.constant(Shape::scalar(), vec![0.0])
        };

        let rate_node = if passthrough {
            None
        } else {
            let warmup = if self.cfg.rate_warmup_steps > 0 {
                ((self.step + 1) as f32 / self.cfg.rate_warmup_steps as f32).min(1.0)
            } else {
                1.0
            };
            let lambda = self.cfg.bottleneck.lambda_weight as f32 * warmup;
            match (self.cfg.bottleneck.rate_loss, &bn_out.kl_mean_node, &bn_out.per_dim_kl_node) {
                (RateLossKind::TargetKl, Some(kl_mean), _) => {
                    let node = target_kl_node(&mut tape, *kl_mean, &self.rate_spec);
                    Some(tape.scale(node, lambda))
                }
                (RateLossKind::FreeBits, _, Some(per_dim)) => {
                    let node =
                        free_bits_node(&mut tape, *per_dim, self.cfg.bottleneck.free_bits_lambda);
                    Some(tape.scale(node, lambda))
                }
                _ => None,
            }
        };

        let adv_parts = match &self.disc {
            Some(disc) if self.cfg.weights.adv_weight > 0.0 => {
                let real = tape.constant(Shape::new(batch.batch, 1, batch.samples), batch.data.clone());
                Some(disc.generator_losses(&mut tape, real, y_hat))
            }
            _ => None,
        };

        let extras: Vec<(&str, NodeId, f64)> = bn_out
            .aux_losses
            .iter()
            .map(|(name, node)| {
                let weight = if name == "vq_commitment" {
                    self.cfg.bottleneck.commitment_weight
                } else {
                    0.0
                };
                (name.as_str(), *node, weight)
            })
            .collect();

        let mut report = objectives::total_objective(
            &mut tape,
            recon_node,
            rate_node,
            adv_parts,
            &extras,
            &self.cfg.weights,
        )?;
        report.rate_excluded = passthrough;
        report.measured_kl_per_frame = match (&bn_out.per_frame_kl, bn_out.constant_rate_nats) {
            (_, Some(rate)) => Some(rate),
            (Some(kls), None) => Some(kls.iter().sum::<f64>() / kls.len() as f64),
            _ => None,
        };

        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                snapshot: format!("{:?}", report.components),
            });
        }

        let grads = tape.backward(report.total_node);
        self.opt.step(&mut self.model.store, &tape, &grads, &bindings);

        if let (Some(disc), Some(disc_opt)) = (&mut self.disc, &mut self.disc_opt) {
            let mut dtape = Tape::new();
            let mut dbind = Bindings::new();
            let shape = Shape::new(batch.batch, 1, batch.samples);
            let real = dtape.constant(shape, batch.data.clone());
            let fake = dtape.constant(shape, tape.value(y_hat).to_vec());
            let dloss = disc.discriminator_loss(&mut dtape, &mut dbind, real, fake);
            let dgrads = dtape.backward(dloss);
            disc_opt.step(&mut disc.store, &dtape, &dgrads, &dbind);
            report
                .components
                .insert("disc".to_string(), dtape.scalar(dloss) as f64);
        }

        if self.cfg.bottleneck.kind == BottleneckKind::Gaussian && !passthrough {
            if let Some(v) = report.measured_kl_per_frame {
                self.kl_ema = Some(match self.kl_ema {
                    None => v,
                    Some(e) => KL_EMA_DECAY * e + (1.0 - KL_EMA_DECAY) * v,
                });
            }
        }

        self.step += 1;
        Ok(report)
    }

    /// Eval-mode reconstruction of a set of items (mean latent path; no
    /// sampling).
    pub fn reconstruct(&mut self, indices: &[usize]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(indices.len());
        for chunk in indices.chunks(self.cfg.batch_size.max(1)) {
            let batch = self.batch_from(chunk)?;
            let mut tape = Tape::new();
            let mut bindings = Bindings::new();
            let features = self.model.encode(&mut tape, &mut bindings, &batch)?;
            let mel = self.cached_mel(chunk, &batch);
            let features =
                self.model
                    .mel_projection_add(&mut tape, &mut bindings, features, &mel)?;
            let mut dummy_rng = ChaCha8Rng::seed_from_u64(0);
            let bn_out = match self.cfg.bottleneck.kind {
                BottleneckKind::Gaussian => {
                    self.bottleneck
                        .gaussian_forward(&mut tape, features, false, &mut dummy_rng)?
                }
                BottleneckKind::Vq => {
                    self.bottleneck
                        .vq_forward(&mut tape, features, false, &mut dummy_rng)?
                }
            };
            let y = self.model.decode(&mut tape, &mut bindings, bn_out.z)?;
            let ys = tape.shape(y);
            for i in 0..ys.b {
                out.push(tape.value(y)[i * ys.t..(i + 1) * ys.t].to_vec());
            }
        }
        Ok(out)
    }

    /// Eval-mode latents (`[D, frames]` per item, channel-major) with
    /// labels; the input for the diffusion probe.
    pub fn encode_latents(&mut self, indices: &[usize]) -> Result<crate::diffusion::LatentSet> {
        if indices.is_empty() {
            return Err(Error::invalid("no items to encode"));
        }
        let mut latents = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        let mut frames = 0usize;
        for chunk in indices.chunks(self.cfg.batch_size.max(1)) {
            let batch = self.batch_from(chunk)?;
            let mut tape = Tape::new();
            let mut bindings = Bindings::new();
            let features = self.model.encode(&mut tape, &mut bindings, &batch)?;
            let mel = self.cached_mel(chunk, &batch);
            let features =
                self.model
                    .mel_projection_add(&mut tape, &mut bindings, features, &mel)?;
            let mut dummy_rng = ChaCha8Rng::seed_from_u64(0);
            let bn_out = match self.cfg.bottleneck.kind {
                BottleneckKind::Gaussian => {
                    self.bottleneck
                        .gaussian_forward(&mut tape, features, false, &mut dummy_rng)?
                }
                BottleneckKind::Vq => {
                    self.bottleneck
                        .vq_forward(&mut tape, features, false, &mut dummy_rng)?
                }
            };
            let zs = tape.shape(bn_out.z);
            frames = zs.t;
            let per = zs.c * zs.t;
            for (i, &idx) in chunk.iter().enumerate() {
                latents.push(tape.value(bn_out.z)[i * per..(i + 1) * per].to_vec());
                labels.push(self.dataset.items[idx].label);
            }
        }
        Ok(crate::diffusion::LatentSet {
            latents,
            labels,
            latent_dim: self.cfg.model.latent_dim,
            frames,
            n_classes: self.dataset.n_classes,
        })
    }

    /// Mean per-frame KL over the eval split in eval mode, and its
    /// theoretical bitrate. VQ models report their structural rate exactly.
    pub fn measure_kl_bitrate(&mut self) -> Result<(f64, f64)> {
        if self.dataset.eval_idx.is_empty() {
            return Err(Error::invalid("empty eval set"));
        }
        if self.cfg.bottleneck.kind == BottleneckKind::Vq {
            let kl = self.cfg.bottleneck.num_codebooks as f64
                * (self.cfg.bottleneck.codebook_size as f64).ln();
            let bps = vq_bitrate(
                self.cfg.bottleneck.codebook_size,
                self.cfg.bottleneck.num_codebooks,
                self.rate_spec.frame_rate_hz,
            )?;
            return Ok((kl, bps));
        }
        let eval: Vec<usize> = self.dataset.eval_idx.clone();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for chunk in eval.chunks(self.cfg.batch_size.max(1)) {
            let batch = self.batch_from(chunk)?;
            let mut tape = Tape::new();
            let mut bindings = Bindings::new();
            let features = self.model.encode(&mut tape, &mut bindings, &batch)?;
            let mel = self.cached_mel(chunk, &batch);
            let features =
                self.model
                    .mel_projection_add(&mut tape, &mut bindings, features, &mel)?;
            let mut dummy_rng = ChaCha8Rng::seed_from_u64(0);
            let bn_out = self
                .bottleneck
                .gaussian_forward(&mut tape, features, false, &mut dummy_rng)?;
            let kls = bn_out.per_frame_kl.expect("gaussian eval always measures KL");
            total += kls.iter().sum::<f64>();
            count += kls.len();
        }
        let kl = total / count as f64;
        let bps = kl_to_bitrate(kl, self.rate_spec.frame_rate_hz)?;
        Ok((kl, bps))
    }

    /// Per-dimension expected KL over the eval split in eval mode
    /// (gaussian bottlenecks only).
    pub fn measure_per_dim_kl(&mut self) -> Result<Vec<f64>> {
        if self.cfg.bottleneck.kind != BottleneckKind::Gaussian {
            return Err(Error::precondition(
                "per-dimension KL applies to gaussian bottlenecks",
            ));
        }
        let eval: Vec<usize> = self.dataset.eval_idx.clone();
        if eval.is_empty() {
            return Err(Error::invalid("empty eval set"));
        }
        let d = self.cfg.model.latent_dim;
        let mut acc = vec![0.0f64; d];
        let mut total_frames = 0usize;
        for chunk in eval.chunks(self.cfg.batch_size.max(1)) {
            let batch = self.batch_from(chunk)?;
            let frames = batch.samples / self.cfg.model.hop * batch.batch;
            let mut tape = Tape::new();
            let mut bindings = Bindings::new();
            let features = self.model.encode(&mut tape, &mut bindings, &batch)?;
            let mel = self.cached_mel(chunk, &batch);
            let features =
                self.model
                    .mel_projection_add(&mut tape, &mut bindings, features, &mel)?;
            let mut dummy_rng = ChaCha8Rng::seed_from_u64(0);
            let bn_out = self
                .bottleneck
                .gaussian_forward(&mut tape, features, false, &mut dummy_rng)?;
            let per_dim = bn_out.per_dim_kl.expect("gaussian eval measures per-dim KL");
            for (a, v) in acc.iter_mut().zip(&per_dim) {
                *a += v * frames as f64;
            }
            total_frames += frames;
        }
        for a in &mut acc {
            *a /= total_frames as f64;
        }
        Ok(acc)
    }

    /// Mean mel distance between eval items and their eval-mode
    /// reconstructions.
    pub fn eval_mel_distance(&mut self) -> Result<f64> {
        let eval: Vec<usize> = self.dataset.eval_idx.clone();
        if eval.is_empty() {
            return Err(Error::invalid("empty eval set"));
        }
        let recons = self.reconstruct(&eval)?;
        let sr = self.cfg.model.sample_rate_hz as f64;
        let mut total = 0.0;
        for (&idx, recon) in eval.iter().zip(&recons) {
            total += mel_distance(&self.dataset.items[idx].samples, recon, sr, &DEFAULT_MEL_SCALES)?;
        }
        Ok(total / eval.len() as f64)
    }

    /// Builds the metrics row for the current state given the most recent
    /// step's loss report.
    pub fn metrics_row(&mut self, report: &LossReport) -> Result<MetricsRow> {
        let (kl, bps) = match self.cfg.bottleneck.kind {
            BottleneckKind::Vq => self.measure_kl_bitrate()?,
            BottleneckKind::Gaussian => {
                let kl = self.kl_ema.unwrap_or(0.0);
                (kl, kl_to_bitrate(kl, self.rate_spec.frame_rate_hz)?)
            }
        };
        Ok(MetricsRow {
            step: self.step,
            total: report.total,
            recon: report.recon,
            rate: report.rate,
            adv: report.adv,
            measured_kl_per_frame: kl,
            measured_bitrate_bps: bps,
            mel_distance: self.eval_mel_distance()?,
            components: report.components.clone(),
        })
    }

    /// Runs to `cfg.steps`, appending metrics rows every `eval_every` steps
    /// (and at the final step). When `out_dir` is set, rows stream to
    /// `metrics.jsonl` and the final state lands in `checkpoint.rbck`.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        let mut metrics_file = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(std::fs::File::create(dir.join("metrics.jsonl"))?)
            }
            None => None,
        };
        while self.step < self.cfg.steps {
            let report = self.train_step()?;
            if self.step.is_multiple_of(self.cfg.eval_every) || self.step == self.cfg.steps {
                let row = self.metrics_row(&report)?;
                if let Some(f) = metrics_file.as_mut() {
                    let line = serde_json::to_string(&row)
                        .map_err(|e| Error::invalid(format!("metrics serialization: {e}")))?;
                    writeln!(f, "{line}")?;
                    f.flush()?;
                }
                rows.push(row);
            }
        }
        if let Some(dir) = out_dir {
            self.save_checkpoint(&dir.join("checkpoint.rbck"))?;
        }
        Ok(rows)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = self
            .model
            .store
            .iter()
            .map(|(_, p)| {
                (
                    p.name.clone(),
                    vec![p.shape.b, p.shape.c, p.shape.t],
                    p.data.clone(),
                )
            })
            .collect();
        if let Some(disc) = &self.disc {
            tensors.extend(disc.store.iter().map(|(_, p)| {
                (
                    p.name.clone(),
                    vec![p.shape.b, p.shape.c, p.shape.t],
                    p.data.clone(),
                )
            }));
        }
        if let Some(books) = self.bottleneck.export_codebooks() {
            let k = self.cfg.bottleneck.codebook_size;
            let d = self.cfg.bottleneck.latent_dim;
            for (i, (vectors, cluster, embed)) in books.into_iter().enumerate() {
                tensors.push((format!("vq.l{i}.vectors"), vec![k, d], vectors));
                tensors.push((format!("vq.l{i}.cluster"), vec![k], cluster));
                tensors.push((format!("vq.l{i}.embed_sum"), vec![k, d], embed));
            }
        }
        let mut extra = BTreeMap::new();
        if let Some(ema) = self.kl_ema {
            extra.insert("kl_ema".to_string(), ema);
        }
        let config = serde_json::to_value(&self.cfg)
            .map_err(|e| Error::invalid(format!("unserializable config: {e}")))?;
        checkpoint::save(
            path,
            &Checkpoint {
                kind: "vae".to_string(),
                config,
                step: self.step,
                extra,
                tensors,
            },
        )
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        if ckpt.kind != "vae" {
            return Err(Error::CorruptCheckpoint(format!(
                "expected a vae checkpoint, found kind {}",
                ckpt.kind
            )));
        }
        let cfg: TrainConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("unreadable config: {e}")))?;
        let mut trainer = Trainer::new(cfg)?;
        trainer.restore_from(&ckpt)?;
        Ok(trainer)
    }

    /// Test hook: overwrites a named parameter tensor.
    pub fn set_param(&mut self, name: &str, value: f32) -> Result<()> {
        let id = self
            .model
            .store
            .lookup(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))?;
        self.model.store.get_mut(id).data.fill(value);
        Ok(())
    }

    /// Applies checkpoint tensors and counters to this trainer.
    pub fn restore_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (name, shape, data) in &ckpt.tensors {
            if name.starts_with("vq.") {
                continue;
            }
            let store = if name.starts_with("disc.") {
                match &mut self.disc {
                    Some(d) => &mut d.store,
                    None => {
                        return Err(Error::CorruptCheckpoint(format!(
                            "checkpoint has discriminator tensor {name} but the config disables it"
                        )))
                    }
                }
            } else {
                &mut self.model.store
            };
            let id = store.lookup(name).ok_or_else(|| {
                Error::CorruptCheckpoint(format!("tensor {name} unknown to this config"))
            })?;
            let param = store.get_mut(id);
            let want = vec![param.shape.b, param.shape.c, param.shape.t];
            if *shape != want || data.len() != param.data.len() {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor {name} shape mismatch"
                )));
            }
            param.data.copy_from_slice(data);
        }
        if self.cfg.bottleneck.kind == BottleneckKind::Vq {
            let mut books = Vec::new();
            for i in 0..self.cfg.bottleneck.num_codebooks {
                let v = ckpt
                    .tensor(&format!("vq.l{i}.vectors"))
                    .ok_or_else(|| Error::CorruptCheckpoint(format!("missing vq level {i}")))?;
                let c = ckpt
                    .tensor(&format!("vq.l{i}.cluster"))
                    .ok_or_else(|| Error::CorruptCheckpoint(format!("missing vq level {i}")))?;
                let e = ckpt
                    .tensor(&format!("vq.l{i}.embed_sum"))
                    .ok_or_else(|| Error::CorruptCheckpoint(format!("missing vq level {i}")))?;
                books.push((v.2.clone(), c.2.clone(), e.2.clone()));
            }
            self.bottleneck.import_codebooks(books)?;
        }
        self.step = ckpt.step;
        self.kl_ema = ckpt.extra.get("kl_ema").copied();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small, fast config for loop-behavior tests.
    fn tiny(steps: u64, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.model.encoder_channels = vec![4, 8, 12, 16];
        cfg.model.latent_dim = 8;
        cfg.bottleneck.latent_dim = 8;
        cfg.dataset.n_items = 8;
        cfg.dataset.segment_s = 0.25;
        cfg.batch_size = 2;
        cfg.steps = steps;
        cfg.eval_every = steps;
        cfg.seed = seed;
        cfg.target_kl_nats = Some(10.0);
        cfg
    }

    #[test]
    fn identical_seeds_give_bit_identical_metrics() {
        let run = || -> Vec<String> {
            let mut tr = Trainer::new(tiny(24, 5)).unwrap();
            let mut rows = Vec::new();
            for _ in 0..24 {
                let rep = tr.train_step().unwrap();
                if tr.step_count() % 8 == 0 {
                    let row = tr.metrics_row(&rep).unwrap();
                    rows.push(serde_json::to_string(&row).unwrap());
                }
            }
            rows
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);

        let mut other = Trainer::new(tiny(24, 6)).unwrap();
        let mut differs = false;
        for _ in 0..24 {
            let rep = other.train_step().unwrap();
            if other.step_count() % 8 == 0 {
                let row = other.metrics_row(&rep).unwrap();
                differs |= !a.contains(&serde_json::to_string(&row).unwrap());
            }
        }
        assert!(differs, "different seed should change the stream");
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged() {
        let mut cfg = tiny(3, 1);
        cfg.lr = 0.0;
        cfg.weight_decay = 0.0;
        let mut tr = Trainer::new(cfg).unwrap();
        let before: Vec<Vec<f32>> = tr.model.store.iter().map(|(_, p)| p.data.clone()).collect();
        for _ in 0..3 {
            tr.train_step().unwrap();
        }
        let after: Vec<Vec<f32>> = tr.model.store.iter().map(|(_, p)| p.data.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn rate_loss_alone_drives_kl_toward_target_from_both_sides() {
        // From below: start near zero KL, aim at 60.
        let mut cfg = tiny(160, 2);
        cfg.weights.recon_weight = 0.0;
        cfg.weights.rate_weight = 10.0;
        cfg.bottleneck.passthrough_prob = 0.0;
        cfg.lr = 1e-3;
        cfg.target_kl_nats = Some(60.0);
        let mut tr = Trainer::new(cfg).unwrap();
        let mut first = None;
        for _ in 0..160 {
            let rep = tr.train_step().unwrap();
            if first.is_none() {
                first = rep.measured_kl_per_frame;
            }
        }
        let start = first.unwrap();
        let (end, _) = tr.measure_kl_bitrate().unwrap();
        assert!(start < 10.0, "fresh model should start near the prior, got {start}");
        assert!(
            (end - 60.0).abs() < (start - 60.0).abs() * 0.5,
            "KL did not move toward 60: {start} -> {end}"
        );

        // From above: retarget the same (now high-KL) weights at 5.
        let mut cfg2 = tiny(160, 2);
        cfg2.weights.recon_weight = 0.0;
        cfg2.weights.rate_weight = 10.0;
        cfg2.bottleneck.passthrough_prob = 0.0;
        cfg2.lr = 1e-3;
        cfg2.target_kl_nats = Some(5.0);
        let mut tr2 = Trainer::with_dataset(cfg2, Arc::clone(&tr.dataset)).unwrap();
        let snapshot: Vec<(String, Vec<f32>)> = tr
            .model
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.data.clone()))
            .collect();
        for (name, data) in snapshot {
            let id = tr2.model.store.lookup(&name).unwrap();
            tr2.model.store.get_mut(id).data = data;
        }
        let (start2, _) = tr2.measure_kl_bitrate().unwrap();
        for _ in 0..160 {
            tr2.train_step().unwrap();
        }
        let (end2, _) = tr2.measure_kl_bitrate().unwrap();
        assert!(start2 > 20.0, "carried-over KL should start high, got {start2}");
        assert!(
            (end2 - 5.0).abs() < (start2 - 5.0).abs() * 0.5,
            "KL did not move toward 5: {start2} -> {end2}"
        );
    }

    #[test]
    fn passthrough_exclusion_is_bit_exact() {
        // A run with passthrough_prob > 0 but all draws forced false must
        // produce the same KL stream as passthrough_prob = 0.
        let run = |prob: f64, force: Option<bool>| -> Vec<u64> {
            let mut cfg = tiny(16, 9);
            cfg.bottleneck.passthrough_prob = prob;
            cfg.force_passthrough = force;
            let mut tr = Trainer::new(cfg).unwrap();
            let mut kls = Vec::new();
            for _ in 0..16 {
                let rep = tr.train_step().unwrap();
                kls.push(rep.measured_kl_per_frame.unwrap_or(-1.0).to_bits());
                kls.push(tr.measured_kl_ema().unwrap_or(-1.0).to_bits());
            }
            kls
        };
        let baseline = run(0.0, None);
        let forced = run(0.5, Some(false));
        assert_eq!(baseline, forced);

        // With passthrough_prob = 1 training degenerates to a pure
        // autoencoder: across 100 steps the rate term never appears and the
        // KL accumulator stays empty.
        let mut cfg = tiny(100, 9);
        cfg.bottleneck.passthrough_prob = 1.0;
        let mut tr = Trainer::new(cfg).unwrap();
        let mut rate_sum = 0.0;
        for _ in 0..100 {
            let rep = tr.train_step().unwrap();
            assert!(rep.rate_excluded);
            assert!(rep.measured_kl_per_frame.is_none());
            rate_sum += rep.rate;
        }
        assert_eq!(rate_sum, 0.0);
        assert!(tr.measured_kl_ema().is_none());
    }

    #[test]
    fn checkpoint_round_trip_preserves_eval() {
        let dir = std::env::temp_dir().join("ratebench_trainer_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trainer.rbck");
        let mut tr = Trainer::new(tiny(10, 3)).unwrap();
        for _ in 0..10 {
            tr.train_step().unwrap();
        }
        let mel_before = tr.eval_mel_distance().unwrap();
        let (kl_before, bps_before) = tr.measure_kl_bitrate().unwrap();
        tr.save_checkpoint(&path).unwrap();

        let mut back = Trainer::load_checkpoint(&path).unwrap();
        assert_eq!(back.step_count(), 10);
        let mel_after = back.eval_mel_distance().unwrap();
        let (kl_after, bps_after) = back.measure_kl_bitrate().unwrap();
        assert_eq!(mel_before.to_bits(), mel_after.to_bits());
        assert_eq!(kl_before.to_bits(), kl_after.to_bits());
        assert_eq!(bps_before.to_bits(), bps_after.to_bits());

        // Rate math invariant holds exactly.
        let expect = kl_to_bitrate(kl_after, back.rate_spec.frame_rate_hz).unwrap();
        assert_eq!(bps_after.to_bits(), expect.to_bits());
    }

    #[test]
    fn zeroed_encoder_head_measures_zero_kl() {
        let mut tr = Trainer::new(tiny(1, 4)).unwrap();
        tr.set_param("enc.out.w", 0.0).unwrap();
        tr.set_param("enc.out.b", 0.0).unwrap();
        tr.set_param("mel_proj.w", 0.0).unwrap();
        tr.set_param("mel_proj.b", 0.0).unwrap();
        let (kl, bps) = tr.measure_kl_bitrate().unwrap();
        assert_eq!(kl, 0.0);
        assert_eq!(bps, 0.0);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let mut tr = Trainer::new(tiny(1, 7)).unwrap();
        tr.set_param("dec.out.w", f32::NAN).unwrap();
        match tr.train_step() {
            Err(Error::NonFiniteLoss { step: 0, .. }) => {}
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("expected a non-finite loss error"),
        }
    }

    #[test]
    fn config_validation_cases() {
        let mut cfg = tiny(10, 0);
        cfg.bottleneck.latent_dim = 4;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny(10, 0);
        cfg.target_kl_nats = None;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny(10, 0);
        cfg.target_kl_nats = Some(20.0);
        cfg.target_bitrate_bps = Some(1e6);
        assert!(cfg.validate().is_err());

        // Consistent pair is accepted.
        let mut cfg = tiny(10, 0);
        let spec = cfg.rate_spec().unwrap();
        cfg.target_bitrate_bps = Some(spec.target_bitrate_bps);
        assert!(cfg.validate().is_ok());
    }
}
