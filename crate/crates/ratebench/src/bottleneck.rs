//! Swappable information bottlenecks between encoder and decoder.
//!
//! * `gaussian`: reparameterized diagonal Gaussian; the differentiable
//!   per-frame KL (and its per-dimension breakdown) come back as tape nodes
//!   so the objective can attach a target-KL or free-bits rate term.
//! * `passthrough`: the mean path with no sampling and no rate accounting;
//!   used for a fraction of training batches as a pure autoencoder.
//! * `vq`: residual vector quantization with straight-through gradients and
//!   EMA codebook learning; its rate is the constant `num_codebooks * ln K`
//!   per frame.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use ratebench_core::rng::{mix_seed, SplitMix64};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Shape, Tape};

/// log-variance clamp applied before sampling and KL; prevents exp overflow
/// and degenerate zero-variance posteriors.
pub const LOG_VAR_MIN: f32 = -30.0;
pub const LOG_VAR_MAX: f32 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottleneckKind {
    Gaussian,
    Vq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateLossKind {
    TargetKl,
    FreeBits,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BottleneckConfig {
    pub kind: BottleneckKind,
    pub latent_dim: usize,
    pub rate_loss: RateLossKind,
    /// Weight on the rate term; multiplied with `LossWeights::rate_weight`
    /// to form the effective lambda.
    pub lambda_weight: f64,
    /// Fraction of training batches run as a pure autoencoder.
    pub passthrough_prob: f64,
    /// Per-dimension KL floor (nats) when `rate_loss == free_bits`.
    pub free_bits_lambda: f64,
    pub codebook_size: usize,
    pub num_codebooks: usize,
    pub commitment_weight: f64,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        Self {
            kind: BottleneckKind::Gaussian,
            latent_dim: 16,
            rate_loss: RateLossKind::TargetKl,
            lambda_weight: 1.0,
            passthrough_prob: 0.25,
            free_bits_lambda: 0.5,
            codebook_size: 256,
            num_codebooks: 2,
            commitment_weight: 0.25,
        }
    }
}

impl BottleneckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.passthrough_prob) {
            return Err(Error::invalid("passthrough_prob must lie in [0, 1]"));
        }
        if self.kind == BottleneckKind::Vq {
            if self.rate_loss != RateLossKind::None {
                return Err(Error::invalid(
                    "vq bottlenecks have a structural rate; rate_loss must be none",
                ));
            }
            if self.codebook_size < 2 {
                return Err(Error::invalid("codebook_size must be >= 2"));
            }
            if self.num_codebooks < 1 {
                return Err(Error::invalid("num_codebooks must be >= 1"));
            }
        }
        if self.lambda_weight < 0.0 || self.free_bits_lambda < 0.0 || self.commitment_weight < 0.0
        {
            return Err(Error::invalid("bottleneck weights must be >= 0"));
        }
        Ok(())
    }

    /// Encoder output channels this bottleneck consumes.
    pub fn feature_channels(&self) -> usize {
        match self.kind {
            BottleneckKind::Gaussian => 2 * self.latent_dim,
            BottleneckKind::Vq => self.latent_dim,
        }
    }
}

/// Per-batch Bernoulli passthrough decision; stateless in (seed,
/// batch_index) so forcing or replaying decisions never perturbs other
/// random streams.
pub fn choose_passthrough(batch_index: u64, passthrough_prob: f64, seed: u64) -> bool {
    if passthrough_prob <= 0.0 {
        return false;
    }
    if passthrough_prob >= 1.0 {
        return true;
    }
    let mut s = SplitMix64::new(mix_seed(seed ^ 0x7061_7373_7468_7275, batch_index));
    s.next_f64() < passthrough_prob
}

/// What the bottleneck feeds forward, plus its rate bookkeeping.
pub struct BottleneckResult {
    /// Latent handed to the decoder, `[B, D, frames]`.
    pub z: NodeId,
    pub was_passthrough: bool,
    /// Measured per-frame KL in nats (closed form, f64), one entry per
    /// (batch, frame). `None` for passthrough batches -- excluded from rate
    /// statistics, not zero.
    pub per_frame_kl: Option<Vec<f64>>,
    /// Differentiable batch-mean per-frame KL (scalar node).
    pub kl_mean_node: Option<NodeId>,
    /// Differentiable per-dimension expected KL, `[1, D, 1]`.
    pub per_dim_kl_node: Option<NodeId>,
    /// Measured per-dimension expected KL (f64), gaussian only.
    pub per_dim_kl: Option<Vec<f64>>,
    /// Named auxiliary losses (VQ commitment/codebook terms).
    pub aux_losses: BTreeMap<String, NodeId>,
    /// Structural per-frame rate for VQ (`num_codebooks * ln K`).
    pub constant_rate_nats: Option<f64>,
}

/// (vectors, cluster sizes, embedding sums) of one residual level.
pub type CodebookState = (Vec<f32>, Vec<f32>, Vec<f32>);

struct Codebook {
    /// `[K, D]` code vectors.
    vectors: Vec<f32>,
    /// EMA cluster masses and vector sums.
    cluster_size: Vec<f32>,
    embed_sum: Vec<f32>,
}

pub struct Bottleneck {
    pub config: BottleneckConfig,
    codebooks: Option<Vec<Codebook>>,
    ema_decay: f32,
}

impl Bottleneck {
    pub fn new(config: BottleneckConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            codebooks: None,
            ema_decay: 0.99,
        })
    }

    pub fn codebooks_initialized(&self) -> bool {
        self.codebooks.is_some()
    }

    fn check_feature_shape(&self, tape: &Tape, features: NodeId) -> Result<Shape> {
        let s = tape.shape(features);
        let want = self.config.feature_channels();
        if s.c != want {
            return Err(Error::invalid(format!(
                "bottleneck expects {want} feature channels, got {}",
                s.c
            )));
        }
        Ok(s)
    }

    /// Reparameterized Gaussian forward. In training mode `z = mu + sigma *
    /// eps` with seeded noise; in eval mode `z = mu`. KL is computed from
    /// the clamped log-variance both on the tape (for the rate loss) and in
    /// f64 (for measurement).
    pub fn gaussian_forward(
        &self,
        tape: &mut Tape,
        features: NodeId,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<BottleneckResult> {
        if self.config.kind != BottleneckKind::Gaussian {
            return Err(Error::precondition("not a gaussian bottleneck"));
        }
        let s = self.check_feature_shape(tape, features)?;
        let d = self.config.latent_dim;
        let mu = tape.slice_chans(features, 0, d);
        let lv_raw = tape.slice_chans(features, d, d);
        let lv = tape.clamp(lv_raw, LOG_VAR_MIN, LOG_VAR_MAX);

        let z = if training {
            let half = tape.scale(lv, 0.5);
            let sigma = tape.exp(half);
            let eps_data: Vec<f32> = (0..s.b * d * s.t)
                .map(|_| rng.sample::<f32, _>(StandardNormal))
                .collect();
            let eps = tape.constant(Shape::new(s.b, d, s.t), eps_data);
            let noise = tape.mul(sigma, eps);
            tape.add(mu, noise)
        } else {
            mu
        };

        // 2 KL = sum_j exp(lv) + mu^2 - 1 - lv
        let var = tape.exp(lv);
        let sq = tape.square(mu);
        let sum = tape.add(var, sq);
        let sum = tape.add_scalar(sum, -1.0);
        let term = tape.sub(sum, lv);
        let kl_chan = tape.sum_chans(term);
        let kl_per_frame = tape.scale(kl_chan, 0.5);
        let kl_mean = tape.mean_all(kl_per_frame);
        let per_dim = tape.mean_batch_time(term);
        let per_dim = tape.scale(per_dim, 0.5);

        let measured = measured_per_frame_kl(tape.value(mu), tape.value(lv), s.b, d, s.t)?;
        let per_dim_measured = measured_per_dim_kl(tape.value(mu), tape.value(lv), s.b, d, s.t);

        Ok(BottleneckResult {
            z,
            was_passthrough: false,
            per_frame_kl: Some(measured),
            kl_mean_node: Some(kl_mean),
            per_dim_kl_node: Some(per_dim),
            per_dim_kl: Some(per_dim_measured),
            aux_losses: BTreeMap::new(),
            constant_rate_nats: None,
        })
    }

    /// Pure-autoencoder path: the mean slice goes straight to the decoder;
    /// no sampling, no rate accounting for this batch.
    pub fn passthrough_forward(&self, tape: &mut Tape, features: NodeId) -> Result<BottleneckResult> {
        self.check_feature_shape(tape, features)?;
        let z = tape.slice_chans(features, 0, self.config.latent_dim);
        Ok(BottleneckResult {
            z,
            was_passthrough: true,
            per_frame_kl: None,
            kl_mean_node: None,
            per_dim_kl_node: None,
            per_dim_kl: None,
            aux_losses: BTreeMap::new(),
            constant_rate_nats: None,
        })
    }

    /// Seeds codebooks from encoder features (random frames per residual
    /// level). Must run once before `vq_forward`.
    pub fn init_codebooks(&mut self, tape: &Tape, features: NodeId, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.config.kind != BottleneckKind::Vq {
            return Err(Error::precondition("not a vq bottleneck"));
        }
        let s = self.check_feature_shape(tape, features)?;
        let d = self.config.latent_dim;
        let k = self.config.codebook_size;
        let frames = collect_frames(tape.value(features), s.b, d, s.t);
        let n_frames = s.b * s.t;
        let mut books = Vec::with_capacity(self.config.num_codebooks);
        let mut residual = frames;
        for _ in 0..self.config.num_codebooks {
            let mut vectors = Vec::with_capacity(k * d);
            for _ in 0..k {
                let f = rng.random_range(0..n_frames);
                for j in 0..d {
                    let jitter: f32 = rng.sample::<f32, _>(StandardNormal);
                    vectors.push(residual[f * d + j] + 1e-3 * jitter);
                }
            }
            let book = Codebook {
                vectors,
                cluster_size: vec![1.0; k],
                embed_sum: Vec::new(),
            };
            let book = Codebook {
                embed_sum: book.vectors.clone(),
                ..book
            };
            // Advance the residual for the next level.
            for f in 0..n_frames {
                let idx = nearest_code(&book.vectors, &residual[f * d..(f + 1) * d], k, d);
                for j in 0..d {
                    residual[f * d + j] -= book.vectors[idx * d + j];
                }
            }
            books.push(book);
        }
        self.codebooks = Some(books);
        Ok(())
    }

    /// Residual VQ forward with straight-through gradients. In training
    /// mode the codebooks take an EMA update from this batch and dead codes
    /// are reseeded from batch features.
    pub fn vq_forward(
        &mut self,
        tape: &mut Tape,
        features: NodeId,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<BottleneckResult> {
        if self.config.kind != BottleneckKind::Vq {
            return Err(Error::precondition("not a vq bottleneck"));
        }
        let s = self.check_feature_shape(tape, features)?;
        let d = self.config.latent_dim;
        let k = self.config.codebook_size;
        let n_levels = self.config.num_codebooks;
        if self.codebooks.is_none() {
            return Err(Error::precondition(
                "vq codebooks are uninitialized; call init_codebooks first",
            ));
        }

        let frames = collect_frames(tape.value(features), s.b, d, s.t);
        let n_frames = s.b * s.t;
        let mut residual = frames.clone();
        let mut quantized = vec![0.0f32; n_frames * d];
        let mut assignments: Vec<Vec<usize>> = Vec::with_capacity(n_levels);
        {
            let books = self.codebooks.as_ref().unwrap();
            for book in books.iter() {
                let mut level_idx = Vec::with_capacity(n_frames);
                for f in 0..n_frames {
                    let r = &residual[f * d..(f + 1) * d];
                    let idx = nearest_code(&book.vectors, r, k, d);
                    level_idx.push(idx);
                    for j in 0..d {
                        quantized[f * d + j] += book.vectors[idx * d + j];
                        residual[f * d + j] -= book.vectors[idx * d + j];
                    }
                }
                assignments.push(level_idx);
            }
        }

        if training {
            self.ema_update(&frames, &assignments, n_frames, rng);
        }

        // Back to [B, D, T] layout for the decoder.
        let mut z_data = vec![0.0f32; n_frames * d];
        for b in 0..s.b {
            for j in 0..d {
                for t in 0..s.t {
                    z_data[(b * d + j) * s.t + t] = quantized[(b * s.t + t) * d + j];
                }
            }
        }
        let z = tape.straight_through(features, z_data.clone());
        let z_const = tape.constant(Shape::new(s.b, d, s.t), z_data);
        let commitment = tape.mse(features, z_const);
        // With EMA learning the codebook term is tracked as a metric only.
        let codebook_term = tape.constant(Shape::scalar(), vec![tape.scalar(commitment)]);
        let mut aux = BTreeMap::new();
        aux.insert("vq_commitment".to_string(), commitment);
        aux.insert("vq_codebook".to_string(), codebook_term);

        let rate = n_levels as f64 * (k as f64).ln();
        Ok(BottleneckResult {
            z,
            was_passthrough: false,
            per_frame_kl: Some(vec![rate; n_frames]),
            kl_mean_node: None,
            per_dim_kl_node: None,
            per_dim_kl: None,
            aux_losses: aux,
            constant_rate_nats: Some(rate),
        })
    }

    fn ema_update(
        &mut self,
        frames: &[f32],
        assignments: &[Vec<usize>],
        n_frames: usize,
        rng: &mut ChaCha8Rng,
    ) {
        let d = self.config.latent_dim;
        let k = self.config.codebook_size;
        let decay = self.ema_decay;
        let books = self.codebooks.as_mut().unwrap();
        // Rebuild the per-level residual inputs while updating.
        let mut residual = frames.to_vec();
        for (level, book) in books.iter_mut().enumerate() {
            let idx = &assignments[level];
            let mut counts = vec![0.0f32; k];
            let mut sums = vec![0.0f32; k * d];
            for f in 0..n_frames {
                let code = idx[f];
                counts[code] += 1.0;
                for j in 0..d {
                    sums[code * d + j] += residual[f * d + j];
                }
            }
            for c in 0..k {
                book.cluster_size[c] = decay * book.cluster_size[c] + (1.0 - decay) * counts[c];
                for j in 0..d {
                    book.embed_sum[c * d + j] =
                        decay * book.embed_sum[c * d + j] + (1.0 - decay) * sums[c * d + j];
                }
            }
            let total: f32 = book.cluster_size.iter().sum();
            for c in 0..k {
                // Laplace-smoothed mass keeps the division stable.
                let mass = (book.cluster_size[c] + 1e-5) / (total + k as f32 * 1e-5) * total;
                for j in 0..d {
                    book.vectors[c * d + j] = book.embed_sum[c * d + j] / mass;
                }
                if book.cluster_size[c] < 1e-2 {
                    // Dead code: reseed from a random batch frame.
                    let f = rng.random_range(0..n_frames);
                    for j in 0..d {
                        let jitter: f32 = rng.sample::<f32, _>(StandardNormal);
                        book.vectors[c * d + j] = residual[f * d + j] + 1e-3 * jitter;
                        book.embed_sum[c * d + j] = book.vectors[c * d + j];
                    }
                    book.cluster_size[c] = 1.0;
                }
            }
            for f in 0..n_frames {
                let code = idx[f];
                for j in 0..d {
                    residual[f * d + j] -= book.vectors[code * d + j];
                }
            }
        }
    }

    /// Raw codebook state for checkpointing.
    pub fn export_codebooks(&self) -> Option<Vec<CodebookState>> {
        self.codebooks.as_ref().map(|books| {
            books
                .iter()
                .map(|b| (b.vectors.clone(), b.cluster_size.clone(), b.embed_sum.clone()))
                .collect()
        })
    }

    pub fn import_codebooks(&mut self, books: Vec<CodebookState>) -> Result<()> {
        let d = self.config.latent_dim;
        let k = self.config.codebook_size;
        if books.len() != self.config.num_codebooks {
            return Err(Error::invalid("codebook level count mismatch"));
        }
        for (v, c, e) in &books {
            if v.len() != k * d || c.len() != k || e.len() != k * d {
                return Err(Error::invalid("codebook shape mismatch"));
            }
        }
        self.codebooks = Some(
            books
                .into_iter()
                .map(|(vectors, cluster_size, embed_sum)| Codebook {
                    vectors,
                    cluster_size,
                    embed_sum,
                })
                .collect(),
        );
        Ok(())
    }
}

/// `[B, D, T]` channel-major tensor data to frame-major `[B * T, D]`.
fn collect_frames(data: &[f32], b: usize, d: usize, t: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; b * t * d];
    for bi in 0..b {
        for j in 0..d {
            for ti in 0..t {
                out[(bi * t + ti) * d + j] = data[(bi * d + j) * t + ti];
            }
        }
    }
    out
}

fn nearest_code(vectors: &[f32], frame: &[f32], k: usize, d: usize) -> usize {
    let mut best = 0;
    let mut best_dist = f32::INFINITY;
    for c in 0..k {
        let mut dist = 0.0f32;
        for j in 0..d {
            let diff = frame[j] - vectors[c * d + j];
            dist += diff * diff;
        }
        if dist < best_dist {
            best_dist = dist;
            best = c;
        }
    }
    best
}

/// Per-dimension expected KL (mean over batch and frames) of clamped
/// `(mu, log_var)` tensors, in f64.
pub fn measured_per_dim_kl(mu: &[f32], log_var: &[f32], b: usize, d: usize, t: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; d];
    for bi in 0..b {
        for j in 0..d {
            let mut acc = 0.0f64;
            for ti in 0..t {
                let m = mu[(bi * d + j) * t + ti] as f64;
                let lv = log_var[(bi * d + j) * t + ti] as f64;
                acc += lv.exp() + m * m - 1.0 - lv;
            }
            out[j] += 0.5 * acc;
        }
    }
    let denom = (b * t) as f64;
    for v in &mut out {
        *v /= denom;
    }
    out
}

/// Closed-form per-(batch, frame) KL of clamped `(mu, log_var)` tensors via
/// the f64 rate math.
pub fn measured_per_frame_kl(
    mu: &[f32],
    log_var: &[f32],
    b: usize,
    d: usize,
    t: usize,
) -> Result<Vec<f64>> {
    let mut mu_t = vec![0.0f64; b * t * d];
    let mut lv_t = vec![0.0f64; b * t * d];
    for bi in 0..b {
        for j in 0..d {
            for ti in 0..t {
                mu_t[(bi * t + ti) * d + j] = mu[(bi * d + j) * t + ti] as f64;
                lv_t[(bi * t + ti) * d + j] = log_var[(bi * d + j) * t + ti] as f64;
            }
        }
    }
    let post = ratebench_core::GaussianPosterior::new(mu_t, lv_t, b * t, d)?;
    Ok(ratebench_core::gaussian_kl(&post))
}
