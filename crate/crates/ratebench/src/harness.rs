//! Sweep orchestration: trains one model per (bottleneck kind, target,
//! lambda, seed, variant) tuple, evaluates it into an [`RDPoint`], and
//! emits rate-distortion curves and ablation tables.
//!
//! Sweeps are resumable: each finished point leaves an `rdpoint.json`
//! marker next to its checkpoint, and rerunning skips those points. Partial
//! results are valid; individual failures are recorded and the sweep
//! continues.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ratebench_core::kl_to_bitrate;
use serde::{Deserialize, Serialize};

use crate::bottleneck::{BottleneckKind, RateLossKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::plot;
use crate::trainer::{TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantSpec {
    pub name: String,
    pub passthrough_prob: f64,
    pub adversarial: bool,
}

impl Default for VariantSpec {
    fn default() -> Self {
        Self {
            name: "base".to_string(),
            passthrough_prob: 0.25,
            adversarial: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Per-frame KL targets (nats) for the gaussian family.
    pub target_kls: Vec<f64>,
    /// Rate-loss weights crossed with every target.
    pub lambda_weights: Vec<f64>,
    pub kinds: Vec<BottleneckKind>,
    pub seeds: Vec<u64>,
    /// Residual depths for the vq family (rate = n * log2(K) * S).
    pub vq_num_codebooks: Vec<usize>,
    pub variants: Vec<VariantSpec>,
    pub base: TrainConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            target_kls: vec![10.0, 20.0, 40.0, 80.0, 160.0],
            lambda_weights: vec![1.0, 2.0, 10.0],
            kinds: vec![BottleneckKind::Gaussian],
            seeds: vec![1],
            vq_num_codebooks: vec![1, 2, 4],
            variants: vec![VariantSpec::default()],
            base: TrainConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() || self.seeds.is_empty() || self.variants.is_empty() {
            return Err(Error::invalid("kinds, seeds, and variants must be non-empty"));
        }
        if self.kinds.contains(&BottleneckKind::Gaussian)
            && (self.target_kls.is_empty() || self.lambda_weights.is_empty())
        {
            return Err(Error::invalid(
                "gaussian sweeps need non-empty target_kls and lambda_weights",
            ));
        }
        if self.kinds.contains(&BottleneckKind::Vq) && self.vq_num_codebooks.is_empty() {
            return Err(Error::invalid("vq sweeps need non-empty vq_num_codebooks"));
        }
        if self.target_kls.iter().any(|&t| t.is_nan() || t < 0.0) {
            return Err(Error::invalid("target_kls must be >= 0"));
        }
        if self.lambda_weights.iter().any(|&l| l.is_nan() || l < 0.0) {
            return Err(Error::invalid("lambda_weights must be >= 0"));
        }
        self.base.validate()
    }
}

/// One trained and evaluated model on the rate-distortion plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    pub model_id: String,
    pub family: String,
    pub target_kl: f64,
    pub lambda: f64,
    pub measured_kl: f64,
    pub measured_bitrate_bps: f64,
    pub mel_distance: f64,
    pub seed: u64,
}

impl RDPoint {
    /// Checks the structural invariant: bitrate and KL agree through the
    /// nats-to-bits conversion at the given frame rate.
    pub fn validate(&self, frame_rate_hz: f64) -> Result<()> {
        let expect = kl_to_bitrate(self.measured_kl, frame_rate_hz)?;
        let rel = (self.measured_bitrate_bps - expect).abs() / expect.abs().max(1e-9);
        if rel > 1e-9 {
            return Err(Error::invalid(format!(
                "rd point {}: bitrate {} inconsistent with KL {} at {} Hz",
                self.model_id, self.measured_bitrate_bps, self.measured_kl, frame_rate_hz
            )));
        }
        Ok(())
    }
}

fn fmt_num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e12 {
        format!("{}", v as i64)
    } else {
        format!("{v}").replace('.', "p")
    }
}

/// Deterministic point identifier; doubles as the checkpoint directory
/// name.
pub fn model_id(kind: BottleneckKind, variant: &str, target: f64, lambda: f64, n_codebooks: usize, seed: u64) -> String {
    match kind {
        BottleneckKind::Gaussian => format!(
            "gaussian_t{}_l{}_s{seed}_{variant}",
            fmt_num(target),
            fmt_num(lambda)
        ),
        BottleneckKind::Vq => format!("vq_n{n_codebooks}_s{seed}_{variant}"),
    }
}

struct PointSpec {
    id: String,
    family: String,
    kind: BottleneckKind,
    target_kl: f64,
    lambda: f64,
    n_codebooks: usize,
    seed: u64,
    variant: VariantSpec,
}

fn enumerate_points(cfg: &SweepConfig) -> Vec<PointSpec> {
    let mut out = Vec::new();
    for variant in &cfg.variants {
        for &kind in &cfg.kinds {
            let family_base = match kind {
                BottleneckKind::Gaussian => "gaussian",
                BottleneckKind::Vq => "vq",
            };
            let family = if variant.name == "base" {
                family_base.to_string()
            } else {
                format!("{family_base}_{}", variant.name)
            };
            match kind {
                BottleneckKind::Gaussian => {
                    for &target in &cfg.target_kls {
                        for &lambda in &cfg.lambda_weights {
                            for &seed in &cfg.seeds {
                                out.push(PointSpec {
                                    id: model_id(kind, &variant.name, target, lambda, 0, seed),
                                    family: family.clone(),
                                    kind,
                                    target_kl: target,
                                    lambda,
                                    n_codebooks: 0,
                                    seed,
                                    variant: variant.clone(),
                                });
                            }
                        }
                    }
                }
                BottleneckKind::Vq => {
                    for &n in &cfg.vq_num_codebooks {
                        for &seed in &cfg.seeds {
                            out.push(PointSpec {
                                id: model_id(kind, &variant.name, 0.0, 0.0, n, seed),
                                family: family.clone(),
                                kind,
                                target_kl: 0.0,
                                lambda: 0.0,
                                n_codebooks: n,
                                seed,
                                variant: variant.clone(),
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

fn point_config(cfg: &SweepConfig, spec: &PointSpec) -> TrainConfig {
    let mut tc = cfg.base.clone();
    tc.seed = spec.seed;
    tc.bottleneck.kind = spec.kind;
    tc.bottleneck.passthrough_prob = spec.variant.passthrough_prob;
    match spec.kind {
        BottleneckKind::Gaussian => {
            tc.bottleneck.rate_loss = RateLossKind::TargetKl;
            tc.target_kl_nats = Some(spec.target_kl);
            tc.target_bitrate_bps = None;
            tc.weights.rate_weight = spec.lambda;
        }
        BottleneckKind::Vq => {
            tc.bottleneck.rate_loss = RateLossKind::None;
            tc.bottleneck.num_codebooks = spec.n_codebooks;
            tc.target_kl_nats = None;
            tc.target_bitrate_bps = None;
            tc.weights.rate_weight = 0.0;
        }
    }
    if spec.variant.adversarial {
        if tc.weights.adv_weight == 0.0 {
            tc.weights.adv_weight = 1.0;
        }
    } else {
        tc.weights.adv_weight = 0.0;
    }
    tc
}

/// Trains and evaluates every point in the sweep, skipping points whose
/// results already exist under `out_dir`. Failed points are logged to
/// `errors.jsonl` and do not abort the sweep.
pub fn run_sweep(cfg: &SweepConfig, out_dir: &Path) -> Result<Vec<RDPoint>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let dataset = Arc::new(Dataset::build(
        &cfg.base.dataset,
        cfg.base.model.sample_rate_hz,
        cfg.base.model.hop,
    )?);
    let specs = enumerate_points(cfg);
    let mut points = Vec::with_capacity(specs.len());
    let points_path = out_dir.join("points.jsonl");
    for spec in &specs {
        let dir = out_dir.join("points").join(&spec.id);
        let marker = dir.join("rdpoint.json");
        if marker.exists() {
            let text = std::fs::read_to_string(&marker)?;
            let point: RDPoint = serde_json::from_str(&text)
                .map_err(|e| Error::invalid(format!("{}: {e}", marker.display())))?;
            points.push(point);
            continue;
        }
        match run_point(cfg, spec, &dir, Arc::clone(&dataset)) {
            Ok(point) => {
                std::fs::create_dir_all(&dir)?;
                let json = serde_json::to_string_pretty(&point)
                    .map_err(|e| Error::invalid(format!("point serialization: {e}")))?;
                std::fs::write(&marker, json)?;
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&points_path)?;
                writeln!(
                    f,
                    "{}",
                    serde_json::to_string(&point)
                        .map_err(|e| Error::invalid(format!("point serialization: {e}")))?
                )?;
                points.push(point);
            }
            Err(e) => {
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(out_dir.join("errors.jsonl"))?;
                writeln!(
                    f,
                    "{}",
                    serde_json::json!({"model_id": spec.id, "error": e.to_string()})
                )?;
            }
        }
    }
    Ok(points)
}

fn run_point(
    cfg: &SweepConfig,
    spec: &PointSpec,
    dir: &Path,
    dataset: Arc<Dataset>,
) -> Result<RDPoint> {
    let tc = point_config(cfg, spec);
    let mut trainer = Trainer::with_dataset(tc, dataset)?;
    trainer.run(Some(dir))?;
    evaluate_point(&mut trainer, spec)
}

fn evaluate_point(trainer: &mut Trainer, spec: &PointSpec) -> Result<RDPoint> {
    let (kl, bps) = trainer.measure_kl_bitrate()?;
    let mel = trainer.eval_mel_distance()?;
    let point = RDPoint {
        model_id: spec.id.clone(),
        family: spec.family.clone(),
        target_kl: match spec.kind {
            BottleneckKind::Gaussian => spec.target_kl,
            BottleneckKind::Vq => kl,
        },
        lambda: spec.lambda,
        measured_kl: kl,
        measured_bitrate_bps: bps,
        mel_distance: mel,
        seed: spec.seed,
    };
    point.validate(trainer.rate_spec.frame_rate_hz)?;
    Ok(point)
}

pub const CSV_HEADER: &str =
    "model_id,family,target_kl,lambda,measured_kl,measured_bitrate_bps,mel_distance,seed";

/// Writes the curve CSV (schema-exact columns) and, when `plot_path` is
/// set, an SVG with one series per family plus its metadata sidecar.
pub fn emit_curve(
    points: &[RDPoint],
    csv_path: &Path,
    plot_path: Option<&Path>,
) -> Result<()> {
    if points.is_empty() {
        return Err(Error::invalid("no points to emit"));
    }
    let mut csv = String::new();
    csv.push_str(CSV_HEADER);
    csv.push('\n');
    for p in points {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            p.model_id,
            p.family,
            p.target_kl,
            p.lambda,
            p.measured_kl,
            p.measured_bitrate_bps,
            p.mel_distance,
            p.seed
        );
    }
    if let Some(dir) = csv_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(csv_path, &csv)?;

    if let Some(plot_path) = plot_path {
        let mut families: Vec<String> = points.iter().map(|p| p.family.clone()).collect();
        families.sort();
        families.dedup();
        let series: Vec<(String, Vec<(f64, f64)>)> = families
            .into_iter()
            .map(|fam| {
                let pts = points
                    .iter()
                    .filter(|p| p.family == fam)
                    .map(|p| (p.measured_bitrate_bps, p.mel_distance))
                    .collect();
                (fam, pts)
            })
            .collect();
        plot::scatter_log_x(&series, "bitrate (bits/s)", "mel distance", plot_path)?;
    }
    Ok(())
}

/// Parses a curve CSV back into points (inverse of [`emit_curve`]).
pub fn parse_curve_csv(text: &str) -> Result<Vec<RDPoint>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::invalid("empty csv"))?;
    if header.trim() != CSV_HEADER {
        return Err(Error::invalid(format!("unexpected csv header: {header}")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(Error::invalid(format!("csv row {} malformed", i + 2)));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::invalid(format!("csv row {}: bad number {s}", i + 2)))
        };
        out.push(RDPoint {
            model_id: parts[0].to_string(),
            family: parts[1].to_string(),
            target_kl: f(parts[2])?,
            lambda: f(parts[3])?,
            measured_kl: f(parts[4])?,
            measured_bitrate_bps: f(parts[5])?,
            mel_distance: f(parts[6])?,
            seed: parts[7]
                .parse()
                .map_err(|_| Error::invalid(format!("csv row {}: bad seed", i + 2)))?,
        });
    }
    Ok(out)
}

/// Loads points from a sweep output directory (`points.jsonl`).
pub fn load_points(dir: &Path) -> Result<Vec<RDPoint>> {
    let path = dir.join("points.jsonl");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| Error::invalid(format!("bad point row: {e}")))?,
        );
    }
    Ok(out)
}

/// Ablation table: one row per family/variant with median mel distance,
/// measured KL, and bitrate. All points must target the same rate so the
/// comparison is apples-to-apples.
pub fn ablation_report(points: &[RDPoint], frame_rate_hz: f64) -> Result<String> {
    if points.is_empty() {
        return Err(Error::invalid("no points to report"));
    }
    let gaussian: Vec<&RDPoint> = points.iter().filter(|p| p.lambda > 0.0 || p.target_kl > 0.0).collect();
    if !gaussian.is_empty() {
        let t0 = gaussian[0].target_kl;
        if gaussian.iter().any(|p| (p.target_kl - t0).abs() > 1e-9) {
            return Err(Error::invalid(
                "ablation rows must share the same rate target",
            ));
        }
    }
    for p in points {
        p.validate(frame_rate_hz)?;
    }
    let mut families: Vec<String> = points.iter().map(|p| p.family.clone()).collect();
    families.sort();
    families.dedup();

    let mut out = String::new();
    out.push_str("| variant | mel distance | measured KL (nats/frame) | bitrate (kbps) |\n");
    out.push_str("|---|---|---|---|\n");
    for fam in families {
        let rows: Vec<&RDPoint> = points.iter().filter(|p| p.family == fam).collect();
        let med = |f: fn(&RDPoint) -> f64| -> f64 {
            let mut v: Vec<f64> = rows.iter().map(|p| f(p)).collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let _ = writeln!(
            out,
            "| {fam} | {:.4} | {:.2} | {:.3} |",
            med(|p| p.mel_distance),
            med(|p| p.measured_kl),
            med(|p| p.measured_bitrate_bps) / 1000.0
        );
    }
    Ok(out)
}

/// Output root resolution: explicit flag, else `RATEBENCH_OUT`, else a
/// default under the current directory.
pub fn resolve_out_root(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Ok(env) = std::env::var("RATEBENCH_OUT") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from("ratebench_out")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(id: &str, fam: &str, kl: f64, mel: f64, seed: u64) -> RDPoint {
        RDPoint {
            model_id: id.to_string(),
            family: fam.to_string(),
            target_kl: 40.0,
            lambda: 10.0,
            measured_kl: kl,
            measured_bitrate_bps: kl_to_bitrate(kl, 40.0).unwrap(),
            mel_distance: mel,
            seed,
        }
    }

    #[test]
    fn csv_round_trip_is_idempotent() {
        let pts = vec![
            point("gaussian_t40_l10_s1_base", "gaussian", 38.5, 1.23, 1),
            point("vq_n2_s1_base", "vq", 11.09, 1.44, 1),
        ];
        let dir = std::env::temp_dir().join("ratebench_harness_test");
        std::fs::create_dir_all(&dir).unwrap();
        let csv1 = dir.join("a.csv");
        emit_curve(&pts, &csv1, None).unwrap();
        let text1 = std::fs::read_to_string(&csv1).unwrap();
        let parsed = parse_curve_csv(&text1).unwrap();
        assert_eq!(parsed, pts);
        let csv2 = dir.join("b.csv");
        emit_curve(&parsed, &csv2, None).unwrap();
        assert_eq!(text1, std::fs::read_to_string(&csv2).unwrap());
    }

    #[test]
    fn single_point_emits_valid_csv_and_plot() {
        let pts = vec![point("gaussian_t40_l10_s1_base", "gaussian", 38.5, 1.23, 1)];
        let dir = std::env::temp_dir().join("ratebench_harness_test");
        let csv = dir.join("single.csv");
        let svg = dir.join("single.svg");
        emit_curve(&pts, &csv, Some(&svg)).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(std::fs::metadata(&svg).unwrap().len() > 0);
        assert!(emit_curve(&[], &csv, None).is_err());
    }

    #[test]
    fn rd_point_invariant_is_enforced() {
        let mut p = point("x", "gaussian", 40.0, 1.0, 1);
        p.validate(40.0).unwrap();
        p.measured_bitrate_bps *= 1.5;
        assert!(p.validate(40.0).is_err());
    }

    #[test]
    fn ablation_shapes_and_consistency() {
        let pts = vec![
            point("a", "gaussian", 38.0, 1.2, 1),
            point("b", "gaussian_pt50", 39.0, 1.25, 1),
        ];
        let table = ablation_report(&pts, 40.0).unwrap();
        assert_eq!(table.lines().count(), 4); // header + separator + 2 rows
        assert!(table.contains("gaussian_pt50"));

        let single = ablation_report(&pts[..1], 40.0).unwrap();
        assert_eq!(single.lines().count(), 3);

        let mut mismatched = pts.clone();
        mismatched[1].target_kl = 80.0;
        assert!(ablation_report(&mismatched, 40.0).is_err());
    }

    #[test]
    fn model_ids_are_deterministic_and_distinct() {
        let a = model_id(BottleneckKind::Gaussian, "base", 40.0, 10.0, 0, 1);
        assert_eq!(a, "gaussian_t40_l10_s1_base");
        let b = model_id(BottleneckKind::Gaussian, "base", 2.5, 0.5, 0, 2);
        assert_eq!(b, "gaussian_t2p5_l0p5_s2_base");
        let c = model_id(BottleneckKind::Vq, "pt50", 0.0, 0.0, 4, 3);
        assert_eq!(c, "vq_n4_s3_pt50");
    }
}
