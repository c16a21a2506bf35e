//! `ratebench` CLI: train fixed-bitrate audio VAEs, sweep rate ladders,
//! emit rate-distortion curves and ablation tables, and probe latent
//! predictability with a toy diffusion model.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ratebench::config::parse_config;
use ratebench::diffusion::{predictability_score, DiffusionConfig};
use ratebench::error::{Error, Result};
use ratebench::harness::{
    ablation_report, emit_curve, load_points, resolve_out_root, run_sweep, SweepConfig,
};
use ratebench::trainer::{TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "ratebench", version, about = "Rate-distortion workbench for continuous audio VAEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; omitted fields use documented defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key after file parsing, e.g. --set steps=500 or
    /// --set bottleneck.passthrough_prob=0.5. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a single model and write metrics + checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (default: $RATEBENCH_OUT or ./ratebench_out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per (kind, target, lambda, seed, variant) tuple;
    /// resumable by rerunning with the same output directory.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit the rate-distortion CSV and plot from a sweep directory.
    Curve {
        /// Sweep output directory containing points.jsonl.
        #[arg(long = "in")]
        input: PathBuf,
        /// CSV destination.
        #[arg(long)]
        out: PathBuf,
        /// SVG destination (a .meta.json sidecar lands next to it).
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Emit a per-variant ablation table from a sweep directory.
    Ablation {
        #[arg(long = "in")]
        input: PathBuf,
        /// Table destination (markdown); defaults to <in>/ablation.md.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Latent frame rate used to cross-check KL/bitrate consistency.
        #[arg(long, default_value_t = 40.0)]
        frame_rate_hz: f64,
    },
    /// Train the toy latent diffusion probe on a VAE checkpoint and report
    /// its predictability score.
    Probe {
        /// VAE checkpoint (.rbck).
        #[arg(long)]
        vae: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Report destination; defaults next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: measured KL, bitrate, and mel distance on its
    /// eval split; optionally write reconstructions as WAV.
    Eval {
        #[arg(long)]
        vae: PathBuf,
        /// Directory for reconstruction WAVs (skipped when absent).
        #[arg(long)]
        wav_out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({"error": e.to_string(), "kind": e.kind()});
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg: TrainConfig = parse_config(config.config.as_deref(), &config.sets)?;
            let out = resolve_out_root(out.as_deref()).join("train");
            let mut trainer = Trainer::new(cfg)?;
            let rows = trainer.run(Some(&out))?;
            if let Some(last) = rows.last() {
                println!(
                    "{}",
                    serde_json::json!({
                        "out_dir": out,
                        "steps": last.step,
                        "measured_kl_per_frame": last.measured_kl_per_frame,
                        "measured_bitrate_bps": last.measured_bitrate_bps,
                        "mel_distance": last.mel_distance,
                    })
                );
            }
            Ok(())
        }
        Command::Sweep { config, out } => {
            let cfg: SweepConfig = parse_config(config.config.as_deref(), &config.sets)?;
            let out = resolve_out_root(out.as_deref()).join("sweep");
            let points = run_sweep(&cfg, &out)?;
            println!(
                "{}",
                serde_json::json!({"out_dir": out, "points": points.len()})
            );
            Ok(())
        }
        Command::Curve { input, out, plot } => {
            let points = load_points(&input)?;
            emit_curve(&points, &out, plot.as_deref())?;
            println!(
                "{}",
                serde_json::json!({"csv": out, "plot": plot, "points": points.len()})
            );
            Ok(())
        }
        Command::Ablation { input, out, frame_rate_hz } => {
            let points = load_points(&input)?;
            let table = ablation_report(&points, frame_rate_hz)?;
            let out = out.unwrap_or_else(|| input.join("ablation.md"));
            std::fs::write(&out, &table)?;
            print!("{table}");
            println!("{}", serde_json::json!({"table": out}));
            Ok(())
        }
        Command::Probe { vae, config, out } => {
            let cfg: DiffusionConfig = parse_config(config.config.as_deref(), &config.sets)?;
            let mut trainer = Trainer::load_checkpoint(&vae)?;
            let vae_id = vae_id_from_path(&vae);
            let report = predictability_score(&mut trainer, &cfg, &vae_id)?;
            let json = serde_json::json!({
                "vae_id": report.vae_id,
                "measured_bitrate": report.measured_bitrate_bps,
                "predictability_score": report.predictability_score,
                "measured_kl": report.measured_kl,
                "init_v_mse": report.init_v_mse,
                "expected_v_sq": report.expected_v_sq,
            });
            let out = out.unwrap_or_else(|| vae.with_extension("probe.json"));
            std::fs::write(
                &out,
                serde_json::to_string_pretty(&json)
                    .map_err(|e| Error::invalid(format!("report serialization: {e}")))?,
            )?;
            println!("{json}");
            Ok(())
        }
        Command::Eval { vae, wav_out } => {
            let mut trainer = Trainer::load_checkpoint(&vae)?;
            let (kl, bps) = trainer.measure_kl_bitrate()?;
            let mel = trainer.eval_mel_distance()?;
            if let Some(dir) = wav_out {
                std::fs::create_dir_all(&dir)?;
                let eval = trainer.dataset.eval_idx.clone();
                let take: Vec<usize> = eval.into_iter().take(4).collect();
                let recons = trainer.reconstruct(&take)?;
                let sr = trainer.cfg.model.sample_rate_hz;
                for (&idx, recon) in take.iter().zip(&recons) {
                    ratebench::wav::write_wav_mono16(
                        &dir.join(format!("item{idx}_orig.wav")),
                        &trainer.dataset.items[idx].samples,
                        sr,
                    )?;
                    ratebench::wav::write_wav_mono16(
                        &dir.join(format!("item{idx}_recon.wav")),
                        recon,
                        sr,
                    )?;
                }
            }
            println!(
                "{}",
                serde_json::json!({
                    "measured_kl_per_frame": kl,
                    "measured_bitrate_bps": bps,
                    "mel_distance": mel,
                })
            );
            Ok(())
        }
    }
}

fn vae_id_from_path(path: &Path) -> String {
    // Sweep checkpoints live at <out>/points/<model_id>/checkpoint.rbck;
    // use the directory name when the file name is generic.
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("vae");
    if stem == "checkpoint" {
        path.parent()
            .and_then(|p| p.file_name())
            .and_then(|s| s.to_str())
            .unwrap_or(stem)
            .to_string()
    } else {
        stem.to_string()
    }
}
