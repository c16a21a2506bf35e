// scratch: tone_seq corpus, configurable (target, lambda, seed) list via args
use ratebench::data::SynthClass;
use ratebench::trainer::{TrainConfig, Trainer};
use std::io::Write;

fn run(target: f64, lambda: f64, seed: u64, steps: u64) -> (f64, f64) {
    let mut cfg = TrainConfig::default();
    cfg.target_kl_nats = Some(target);
    cfg.weights.rate_weight = lambda;
    cfg.steps = steps;
    cfg.eval_every = u64::MAX - 1;
    cfg.batch_size = 3;
    cfg.seed = seed;
    cfg.dataset.segment_s = 0.25;
    cfg.dataset.n_items = 48;
    cfg.weights.recon_weight = 0.5;
    cfg.model.encoder_channels = vec![10, 20, 40, 80];
    cfg.rate_warmup_steps = 500;
    cfg.dataset.n_items = 64;
    cfg.dataset.classes = vec![
        SynthClass::ToneSeq,
        SynthClass::ToneSeq,
        SynthClass::BandNoise,
        SynthClass::NoiseBurst,
    ];
    let mut tr = Trainer::new(cfg).unwrap();
    for _ in 0..steps { tr.train_step().unwrap(); }
    let (kl, _) = tr.measure_kl_bitrate().unwrap();
    let md = tr.eval_mel_distance().unwrap();
    (kl, md)
}

fn main() {
    // args: steps then triples t,l,s
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args[0].parse().unwrap();
    for spec in &args[1..] {
        let parts: Vec<f64> = spec.split(',').map(|v| v.parse().unwrap()).collect();
        let (t, l, s) = (parts[0], parts[1], parts[2] as u64);
        let (kl, md) = run(t, l, s, steps);
        println!("t{t:<6} l{l:<4} s{s}: kl {kl:8.3} ({:+6.1}%)  mel {md:.4}", 100.0*(kl-t)/t);
        std::io::stdout().flush().unwrap();
    }
}
