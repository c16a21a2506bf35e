// scratch: free-bits floor on the tone_seq-heavy corpus, D=8
use ratebench::bottleneck::RateLossKind;
use ratebench::data::SynthClass;
use ratebench::trainer::{TrainConfig, Trainer};

fn main() {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let mut cfg = TrainConfig::default();
    cfg.model.latent_dim = 8;
    cfg.bottleneck.latent_dim = 8;
    cfg.bottleneck.rate_loss = RateLossKind::FreeBits;
    cfg.bottleneck.free_bits_lambda = 0.5;
    cfg.bottleneck.passthrough_prob = 0.0;
    cfg.target_kl_nats = None;
    cfg.steps = steps;
    cfg.eval_every = u64::MAX - 1;
    cfg.batch_size = 3;
    cfg.seed = 1;
    cfg.dataset.segment_s = 0.25;
    cfg.dataset.n_items = 48;
    cfg.dataset.classes = vec![
        SynthClass::ToneSeq,
        SynthClass::ToneSeq,
        SynthClass::NoiseBurst,
        SynthClass::SineMix,
    ];
    let mut tr = Trainer::new(cfg).unwrap();
    for s in 0..steps {
        tr.train_step().unwrap();
        if (s + 1) % 500 == 0 {
            let pd = tr.measure_per_dim_kl().unwrap();
            let min = pd.iter().cloned().fold(f64::INFINITY, f64::min);
            let sum: f64 = pd.iter().sum();
            println!(
                "step {:4}: min {min:.3} sum {sum:.2} | {}",
                s + 1,
                pd.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" ")
            );
        }
    }
}
