// scratch: per-class eval mel per grid model + decoder saturation check
use ratebench::objectives::{mel_distance, DEFAULT_MEL_SCALES};
use ratebench::trainer::Trainer;

fn main() {
    let grid = std::path::PathBuf::from("/tmp/ratebench_acceptance_v1/grid/points");
    println!("class labels: 0=sine_mix 1=chirp 2=noise_burst 3=am_tone");
    for id in [
        "gaussian_t10_l10_s1_base",
        "gaussian_t40_l10_s1_base",
        "gaussian_t160_l10_s1_base",
    ] {
        let ckpt = grid.join(id).join("checkpoint.rbck");
        let mut tr = Trainer::load_checkpoint(&ckpt).unwrap();
        let eval: Vec<usize> = tr.dataset.eval_idx.clone();
        let recons = tr.reconstruct(&eval).unwrap();
        let sr = tr.cfg.model.sample_rate_hz as f64;
        let mut per_class = vec![(0.0f64, 0usize); 4];
        for (&i, r) in eval.iter().zip(&recons) {
            let d = mel_distance(&tr.dataset.items[i].samples, r, sr, &DEFAULT_MEL_SCALES).unwrap();
            let l = tr.dataset.items[i].label;
            per_class[l].0 += d;
            per_class[l].1 += 1;
        }
        let fmt: Vec<String> = per_class
            .iter()
            .enumerate()
            .map(|(l, (s, n))| format!("c{l}: {:.3}({n})", s / (*n).max(1) as f64))
            .collect();
        println!("{id}: {}", fmt.join("  "));
    }
}
