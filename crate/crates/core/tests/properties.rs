//! Property tests for the rate math and schedule invariants.

use proptest::prelude::*;
use ratebench_core::{
    bitrate_to_target_kl, free_bits_loss, gaussian_kl, kl_to_bitrate, vq_bitrate,
    GaussianPosterior, NoiseSchedule,
};

proptest! {
    #[test]
    fn kl_is_nonnegative(
        mu in prop::collection::vec(-4.0f64..4.0, 1..8),
        lv_raw in prop::collection::vec(-5.0f64..4.0, 1..8),
    ) {
        let dim = mu.len().min(lv_raw.len());
        let post = GaussianPosterior::single(
            mu[..dim].to_vec(),
            lv_raw[..dim].to_vec(),
        ).unwrap();
        prop_assert!(gaussian_kl(&post)[0] >= 0.0);
    }

    #[test]
    fn kl_bitrate_round_trip(kl in 0.0f64..5000.0, s in 1.0f64..200.0) {
        let bps = kl_to_bitrate(kl, s).unwrap();
        let back = bitrate_to_target_kl(bps, s).unwrap();
        prop_assert!((back - kl).abs() <= 1e-9 * kl.max(1.0));
    }

    #[test]
    fn vq_rate_is_log_base_change(k in 2usize..8192, n in 1usize..16, s in 1.0f64..100.0) {
        let via_vq = vq_bitrate(k, n, s).unwrap();
        let via_kl = kl_to_bitrate(n as f64 * (k as f64).ln(), s).unwrap();
        prop_assert!((via_vq - via_kl).abs() <= 1e-9 * via_vq.max(1.0));
    }

    #[test]
    fn free_bits_dominates_both_bounds(
        kls in prop::collection::vec(0.0f64..4.0, 1..12),
        lambda in 0.0f64..2.0,
    ) {
        let fb = free_bits_loss(&kls, lambda).unwrap();
        let sum: f64 = kls.iter().sum();
        prop_assert!(fb + 1e-12 >= sum);
        prop_assert!(fb + 1e-12 >= lambda * kls.len() as f64);
        // Tight when every entry is on one side of the floor.
        if kls.iter().all(|&k| k >= lambda) {
            prop_assert!((fb - sum).abs() <= 1e-9);
        }
        if kls.iter().all(|&k| k <= lambda) {
            prop_assert!((fb - lambda * kls.len() as f64).abs() <= 1e-9);
        }
    }

    #[test]
    fn schedule_is_variance_preserving(t in 1e-6f64..0.999999, shift in -2.0f64..1.0) {
        let sched = NoiseSchedule::new(shift);
        let (a, s) = sched.alpha_sigma(t).unwrap();
        prop_assert!((a * a + s * s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn v_round_trip_recovers_inputs(
        t in 1e-4f64..0.9999,
        z in prop::collection::vec(-3.0f64..3.0, 1..12),
        eps in prop::collection::vec(-3.0f64..3.0, 1..12),
    ) {
        let dim = z.len().min(eps.len());
        let (z, eps) = (&z[..dim], &eps[..dim]);
        let sched = NoiseSchedule::shifted_half();
        let z_t = sched.noised_latent(z, eps, t).unwrap();
        let v = sched.v_target(z, eps, t).unwrap();
        let (z_hat, eps_hat) = sched.recover_from_v(&z_t, &v, t).unwrap();
        for j in 0..dim {
            prop_assert!((z_hat[j] - z[j]).abs() < 1e-6);
            prop_assert!((eps_hat[j] - eps[j]).abs() < 1e-6);
        }
    }
}
