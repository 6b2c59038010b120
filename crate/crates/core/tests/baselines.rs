mod common;

use common::{db, max_abs, median, random_pattern, scenario, small_system, with_allocation, x_nmse, Patterns};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xlmimo::baselines::{
    lmmse_estimate, lmmse_genie_estimate, omp_estimate, vamp_bg_estimate, OmpConfig, VampConfig,
};
use xlmimo::channel::ChannelRealization;
use xlmimo::model::{CMat, DftOperators, SystemConfig, C64};
use xlmimo::pilots::PilotAllocation;
use xlmimo::rng::complex_normal;
use xlmimo::turbo::{run_turbo_mrf, EstimatorConfig};

/// Channels from explicit delay-beam matrices.
fn realization(sys: &SystemConfig, x: Vec<CMat>) -> ChannelRealization {
    let ops = DftOperators::new(sys);
    let h = x.iter().map(|xk| ops.cir_to_frequency(xk).unwrap()).collect();
    let support = x
        .iter()
        .map(|xk| xlmimo::channel::support_mask(xk, sys.antennas_per_subarray, 0.0))
        .collect();
    ChannelRealization { x, h, support }
}

/// Bernoulli-Gaussian delay-beam matrix; activity is drawn per tap and
/// group of `shared` neighbouring antennas.
fn sparse_x(sys: &SystemConfig, rate: f64, seed: u64, shared: usize) -> CMat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let var = 1.0 / (sys.n_taps as f64 * rate);
    let mut x = CMat::zeros(sys.n_taps, sys.n_antennas());
    for t in 0..sys.n_taps {
        for b in 0..sys.n_antennas() / shared {
            if rng.gen_bool(rate) {
                for i in 0..shared {
                    x[(t, b * shared + i)] = complex_normal(&mut rng, var);
                }
            }
        }
    }
    x
}

fn single_user_full(snr_db: f64) -> SystemConfig {
    small_system(32, 4, 1, 1, snr_db)
}

#[test]
fn lmmse_is_exact_without_noise() {
    let mut sys = single_user_full(20.0);
    sys.noise_var = 0.0;
    let x = vec![sparse_x(&sys, 0.5, 1, 1)];
    let alloc = PilotAllocation::o_cdm(1, 32, 32.0).unwrap();
    let mut s = with_allocation(&sys, realization(&sys, x), alloc, 1);
    s.problem.noise_var = 1e-9;
    let est = lmmse_estimate(&s.problem, &s.ops, None).unwrap();
    assert!(max_abs(&(&est.x[0] - &s.channels.x[0])) < 1e-6);
    assert!(max_abs(&(&est.h[0] - &s.channels.h[0])) < 1e-5);
}

#[test]
fn lmmse_shrinks_to_zero_in_heavy_noise() {
    let sys = single_user_full(20.0);
    let x = vec![sparse_x(&sys, 0.5, 2, 1)];
    let alloc = PilotAllocation::o_cdm(1, 32, 32.0).unwrap();
    let mut s = with_allocation(&sys, realization(&sys, x), alloc, 2);
    s.problem.noise_var = 1e12;
    let est = lmmse_estimate(&s.problem, &s.ops, None).unwrap();
    assert!(est.x[0].norm() < 1e-8 * s.channels.x[0].norm());
    assert!(lmmse_estimate(&s.problem, &s.ops, Some(0.0)).is_err());
}

#[test]
fn lmmse_equals_the_first_turbo_stage() {
    let sys = small_system(64, 8, 4, 2, 10.0);
    let s = scenario(&sys, 11, None);
    let est = lmmse_estimate(&s.problem, &s.ops, None).unwrap();
    let cfg = EstimatorConfig {
        max_iters: 1,
        ..EstimatorConfig::default()
    };
    let turbo = run_turbo_mrf(&s.problem, &s.ops, &cfg, None).unwrap();
    assert_eq!(est.x, turbo.first_lmmse);
}

#[test]
fn genie_is_exact_on_a_noiseless_sparse_channel() {
    let mut sys = small_system(32, 8, 2, 1, 20.0);
    sys.noise_var = 0.0;
    let x = vec![sparse_x(&sys, 0.2, 3, 1), sparse_x(&sys, 0.2, 4, 1)];
    let alloc = PilotAllocation::o_cdm(2, 32, 32.0).unwrap();
    let mut s = with_allocation(&sys, realization(&sys, x), alloc, 3);
    s.problem.noise_var = 1e-9;
    let est = lmmse_genie_estimate(&s.problem, &s.ops, &s.channels.x).unwrap();
    let e = x_nmse(&est.x, &s.channels.x);
    assert!(e < 1e-8, "NMSE {e}");
}

#[test]
fn genie_lower_bounds_lmmse_and_turbo() {
    let sys = small_system(64, 8, 4, 2, 15.0);
    for seed in 0..5 {
        let s = scenario(&sys, 200 + seed, None);
        let truth = &s.channels.x;
        let genie = x_nmse(&lmmse_genie_estimate(&s.problem, &s.ops, truth).unwrap().x, truth);
        let lmmse = x_nmse(&lmmse_estimate(&s.problem, &s.ops, None).unwrap().x, truth);
        let turbo = x_nmse(&run_turbo_mrf(&s.problem, &s.ops, &EstimatorConfig::default(), None).unwrap().x, truth);
        assert!(genie <= lmmse, "seed {seed}: genie {genie} lmmse {lmmse}");
        assert!(genie <= turbo, "seed {seed}: genie {genie} turbo {turbo}");
    }
}

#[test]
fn vamp_with_full_rate_starts_as_lmmse() {
    let sys = small_system(64, 8, 4, 2, 10.0);
    let s = scenario(&sys, 13, None);
    let lmmse = lmmse_estimate(&s.problem, &s.ops, None).unwrap();
    let cfg = VampConfig {
        max_iters: 1,
        rate_init: 1.0,
        sigma2_init: 1.0 / 8.0,
        learn: false,
        ..VampConfig::default()
    };
    let vamp = vamp_bg_estimate(&s.problem, &s.ops, &cfg, None).unwrap();
    for (a, b) in vamp.x.iter().zip(&lmmse.x) {
        assert!(max_abs(&(a - b)) < 1e-6 * max_abs(b));
    }
}

#[test]
fn vamp_and_turbo_agree_on_iid_supports() {
    let sys = small_system(64, 8, 4, 2, 15.0);
    let ops = DftOperators::new(&sys);
    let mut gaps = Vec::new();
    for seed in 0..10u64 {
        let x = (0..4).map(|k| sparse_x(&sys, 0.3, 10 * seed + k, sys.antennas_per_subarray)).collect();
        let groups = vec![vec![0, 1], vec![2, 3]];
        let pattern = random_pattern(64, 2, 8);
        let alloc = PilotAllocation::nfdcdm(&pattern, &groups, 64.0).unwrap();
        let s = with_allocation(&sys, realization(&sys, x), alloc, seed);
        let truth = &s.channels.x;
        let t = x_nmse(&run_turbo_mrf(&s.problem, &ops, &EstimatorConfig::default(), None).unwrap().x, truth);
        let v = x_nmse(&vamp_bg_estimate(&s.problem, &ops, &VampConfig::default(), None).unwrap().x, truth);
        gaps.push(db(t) - db(v));
    }
    let gap = median(gaps.clone());
    assert!(gap.abs() < 1.0, "median gap {gap:.2} dB over {gaps:?}");
}

#[test]
fn turbo_beats_vamp_on_clustered_channels() {
    let sys = SystemConfig::desk();
    let mut patterns = Patterns::default();
    let seeds = 10;
    let mut wins = 0;
    for seed in 0..seeds {
        let s = scenario(&sys, 300 + seed, Some(&mut patterns));
        let truth = &s.channels.x;
        let t = x_nmse(&run_turbo_mrf(&s.problem, &s.ops, &EstimatorConfig::default(), None).unwrap().x, truth);
        let v = x_nmse(&vamp_bg_estimate(&s.problem, &s.ops, &VampConfig::default(), None).unwrap().x, truth);
        wins += usize::from(t < v);
    }
    assert!(wins * 10 >= seeds as usize * 8, "turbo won {wins} of {seeds}");
}

#[test]
fn omp_recovers_a_single_atom() {
    let mut sys = single_user_full(20.0);
    sys.noise_var = 0.0;
    let mut x = CMat::zeros(4, sys.n_antennas());
    x[(2, 5)] = C64::new(0.8, -0.6);
    let alloc = PilotAllocation::o_cdm(1, 32, 32.0).unwrap();
    let s = with_allocation(&sys, realization(&sys, vec![x.clone()]), alloc, 4);
    let est = omp_estimate(&s.problem, &s.ops, &OmpConfig::default()).unwrap();
    assert!(max_abs(&(&est.x[0] - &x)) < 1e-10);
}

#[test]
fn omp_budget_limits_the_atoms() {
    let sys = small_system(64, 8, 4, 2, 10.0);
    let s = scenario(&sys, 17, None);
    let none = OmpConfig {
        budget: Some(0),
        ..OmpConfig::default()
    };
    let est = omp_estimate(&s.problem, &s.ops, &none).unwrap();
    assert!(est.x.iter().all(|x| x.iter().all(|z| z.norm() == 0.0)));

    let one = OmpConfig {
        budget: Some(1),
        residual_factor: 0.0,
        ..OmpConfig::default()
    };
    let est = omp_estimate(&s.problem, &s.ops, &one).unwrap();
    for m in 0..sys.n_antennas() {
        for grp in &s.problem.groups {
            let nonzero: usize = grp
                .users
                .iter()
                .map(|&u| est.x[u].column(m).iter().filter(|z| z.norm() > 0.0).count())
                .sum();
            assert!(nonzero <= 1);
        }
    }

    let huge = OmpConfig {
        budget: Some(10_000),
        residual_factor: 0.0,
        ..OmpConfig::default()
    };
    assert!(omp_estimate(&s.problem, &s.ops, &huge).is_ok());
    let bad = OmpConfig {
        budget_fraction: 0.0,
        ..OmpConfig::default()
    };
    assert!(omp_estimate(&s.problem, &s.ops, &bad).is_err());
}

#[test]
fn vamp_rejects_bad_settings() {
    let sys = small_system(32, 4, 2, 1, 10.0);
    let s = scenario(&sys, 1, None);
    for cfg in [
        VampConfig { max_iters: 0, ..VampConfig::default() },
        VampConfig { rate_init: 1.5, ..VampConfig::default() },
        VampConfig { damping: 0.0, ..VampConfig::default() },
    ] {
        assert!(vamp_bg_estimate(&s.problem, &s.ops, &cfg, None).is_err());
    }
}
