use std::f64::consts::PI;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xlmimo::channel::{
    generate_channels, generate_scene, normalize_channel_power, steering_vector, support_components, support_mask,
    synthesize_cir, ChannelFile, ChannelRay, Scene, SceneConfig, UserPlacement,
};
use xlmimo::model::{CMat, DftOperators, SystemConfig, C64};
use xlmimo::rng::complex_normal;
use xlmimo::Error;

fn random_channels(k: usize, l: usize, m: usize, seed: u64) -> Vec<CMat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| CMat::from_fn(l, m, |_, _| complex_normal(&mut rng, 0.3)))
        .collect()
}

fn manual_scene(sys: &SystemConfig, rays: Vec<ChannelRay>) -> Scene {
    Scene {
        users: vec![[0.0, 10.0, 0.0]],
        subarray_centers: vec![[0.0; 3]; sys.n_subarrays],
        scatterers: Vec::new(),
        rays: vec![rays],
    }
}

fn single_user_sys() -> SystemConfig {
    let mut sys = SystemConfig::desk();
    sys.n_users = 1;
    sys.n_groups = 1;
    sys
}

#[test]
fn broadside_steering_vector_is_flat() {
    let v = steering_vector(PI / 2.0, 4);
    for z in v.iter() {
        assert_abs_diff_eq!(z.re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(z.im, 0.0, epsilon = 1e-15);
    }
}

#[test]
fn endfire_steering_vector_for_two_antennas() {
    let v = steering_vector(0.0, 2);
    let s = 1.0 / 2f64.sqrt();
    assert!((v[0] - C64::new(s, 0.0)).norm() < 1e-15);
    assert!((v[1] - C64::new(-s, 0.0)).norm() < 1e-15);
}

#[test]
fn single_integer_ray_gives_a_single_support_row() {
    let sys = single_user_sys();
    let rays = (0..sys.n_subarrays)
        .map(|b| ChannelRay {
            subarray: b,
            delay: 3.0,
            angle: 1.1,
            gain: C64::new(1.0, 0.5),
        })
        .collect();
    let scene = manual_scene(&sys, rays);
    let ops = DftOperators::new(&sys);
    let ch = synthesize_cir(&scene, &sys, &ops, 1e-4).unwrap();
    let s = &ch.support[0];
    for l in 0..sys.n_taps {
        for b in 0..sys.n_subarrays {
            assert_eq!(s[(l, b)], l == 3, "tap {l} sub-array {b}");
        }
    }
}

#[test]
fn invisible_subarrays_carry_exact_zeros() {
    let mut sys = single_user_sys();
    sys.n_subarrays = 32;
    let rays = (10..20)
        .map(|b| ChannelRay {
            subarray: b,
            delay: 4.3 + 0.1 * b as f64,
            angle: 0.7,
            gain: C64::new(0.2, -1.0),
        })
        .collect();
    let scene = manual_scene(&sys, rays);
    let ops = DftOperators::new(&sys);
    let ch = synthesize_cir(&scene, &sys, &ops, 1e-4).unwrap();
    let mt = sys.antennas_per_subarray;
    for b in 0..32 {
        let visible = (10..20).contains(&b);
        let energy: f64 = (0..mt).map(|i| ch.x[0].column(b * mt + i).norm_squared()).sum();
        assert_eq!(energy > 0.0, visible, "sub-array {b}");
        if !visible {
            assert!((0..sys.n_taps).all(|l| !ch.support[0][(l, b)]));
        }
    }
}

#[test]
fn los_only_scene_occupies_one_delay_row() {
    let mut sys = single_user_sys();
    sys.subarray_spacing = 1e-3;
    let cfg = SceneConfig {
        clusters_per_user: 0,
        integer_delays: true,
        users: UserPlacement::Fixed(vec![[3.0, 4.0, 10.0]]),
        ..SceneConfig::default()
    };
    let ops = DftOperators::new(&sys);
    let (scene, ch) = generate_channels(&sys, &cfg, &ops).unwrap();
    let rows: Vec<usize> = (0..sys.n_taps)
        .filter(|&l| (0..sys.n_subarrays).any(|b| ch.support[0][(l, b)]))
        .collect();
    assert_eq!(rows.len(), 1, "support rows {rows:?}");
    let visible: Vec<usize> = scene.rays[0].iter().map(|r| r.subarray).collect();
    for b in 0..sys.n_subarrays {
        assert_eq!(ch.support[0][(rows[0], b)], visible.contains(&b));
    }
}

/// Power-weighted mean delay of one user's channel, in taps.
fn mean_delay(x: &CMat) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (l, row) in x.row_iter().enumerate() {
        let p = row.norm_squared();
        num += l as f64 * p;
        den += p;
    }
    num / den
}

#[test]
fn nearer_user_sits_at_earlier_taps() {
    let sys = SystemConfig {
        n_subcarriers: 512,
        n_taps: 64,
        n_subarrays: 256,
        antennas_per_subarray: 1,
        n_users: 2,
        n_groups: 1,
        carrier_freq: 2.6e9,
        subcarrier_spacing: 120e3,
        subarray_spacing: 0.1,
        pilot_power: 512.0,
        noise_var: 0.01,
    };
    let ops = DftOperators::new(&sys);
    let mut earlier = 0;
    for seed in 0..5 {
        let cfg = SceneConfig {
            seed,
            array_center: [0.0, 0.0, 10.0],
            users: UserPlacement::Fixed(vec![[50.0, 70.0, 1.5], [-50.0, 100.0, 1.5]]),
            ..SceneConfig::default()
        };
        let (_, ch) = generate_channels(&sys, &cfg, &ops).unwrap();
        if mean_delay(&ch.x[0]) < mean_delay(&ch.x[1]) {
            earlier += 1;
        }
    }
    assert_eq!(earlier, 5);
}

#[test]
fn scenes_are_deterministic_per_seed() {
    let sys = SystemConfig::desk();
    let ops = DftOperators::new(&sys);
    let cfg = SceneConfig {
        seed: 11,
        ..SceneConfig::default()
    };
    let a = generate_channels(&sys, &cfg, &ops).unwrap();
    let b = generate_channels(&sys, &cfg, &ops).unwrap();
    assert_eq!(a, b);
    let c = generate_channels(&sys, &SceneConfig { seed: 12, ..cfg }, &ops).unwrap();
    assert_ne!(a.1.x, c.1.x);
}

#[test]
fn desk_scene_rays_respect_geometry_bounds() {
    let sys = SystemConfig::desk();
    for seed in 0..5 {
        let scene = generate_scene(&sys, &SceneConfig { seed, ..SceneConfig::default() }).unwrap();
        for rays in &scene.rays {
            assert!(!rays.is_empty());
            for r in rays {
                assert!(r.delay >= 0.0 && r.delay <= (sys.n_taps - 1) as f64);
                assert!(r.angle > 0.0 && r.angle < PI);
                assert!(r.subarray < sys.n_subarrays);
            }
        }
        for s in &scene.scatterers {
            assert!(s.visibility_radius <= sys.n_subarrays);
            assert!(s.visibility_center < sys.n_subarrays);
        }
    }
}

#[test]
fn support_matches_subarray_energy() {
    let sys = SystemConfig::desk();
    let ops = DftOperators::new(&sys);
    let cfg = SceneConfig {
        seed: 3,
        support_threshold: 0.0,
        ..SceneConfig::default()
    };
    let (_, ch) = generate_channels(&sys, &cfg, &ops).unwrap();
    let mt = sys.antennas_per_subarray;
    for (x, s) in ch.x.iter().zip(&ch.support) {
        for l in 0..sys.n_taps {
            for b in 0..sys.n_subarrays {
                let e: f64 = (0..mt).map(|i| x[(l, b * mt + i)].norm_sqr()).sum();
                assert_eq!(s[(l, b)], e > 0.0);
            }
        }
    }
}

#[test]
fn response_is_transform_of_cir() {
    let sys = SystemConfig::desk();
    let ops = DftOperators::new(&sys);
    let (_, ch) = generate_channels(&sys, &SceneConfig::default(), &ops).unwrap();
    for (x, h) in ch.x.iter().zip(&ch.h) {
        let want = &ops.fd * x * ops.fa();
        let err = (h - &want).norm() / want.norm();
        assert!(err < 1e-9);
    }
}

#[test]
fn default_supports_are_clustered() {
    let sys = SystemConfig::desk();
    let ops = DftOperators::new(&sys);
    let mut sizes = Vec::new();
    for seed in 0..20 {
        let (_, ch) = generate_channels(&sys, &SceneConfig { seed, ..SceneConfig::default() }, &ops).unwrap();
        for s in &ch.support {
            sizes.extend(support_components(s));
        }
    }
    let mean = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
    assert!(mean >= 3.0, "mean component size {mean}");
}

#[test]
fn components_of_a_known_mask() {
    let mask = nalgebra::DMatrix::from_row_slice(3, 4, &[
        true, true, false, true,
        false, true, false, true,
        true, false, false, false,
    ]);
    let mut sizes = support_components(&mask);
    sizes.sort();
    assert_eq!(sizes, vec![1, 2, 3]);
}

#[test]
fn normalization_sets_unit_response_power() {
    let ops = DftOperators::with_dims(32, 6, 4, 2);
    let mut x = random_channels(3, 6, 8, 1);
    normalize_channel_power(&mut x).unwrap();
    for xk in &x {
        let h = ops.cir_to_frequency(xk).unwrap();
        assert_abs_diff_eq!(h.norm_squared() / (32.0 * 8.0), 1.0, epsilon = 1e-9);
    }
}

#[test]
fn normalization_is_idempotent_and_scale_free() {
    let mut a = random_channels(2, 4, 6, 2);
    normalize_channel_power(&mut a).unwrap();
    let mut again = a.clone();
    normalize_channel_power(&mut again).unwrap();
    let mut scaled: Vec<CMat> = random_channels(2, 4, 6, 2).iter().map(|m| m * C64::from(7.0)).collect();
    normalize_channel_power(&mut scaled).unwrap();
    for k in 0..2 {
        assert!((&again[k] - &a[k]).norm() < 1e-12);
        assert!((&scaled[k] - &a[k]).norm() < 1e-12);
    }
}

#[test]
fn normalization_rejects_empty_channels() {
    let mut x = vec![CMat::zeros(2, 2)];
    assert!(matches!(normalize_channel_power(&mut x), Err(Error::Config(_))));
}

#[test]
fn support_mask_applies_relative_threshold() {
    let mut x = CMat::zeros(2, 4);
    x[(0, 0)] = C64::new(1.0, 0.0);
    x[(1, 3)] = C64::new(1e-3, 0.0);
    let strict = support_mask(&x, 2, 0.0);
    assert!(strict[(0, 0)] && strict[(1, 1)] && !strict[(0, 1)]);
    let loose = support_mask(&x, 2, 1e-4);
    assert!(loose[(0, 0)] && !loose[(1, 1)]);
}

#[test]
fn delays_beyond_the_prefix_are_rejected() {
    let mut sys = SystemConfig::desk();
    sys.subcarrier_spacing = 30e6;
    assert!(matches!(
        generate_scene(&sys, &SceneConfig::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn scene_config_errors() {
    let sys = SystemConfig::desk();
    let bad = [
        SceneConfig { common_fraction: 1.5, ..SceneConfig::default() },
        SceneConfig { los: false, clusters_per_user: 0, ..SceneConfig::default() },
        SceneConfig { users: UserPlacement::Fixed(vec![[0.0; 3]]), ..SceneConfig::default() },
        SceneConfig { cluster_power_range_db: -1.0, ..SceneConfig::default() },
    ];
    for cfg in bad {
        assert!(generate_scene(&sys, &cfg).is_err());
    }
}

#[test]
fn channel_file_roundtrip() {
    let sys = SystemConfig::desk();
    let cfg = SceneConfig { seed: 4, ..SceneConfig::default() };
    let ops = DftOperators::new(&sys);
    let (scene, ch) = generate_channels(&sys, &cfg, &ops).unwrap();
    let file = ChannelFile::new(&sys, &cfg, &scene, Some(&ch));
    let back = ChannelFile::from_json(&file.to_json().unwrap()).unwrap();
    assert_eq!(back.seed, 4);
    assert_eq!(back.scene, scene);
    assert_eq!(back.system, sys);
    let rebuilt = synthesize_cir(&back.scene, &back.system, &ops, back.scene_config.support_threshold).unwrap();
    assert_eq!(rebuilt.support, ch.support);
    let bad = file.to_json().unwrap().replace("xlmimo-channel/1", "other/9");
    assert!(ChannelFile::from_json(&bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn steering_vectors_have_unit_norm(angle in 1e-3f64..(PI - 1e-3), m in 1usize..17) {
        prop_assert!((steering_vector(angle, m).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalized_response_power_is_one(seed in any::<u64>(), l in 1usize..6, m_bar in 1usize..4, m_tilde in 1usize..4) {
        let n = 4 * l;
        let ops = DftOperators::with_dims(n, l, m_bar, m_tilde);
        let mut x = random_channels(2, l, m_bar * m_tilde, seed);
        normalize_channel_power(&mut x).unwrap();
        for xk in &x {
            let h = ops.cir_to_frequency(xk).unwrap();
            let p = h.norm_squared() / (n * m_bar * m_tilde) as f64;
            prop_assert!((p - 1.0).abs() < 1e-9);
        }
    }
}
