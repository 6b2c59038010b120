#![allow(dead_code)]

use std::collections::HashMap;

use xlmimo::channel::{generate_channels, ChannelRealization, SceneConfig};
use xlmimo::lmmse::Problem;
use xlmimo::model::{CMat, DftOperators, SystemConfig};
use xlmimo::optimizer::{optimize_pattern, OptimizerConfig, PatternProblem};
use xlmimo::pilots::{group_users, GroupPattern, PilotAllocation};
use xlmimo::rng::cell_rng;

pub struct Scenario {
    pub sys: SystemConfig,
    pub ops: DftOperators,
    pub channels: ChannelRealization,
    pub alloc: PilotAllocation,
    pub problem: Problem,
}

/// Optimized patterns keyed by group sizes, for one fixed system.
#[derive(Default)]
pub struct Patterns(HashMap<Vec<usize>, GroupPattern>);

impl Patterns {
    pub fn get(&mut self, sys: &SystemConfig, sizes: &[usize]) -> GroupPattern {
        self.0
            .entry(sizes.to_vec())
            .or_insert_with(|| {
                let p = PatternProblem {
                    n_subcarriers: sys.n_subcarriers,
                    n_taps: sys.n_taps,
                    power: sys.pilot_power,
                    noise_var: sys.noise_var,
                    prior_var: 1.0 / sys.n_taps as f64,
                    group_sizes: sizes.to_vec(),
                };
                optimize_pattern(&p, &OptimizerConfig::default()).unwrap().pattern
            })
            .clone()
    }
}

/// Seeded random pattern. Combs alias the cyclic shifts of a pair onto one
/// code and contiguous blocks lose delay resolution.
pub fn random_pattern(n: usize, g: usize, l: usize) -> GroupPattern {
    GroupPattern::random(n, g, l, &mut cell_rng(99, (n * 31 + g) as u64)).unwrap()
}

/// Clustered scene, grouped users and received pilots for one seed.
/// Without a pattern cache the groups get a fixed random pattern.
pub fn scenario(sys: &SystemConfig, seed: u64, patterns: Option<&mut Patterns>) -> Scenario {
    let ops = DftOperators::new(sys);
    let scene_cfg = SceneConfig {
        seed,
        ..SceneConfig::default()
    };
    let (scene, channels) = generate_channels(sys, &scene_cfg, &ops).unwrap();
    let groups = group_users(&scene.users, sys.n_groups).unwrap();
    let pattern = match patterns {
        Some(cache) => {
            let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
            cache.get(sys, &sizes)
        }
        None => random_pattern(sys.n_subcarriers, sys.n_groups, sys.n_taps),
    };
    let alloc = PilotAllocation::nfdcdm(&pattern, &groups, sys.pilot_power).unwrap();
    with_allocation(sys, channels, alloc, seed)
}

pub fn with_allocation(sys: &SystemConfig, channels: ChannelRealization, alloc: PilotAllocation, seed: u64) -> Scenario {
    let ops = DftOperators::new(sys);
    let y = alloc.transmit(&channels.h, sys.noise_var, &mut cell_rng(seed, 1)).unwrap();
    let problem = Problem::new(&ops, &alloc, &y, sys.noise_var).unwrap();
    Scenario {
        sys: sys.clone(),
        ops,
        channels,
        alloc,
        problem,
    }
}

pub fn x_nmse(est: &[CMat], truth: &[CMat]) -> f64 {
    let num: f64 = est.iter().zip(truth).map(|(a, b)| (a - b).norm_squared()).sum();
    let den: f64 = truth.iter().map(|b| b.norm_squared()).sum();
    num / den
}

pub fn db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Small system with the desk array geometry.
pub fn small_system(n: usize, l: usize, k: usize, g: usize, snr_db: f64) -> SystemConfig {
    SystemConfig {
        n_subcarriers: n,
        n_taps: l,
        n_users: k,
        n_groups: g,
        pilot_power: n as f64,
        ..SystemConfig::desk()
    }
    .with_snr_db(snr_db)
}

pub fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}
