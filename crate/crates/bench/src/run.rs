//! Monte Carlo execution of an [`ExperimentSpec`].
//!
//! A cell is one (sweep value, seed) pair. Cells run on the rayon pool and
//! the records come back in (sweep value, seed, scheme, algorithm) order.
//! The random streams of a cell depend on the master seed and the seed
//! index only, so every sweep value sees the same scene, noise shape and
//! random patterns, and the noise is rescaled with the SNR.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use xlmimo::baselines::{lmmse_estimate, lmmse_genie_estimate, omp_estimate, vamp_bg_estimate};
use xlmimo::channel::{generate_channels, ChannelRealization, Scene};
use xlmimo::lmmse::Problem;
use xlmimo::model::{nmse, DftOperators, SystemConfig};
use xlmimo::optimizer::{optimize_pattern, PatternProblem};
use xlmimo::pilots::{group_users, GroupPattern, PilotAllocation};
use xlmimo::rng::cell_rng;
use xlmimo::turbo::run_turbo_mrf;

use crate::spec::{label, Algorithm, ExperimentSpec, SchemeKind, Sweep};
use crate::BenchError;

/// Random streams of a seed, one per purpose.
const STREAM_SCENE: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_PATTERN: u64 = 2;
const STREAM_PHASES: u64 = 3;
const STREAMS_PER_SEED: u64 = 16;

/// One estimator run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub sweep_axis: String,
    pub sweep_value: f64,
    pub seed: u64,
    pub scheme: SchemeKind,
    pub algorithm: Algorithm,
    pub label: String,
    /// Pilot share of the subcarrier-symbol grid actually used.
    pub pilot_ratio: Option<f64>,
    pub nmse: Option<f64>,
    /// First converged iteration of the turbo estimator.
    pub iterations: Option<usize>,
    pub clamps: usize,
    pub wall_time_s: f64,
    /// Per-iteration NMSE of iterative estimators.
    pub nmse_trace: Vec<f64>,
    pub error: Option<String>,
}

/// The `n` subcarriers open to pilots out of `total`, evenly spread.
pub fn active_subcarriers(total: usize, ratio: f64) -> Vec<bool> {
    let n = ((ratio * total as f64).round() as usize).clamp(1, total);
    let mut mask = vec![false; total];
    for i in 0..n {
        mask[i * total / n] = true;
    }
    mask
}

/// Comb over the open subcarriers: the `i`-th open one joins group `i mod G`.
pub fn periodic_on(active: &[bool], g: usize) -> GroupPattern {
    let mut assign = vec![usize::MAX; active.len()];
    let mut i = 0;
    for (n, &open) in active.iter().enumerate() {
        if open {
            assign[n] = i % g;
            i += 1;
        }
    }
    GroupPattern::from_assignment(&assign, g)
}

/// Uniform group draw per open subcarrier, redrawn until each group has
/// `min_per_group` of them.
pub fn random_on<R: Rng + ?Sized>(
    active: &[bool],
    g: usize,
    min_per_group: usize,
    rng: &mut R,
) -> Result<GroupPattern, BenchError> {
    let open = active.iter().filter(|&&a| a).count();
    if g * min_per_group > open {
        return Err(BenchError::Core(xlmimo::Error::InfeasiblePattern(format!(
            "{g} groups of at least {min_per_group} do not fit in {open} subcarriers"
        ))));
    }
    loop {
        let assign: Vec<usize> = active
            .iter()
            .map(|&a| if a { rng.gen_range(0..g) } else { usize::MAX })
            .collect();
        let p = GroupPattern::from_assignment(&assign, g);
        if (0..g).all(|gi| p.count(gi) >= min_per_group) {
            return Ok(p);
        }
    }
}

type PatternCache = Mutex<HashMap<String, Arc<GroupPattern>>>;

/// Cell-level view of the experiment after applying the sweep value.
struct Cell<'a> {
    spec: &'a ExperimentSpec,
    sys: SystemConfig,
    active: Vec<bool>,
    sweep_value: f64,
    seed: u64,
}

impl<'a> Cell<'a> {
    fn new(spec: &'a ExperimentSpec, sweep_index: usize, seed: u64) -> Self {
        let mut sys = spec.system.clone();
        let mut active = vec![true; sys.n_subcarriers];
        let v = spec.sweep.value(sweep_index);
        match &spec.sweep {
            Sweep::SnrDb(s) => sys = sys.with_snr_db(s[sweep_index]),
            Sweep::Users(k) => {
                sys.n_users = k[sweep_index];
                sys.n_groups = sys.n_groups.min(sys.n_users);
            }
            Sweep::PilotRatio(r) => active = active_subcarriers(sys.n_subcarriers, r[sweep_index]),
        }
        Self {
            spec,
            sys,
            active,
            sweep_value: v,
            seed,
        }
    }

    fn rng(&self, stream: u64) -> impl Rng {
        cell_rng(self.spec.master_seed, self.seed * STREAMS_PER_SEED + stream)
    }

    fn optimized(&self, groups: &[Vec<usize>], cache: &PatternCache) -> Result<Arc<GroupPattern>, BenchError> {
        let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        let active_key: String = self.active.iter().map(|&a| if a { '1' } else { '0' }).collect();
        let key = format!(
            "{:?}|{:e}|{}|{active_key}",
            sizes,
            self.sys.noise_var,
            self.sys.n_taps
        );
        if let Some(p) = cache.lock().expect("pattern cache poisoned").get(&key) {
            return Ok(p.clone());
        }
        let problem = PatternProblem {
            n_subcarriers: self.sys.n_subcarriers,
            n_taps: self.sys.n_taps,
            power: self.sys.pilot_power,
            noise_var: self.sys.noise_var,
            prior_var: 1.0 / self.sys.n_taps as f64,
            group_sizes: sizes,
        };
        let mut cfg = self.spec.optimizer.clone();
        if self.active.iter().any(|a| !a) {
            cfg.active = Some(self.active.clone());
        }
        let pattern = Arc::new(optimize_pattern(&problem, &cfg)?.pattern);
        cache
            .lock()
            .expect("pattern cache poisoned")
            .entry(key)
            .or_insert_with(|| pattern.clone());
        Ok(pattern)
    }

    fn allocation(
        &self,
        scheme: SchemeKind,
        scene: &Scene,
        cache: &PatternCache,
    ) -> Result<PilotAllocation, BenchError> {
        let sys = &self.sys;
        let (k, n, p) = (sys.n_users, sys.n_subcarriers, sys.pilot_power);
        let grouped = |pattern: &GroupPattern, groups: &[Vec<usize>]| PilotAllocation::nfdcdm(pattern, groups, p);
        Ok(match scheme {
            SchemeKind::NfdcdmOpt => {
                let groups = group_users(&scene.users, sys.n_groups)?;
                grouped(&*self.optimized(&groups, cache)?, &groups)?
            }
            SchemeKind::NfdcdmRandom => {
                let groups = group_users(&scene.users, sys.n_groups)?;
                let pattern = random_on(&self.active, sys.n_groups, sys.n_taps, &mut self.rng(STREAM_PATTERN))?;
                grouped(&pattern, &groups)?
            }
            SchemeKind::NfdcdmPeriodic => {
                let groups = group_users(&scene.users, sys.n_groups)?;
                grouped(&periodic_on(&self.active, sys.n_groups), &groups)?
            }
            SchemeKind::Ocdm => PilotAllocation::o_cdm(k, n, p)?,
            SchemeKind::Srfdm => PilotAllocation::sr_fdm(k, n, p)?,
            SchemeKind::Nocdm => PilotAllocation::no_cdm(k, n, p, &mut self.rng(STREAM_PHASES))?,
            SchemeKind::Orthogonal => {
                PilotAllocation::orthogonal_multi_symbol(k, n, p, self.spec.users_per_symbol)?
            }
        })
    }

    fn record(&self, scheme: SchemeKind, algorithm: Algorithm) -> ResultRecord {
        ResultRecord {
            sweep_axis: self.spec.sweep.axis().into(),
            sweep_value: self.sweep_value,
            seed: self.seed,
            scheme,
            algorithm,
            label: label(scheme, algorithm),
            pilot_ratio: None,
            nmse: None,
            iterations: None,
            clamps: 0,
            wall_time_s: 0.0,
            nmse_trace: Vec::new(),
            error: None,
        }
    }

    fn run_algorithm(
        &self,
        algorithm: Algorithm,
        problem: &Problem,
        ops: &DftOperators,
        ch: &ChannelRealization,
        rec: &mut ResultRecord,
    ) -> Result<(), BenchError> {
        let spec = self.spec;
        let h = match algorithm {
            Algorithm::TurboMrf => {
                let out = run_turbo_mrf(problem, ops, &spec.estimator, Some(&ch.x))?;
                rec.iterations = out.diagnostics.converged_at;
                rec.clamps = out.diagnostics.clamps.iter().sum();
                rec.nmse_trace = out.diagnostics.nmse;
                out.h
            }
            Algorithm::VampBg => {
                let out = vamp_bg_estimate(problem, ops, &spec.vamp, Some(&ch.x))?;
                rec.nmse_trace = out.nmse_trace;
                out.h
            }
            Algorithm::Lmmse => lmmse_estimate(problem, ops, None)?.h,
            Algorithm::LmmseGenie => lmmse_genie_estimate(problem, ops, &ch.x)?.h,
            Algorithm::Omp => omp_estimate(problem, ops, &spec.omp)?.h,
        };
        rec.nmse = Some(nmse(&h, &ch.h)?);
        Ok(())
    }

    fn run(&self, cache: &PatternCache) -> Vec<ResultRecord> {
        let spec = self.spec;
        let mut out = Vec::with_capacity(spec.schemes.len() * spec.algorithms.len());
        let fail_all = |out: &mut Vec<ResultRecord>, schemes: &[SchemeKind], e: &BenchError| {
            for &s in schemes {
                for &a in &spec.algorithms {
                    let mut r = self.record(s, a);
                    r.error = Some(e.to_string());
                    out.push(r);
                }
            }
        };
        let ops = DftOperators::new(&self.sys);
        let mut scene_cfg = spec.scene.clone();
        scene_cfg.seed = self.rng(STREAM_SCENE).gen();
        let (scene, ch) = match self.sys.validate().map_err(BenchError::from).and_then(|_| {
            generate_channels(&self.sys, &scene_cfg, &ops).map_err(BenchError::from)
        }) {
            Ok(v) => v,
            Err(e) => {
                fail_all(&mut out, &spec.schemes, &e);
                return out;
            }
        };
        for &scheme in &spec.schemes {
            let prepared = self.allocation(scheme, &scene, cache).and_then(|alloc| {
                let y = alloc.transmit(&ch.h, self.sys.noise_var, &mut self.rng(STREAM_NOISE))?;
                let problem = Problem::new(&ops, &alloc, &y, self.sys.noise_var)?;
                Ok((alloc.pilot_ratio(), problem))
            });
            let (ratio, problem) = match prepared {
                Ok(v) => v,
                Err(e) => {
                    fail_all(&mut out, &[scheme], &e);
                    continue;
                }
            };
            for &algorithm in &spec.algorithms {
                let mut rec = self.record(scheme, algorithm);
                rec.pilot_ratio = Some(ratio);
                let t0 = Instant::now();
                if let Err(e) = self.run_algorithm(algorithm, &problem, &ops, &ch, &mut rec) {
                    rec.error = Some(e.to_string());
                    rec.nmse = None;
                }
                rec.wall_time_s = t0.elapsed().as_secs_f64();
                out.push(rec);
            }
        }
        out
    }
}

/// Run every cell of `spec`. Failures inside a cell are stored on its
/// records and do not stop the run.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ResultRecord>, BenchError> {
    spec.validate()?;
    let cache = PatternCache::default();
    let cells: Vec<(usize, u64)> = (0..spec.sweep.len())
        .flat_map(|i| (0..spec.seeds).map(move |s| (i, s)))
        .collect();
    let records: Vec<Vec<ResultRecord>> = cells
        .par_iter()
        .map(|&(i, s)| Cell::new(spec, i, s).run(&cache))
        .collect();
    Ok(records.into_iter().flatten().collect())
}
