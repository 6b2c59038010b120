//! Experiment descriptions as read from JSON and adjusted by CLI flags.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use xlmimo::baselines::{OmpConfig, VampConfig};
use xlmimo::channel::SceneConfig;
use xlmimo::model::SystemConfig;
use xlmimo::optimizer::OptimizerConfig;
use xlmimo::turbo::EstimatorConfig;

use crate::BenchError;

/// Pilot arrangement under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    /// N-FD-CDM with the optimized group pattern.
    NfdcdmOpt,
    /// N-FD-CDM with a uniformly random feasible pattern per seed.
    NfdcdmRandom,
    /// N-FD-CDM with the interleaved comb pattern.
    NfdcdmPeriodic,
    Ocdm,
    Srfdm,
    Nocdm,
    /// Up to eight cyclic-shift users per OFDM symbol over several symbols.
    Orthogonal,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 7] = [
        SchemeKind::NfdcdmOpt,
        SchemeKind::NfdcdmRandom,
        SchemeKind::NfdcdmPeriodic,
        SchemeKind::Ocdm,
        SchemeKind::Srfdm,
        SchemeKind::Nocdm,
        SchemeKind::Orthogonal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::NfdcdmOpt => "nfdcdm-opt",
            SchemeKind::NfdcdmRandom => "nfdcdm-random",
            SchemeKind::NfdcdmPeriodic => "nfdcdm-periodic",
            SchemeKind::Ocdm => "ocdm",
            SchemeKind::Srfdm => "srfdm",
            SchemeKind::Nocdm => "nocdm",
            SchemeKind::Orthogonal => "orthogonal",
        }
    }

    /// Whether the pilot-ratio axis restricts this scheme's subcarriers.
    pub fn grouped(self) -> bool {
        matches!(
            self,
            SchemeKind::NfdcdmOpt | SchemeKind::NfdcdmRandom | SchemeKind::NfdcdmPeriodic
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    TurboMrf,
    VampBg,
    Lmmse,
    LmmseGenie,
    Omp,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::TurboMrf,
        Algorithm::VampBg,
        Algorithm::Lmmse,
        Algorithm::LmmseGenie,
        Algorithm::Omp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::TurboMrf => "turbo-mrf",
            Algorithm::VampBg => "vamp-bg",
            Algorithm::Lmmse => "lmmse",
            Algorithm::LmmseGenie => "lmmse-genie",
            Algorithm::Omp => "omp",
        }
    }
}

/// Display label of a scheme and algorithm pair in the output tables.
pub fn label(scheme: SchemeKind, algo: Algorithm) -> String {
    match (scheme, algo) {
        (SchemeKind::Ocdm, Algorithm::VampBg) => "Turbo/VAMP (CDM)".into(),
        (SchemeKind::Orthogonal, Algorithm::LmmseGenie) => "NR Orthogonal".into(),
        _ => format!("{}/{}", scheme.name(), algo.name()),
    }
}

macro_rules! named_enum_traits {
    ($t:ty) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $t {
            type Err = BenchError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                <$t>::ALL
                    .into_iter()
                    .find(|v| v.name() == s)
                    .ok_or_else(|| BenchError::Spec(format!("unknown name {s:?}")))
            }
        }
    };
}

named_enum_traits!(SchemeKind);
named_enum_traits!(Algorithm);

/// Swept quantity and its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "kebab-case")]
pub enum Sweep {
    SnrDb(Vec<f64>),
    Users(Vec<usize>),
    /// Share of the subcarriers open to the grouped schemes.
    PilotRatio(Vec<f64>),
}

impl Sweep {
    pub fn axis(&self) -> &'static str {
        match self {
            Sweep::SnrDb(_) => "snr-db",
            Sweep::Users(_) => "users",
            Sweep::PilotRatio(_) => "pilot-ratio",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Sweep::SnrDb(v) | Sweep::PilotRatio(v) => v.len(),
            Sweep::Users(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, i: usize) -> f64 {
        match self {
            Sweep::SnrDb(v) | Sweep::PilotRatio(v) => v[i],
            Sweep::Users(v) => v[i] as f64,
        }
    }
}

/// Everything needed to replay an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub system: SystemConfig,
    pub scene: SceneConfig,
    pub schemes: Vec<SchemeKind>,
    pub algorithms: Vec<Algorithm>,
    pub sweep: Sweep,
    /// Monte Carlo seeds per sweep value.
    pub seeds: u64,
    pub master_seed: u64,
    pub out: Option<PathBuf>,
    pub estimator: EstimatorConfig,
    pub vamp: VampConfig,
    pub omp: OmpConfig,
    pub optimizer: OptimizerConfig,
    /// Users per OFDM symbol for the orthogonal multi-symbol scheme.
    pub users_per_symbol: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            system: SystemConfig::desk(),
            scene: SceneConfig::default(),
            schemes: vec![SchemeKind::NfdcdmOpt],
            algorithms: Algorithm::ALL.to_vec(),
            sweep: Sweep::SnrDb(vec![0.0, 10.0, 20.0]),
            seeds: 20,
            master_seed: 0,
            out: None,
            estimator: EstimatorConfig::default(),
            vamp: VampConfig::default(),
            omp: OmpConfig::default(),
            optimizer: OptimizerConfig::default(),
            users_per_symbol: 8,
        }
    }
}

impl ExperimentSpec {
    pub fn from_json(s: &str) -> Result<Self, BenchError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String, BenchError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let fail = |m: &str| Err(BenchError::Spec(m.into()));
        if self.sweep.is_empty() {
            return fail("the sweep has no values");
        }
        if self.seeds == 0 {
            return fail("at least one seed is required");
        }
        if self.schemes.is_empty() || self.algorithms.is_empty() {
            return fail("no scheme or no algorithm selected");
        }
        if self.users_per_symbol == 0 {
            return fail("users per symbol must be positive");
        }
        match &self.sweep {
            Sweep::SnrDb(v) if v.iter().any(|x| !x.is_finite()) => fail("SNR values must be finite"),
            Sweep::Users(v) if v.contains(&0) => fail("user counts must be positive"),
            Sweep::PilotRatio(v) if v.iter().any(|x| !(*x > 0.0 && *x <= 1.0)) => {
                fail("pilot ratios must lie in (0, 1]")
            }
            _ => {
                let mut sys = self.system.clone();
                if let Sweep::Users(v) = &self.sweep {
                    sys.n_users = v.iter().copied().max().unwrap_or(sys.n_users);
                    sys.n_groups = sys.n_groups.min(sys.n_users);
                }
                sys.validate()?;
                self.estimator.validate()?;
                Ok(())
            }
        }
    }
}
