//! Geometric cluster channel for a sub-array XL-MIMO uplink.
//!
//! Each user sees a line-of-sight path and a set of scattering clusters.
//! Every cluster is visible to a contiguous window of sub-arrays whose
//! centre follows the cluster's direction as seen from the array, so users
//! in different places light up different parts of the array. Delays come
//! from path lengths, fractional delays are spread over neighbouring taps
//! with a windowed sinc, and a share of the clusters is common to all users.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CMat, CVec, DftOperators, SystemConfig, C64, SPEED_OF_LIGHT};
use crate::rng::complex_normal;

pub type Point = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum UserPlacement {
    /// Users alternate between discs; user `k` lands in disc `k % len`.
    Discs { centers: Vec<Point>, radius: f64 },
    Fixed(Vec<Point>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    pub array_center: Point,
    pub users: UserPlacement,
    /// Scattering clusters seen by each user, common ones included.
    pub clusters_per_user: usize,
    /// Share of each user's clusters that are common to all users.
    pub common_fraction: f64,
    pub rays_per_cluster: usize,
    /// Distance range between a user and its private scatterers, metres.
    pub scatter_distance: [f64; 2],
    /// Common scatterers are dropped within this radius of the user centroid.
    pub common_radius: f64,
    /// Excess delay spread inside a cluster, taps.
    pub cluster_delay_spread: f64,
    /// Standard deviation of the intra-cluster angle offsets, radians.
    pub angle_spread: f64,
    /// Visibility radius range as fractions of the sub-array count.
    pub visibility_radius: [f64; 2],
    /// Cluster powers are drawn log-uniformly over this many dB.
    pub cluster_power_range_db: f64,
    pub los: bool,
    /// Line-of-sight power relative to the strongest cluster.
    pub los_power: f64,
    /// Round every path delay to the nearest tap.
    pub integer_delays: bool,
    /// Support threshold relative to the user's strongest grid cell.
    pub support_threshold: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            array_center: [0.0, 0.0, 10.0],
            users: UserPlacement::Discs {
                centers: vec![[20.0, 10.0, 1.5], [-20.0, -18.0, 1.5]],
                radius: 5.0,
            },
            clusters_per_user: 4,
            common_fraction: 0.3,
            rays_per_cluster: 6,
            scatter_distance: [4.0, 15.0],
            common_radius: 10.0,
            cluster_delay_spread: 2.0,
            angle_spread: 0.05,
            visibility_radius: [1.0 / 8.0, 1.0 / 3.0],
            cluster_power_range_db: 10.0,
            los: true,
            los_power: 2.0,
            integer_delays: false,
            support_threshold: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub position: Point,
    pub visibility_center: usize,
    pub visibility_radius: usize,
    /// `None` for a common scatterer.
    pub owner: Option<usize>,
}

impl Scatterer {
    pub fn visible(&self, subarray: usize) -> bool {
        subarray.abs_diff(self.visibility_center) <= self.visibility_radius
    }
}

/// One path between a user and one sub-array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRay {
    pub subarray: usize,
    /// Delay in (possibly fractional) taps.
    pub delay: f64,
    /// Arrival angle against the array axis, radians in `(0, pi)`.
    pub angle: f64,
    pub gain: C64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub users: Vec<Point>,
    pub subarray_centers: Vec<Point>,
    pub scatterers: Vec<Scatterer>,
    /// Rays per user.
    pub rays: Vec<Vec<ChannelRay>>,
}

/// Delay-beam channels, their frequency responses and true supports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    /// `X_k`, L x M.
    pub x: Vec<CMat>,
    /// `H_k`, N x M.
    pub h: Vec<CMat>,
    /// Per user, L x M̄, `true` where the sub-array aggregate power is
    /// above the support threshold.
    pub support: Vec<DMatrix<bool>>,
}

/// Serialized scene with the configuration needed to rebuild it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelFile {
    pub format: String,
    pub seed: u64,
    pub system: SystemConfig,
    pub scene_config: SceneConfig,
    pub scene: Scene,
    pub realization: Option<ChannelRealization>,
}

pub const CHANNEL_FORMAT: &str = "xlmimo-channel/1";

impl ChannelFile {
    pub fn new(
        system: &SystemConfig,
        scene_config: &SceneConfig,
        scene: &Scene,
        realization: Option<&ChannelRealization>,
    ) -> Self {
        Self {
            format: CHANNEL_FORMAT.into(),
            seed: scene_config.seed,
            system: system.clone(),
            scene_config: scene_config.clone(),
            scene: scene.clone(),
            realization: realization.cloned(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(s)?;
        if f.format != CHANNEL_FORMAT {
            return Err(Error::Config(format!("unknown channel format {}", f.format)));
        }
        Ok(f)
    }
}

/// `f(phi) = [1, e^{-j pi cos phi}, ..., e^{-j pi (M̃-1) cos phi}] / sqrt(M̃)`.
pub fn steering_vector(angle: f64, m_tilde: usize) -> CVec {
    let s = 1.0 / (m_tilde as f64).sqrt();
    let c = angle.cos();
    CVec::from_fn(m_tilde, |m, _| C64::from_polar(s, -PI * m as f64 * c))
}

/// Half-width of the fractional-delay pulse, in taps.
pub const PULSE_HALF_WIDTH: f64 = 2.0;

/// Hann-windowed sinc used to place a fractional delay on the tap grid.
pub fn delay_pulse(d: f64) -> f64 {
    let edge = PULSE_HALF_WIDTH + 0.5;
    if d.abs() >= edge {
        return 0.0;
    }
    let sinc = if d == 0.0 { 1.0 } else { (PI * d).sin() / (PI * d) };
    let w = (PI * d / (2.0 * edge)).cos();
    sinc * w * w
}

fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Angle of arrival at `at` for a source at `from`, measured from the array (x) axis.
fn arrival_angle(from: &Point, at: &Point) -> f64 {
    let d = dist(from, at);
    if d == 0.0 {
        return PI / 2.0;
    }
    ((from[0] - at[0]) / d).clamp(-1.0, 1.0).acos()
}

fn uniform_in_disc(rng: &mut ChaCha8Rng, center: &Point, radius: f64) -> Point {
    let r = radius * rng.gen::<f64>().sqrt();
    let t = 2.0 * PI * rng.gen::<f64>();
    [center[0] + r * t.cos(), center[1] + r * t.sin(), center[2]]
}

fn validate_scene(sys: &SystemConfig, cfg: &SceneConfig) -> Result<()> {
    sys.validate()?;
    let fail = |m: &str| Err(Error::Config(m.into()));
    if !(0.0..=1.0).contains(&cfg.common_fraction) {
        return fail("common fraction must lie in [0, 1]");
    }
    if cfg.rays_per_cluster == 0 && cfg.clusters_per_user > 0 {
        return fail("clusters need at least one ray");
    }
    if !cfg.los && cfg.clusters_per_user == 0 {
        return fail("every user needs at least one path");
    }
    if cfg.scatter_distance[0] < 0.0 || cfg.scatter_distance[1] < cfg.scatter_distance[0] {
        return fail("bad scatter distance range");
    }
    if cfg.visibility_radius[0] < 0.0 || cfg.visibility_radius[1] < cfg.visibility_radius[0] {
        return fail("bad visibility radius range");
    }
    if cfg.cluster_delay_spread < 0.0
        || cfg.angle_spread < 0.0
        || cfg.los_power < 0.0
        || cfg.cluster_power_range_db < 0.0
    {
        return fail("spreads and powers must be non-negative");
    }
    if !(cfg.support_threshold >= 0.0 && cfg.support_threshold < 1.0) {
        return fail("support threshold must lie in [0, 1)");
    }
    match &cfg.users {
        UserPlacement::Discs { centers, radius } => {
            if centers.is_empty() || *radius < 0.0 {
                return fail("user discs need centres and a non-negative radius");
            }
        }
        UserPlacement::Fixed(p) => {
            if p.len() != sys.n_users {
                return Err(Error::Config(format!(
                    "{} fixed positions for {} users",
                    p.len(),
                    sys.n_users
                )));
            }
        }
    }
    Ok(())
}

/// Draw user positions, scatterers and per-sub-array rays.
pub fn generate_scene(sys: &SystemConfig, cfg: &SceneConfig) -> Result<Scene> {
    validate_scene(sys, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k_users = sys.n_users;
    let m_bar = sys.n_subarrays;
    let ts = sys.sample_period();
    let lambda = sys.wavelength();
    let l_max = (sys.n_taps - 1) as f64;

    let users: Vec<Point> = match &cfg.users {
        UserPlacement::Discs { centers, radius } => (0..k_users)
            .map(|k| uniform_in_disc(&mut rng, &centers[k % centers.len()], *radius))
            .collect(),
        UserPlacement::Fixed(p) => p.clone(),
    };

    let c = cfg.array_center;
    let subarray_centers: Vec<Point> = (0..m_bar)
        .map(|b| {
            let off = (b as f64 - (m_bar as f64 - 1.0) / 2.0) * sys.subarray_spacing;
            [c[0] + off, c[1], c[2]]
        })
        .collect();

    let visibility = |rng: &mut ChaCha8Rng, source: &Point| -> (usize, usize) {
        let cos = arrival_angle(source, &c).cos();
        let center = ((1.0 - cos) / 2.0 * (m_bar as f64 - 1.0)).round() as usize;
        let lo = cfg.visibility_radius[0] * m_bar as f64;
        let hi = cfg.visibility_radius[1] * m_bar as f64;
        let r = (lo + (hi - lo) * rng.gen::<f64>()).round() as usize;
        (center.min(m_bar - 1), r)
    };

    let n_common = (cfg.common_fraction * cfg.clusters_per_user as f64).round() as usize;
    let n_private = cfg.clusters_per_user - n_common;

    let mut scatterers = Vec::new();
    let centroid = {
        let mut s = [0.0; 3];
        for u in &users {
            for i in 0..3 {
                s[i] += u[i] / k_users as f64;
            }
        }
        s
    };
    for _ in 0..n_common {
        let position = uniform_in_disc(&mut rng, &centroid, cfg.common_radius);
        let (vc, vr) = visibility(&mut rng, &position);
        scatterers.push(Scatterer {
            position,
            visibility_center: vc,
            visibility_radius: vr,
            owner: None,
        });
    }
    for (k, u) in users.iter().enumerate() {
        for _ in 0..n_private {
            let [lo, hi] = cfg.scatter_distance;
            let d = lo + (hi - lo) * rng.gen::<f64>();
            let t = 2.0 * PI * rng.gen::<f64>();
            let position = [u[0] + d * t.cos(), u[1] + d * t.sin(), u[2]];
            let (vc, vr) = visibility(&mut rng, &position);
            scatterers.push(Scatterer {
                position,
                visibility_center: vc,
                visibility_radius: vr,
                owner: Some(k),
            });
        }
    }

    let to_taps = |path: f64| -> f64 {
        let tau = path / SPEED_OF_LIGHT / ts;
        if cfg.integer_delays {
            tau.round()
        } else {
            tau
        }
    };

    let mut rays: Vec<Vec<ChannelRay>> = vec![Vec::new(); k_users];
    for (k, u) in users.iter().enumerate() {
        if cfg.los {
            let (vc, vr) = visibility(&mut rng, u);
            let amp = complex_normal(&mut rng, cfg.los_power);
            for (b, sc) in subarray_centers.iter().enumerate() {
                if b.abs_diff(vc) > vr {
                    continue;
                }
                let path = dist(u, sc);
                rays[k].push(ChannelRay {
                    subarray: b,
                    delay: to_taps(path),
                    angle: arrival_angle(u, sc),
                    gain: amp * C64::from_polar(1.0, -2.0 * PI * path / lambda),
                });
            }
        }
        for s in scatterers.iter().filter(|s| s.owner.is_none() || s.owner == Some(k)) {
            let power = 10f64.powf(-cfg.cluster_power_range_db / 10.0 * rng.gen::<f64>());
            let leg = dist(u, &s.position);
            for _ in 0..cfg.rays_per_cluster {
                let excess = cfg.cluster_delay_spread * rng.gen::<f64>();
                let dphi = cfg.angle_spread * rng.sample::<f64, _>(rand_distr::StandardNormal);
                let amp = complex_normal(&mut rng, power / cfg.rays_per_cluster as f64);
                for (b, sc) in subarray_centers.iter().enumerate() {
                    if !s.visible(b) {
                        continue;
                    }
                    let path = leg + dist(&s.position, sc);
                    let delay = to_taps(path + excess * SPEED_OF_LIGHT * ts);
                    let angle = (arrival_angle(&s.position, sc) + dphi).clamp(1e-6, PI - 1e-6);
                    rays[k].push(ChannelRay {
                        subarray: b,
                        delay,
                        angle,
                        gain: amp * C64::from_polar(1.0, -2.0 * PI * path / lambda),
                    });
                }
            }
        }
        if rays[k].is_empty() {
            return Err(Error::Config(format!("user {k} has no visible path")));
        }
        if let Some(r) = rays[k].iter().find(|r| r.delay > l_max) {
            return Err(Error::Config(format!(
                "user {k} has a path at {:.2} taps, beyond L - 1 = {}",
                r.delay, l_max
            )));
        }
    }

    Ok(Scene {
        users,
        subarray_centers,
        scatterers,
        rays,
    })
}

/// Scale every `X_k` so that the mean per-subcarrier, per-antenna power of
/// `H_k = F_D X_k F_A` equals one, i.e. `||X_k||^2 = M`.
pub fn normalize_channel_power(x: &mut [CMat]) -> Result<()> {
    for (k, xk) in x.iter_mut().enumerate() {
        let e = xk.norm_squared();
        if e == 0.0 || !e.is_finite() {
            return Err(Error::Config(format!("user {k} has zero channel energy")));
        }
        let s = (xk.ncols() as f64 / e).sqrt();
        *xk *= C64::from(s);
    }
    Ok(())
}

/// Sub-array aggregate support mask of one user's `X`.
pub fn support_mask(x: &CMat, m_tilde: usize, threshold: f64) -> DMatrix<bool> {
    let m_bar = x.ncols() / m_tilde;
    let power = DMatrix::from_fn(x.nrows(), m_bar, |l, b| {
        (0..m_tilde).map(|i| x[(l, b * m_tilde + i)].norm_sqr()).sum::<f64>()
    });
    let peak = power.max();
    power.map(|p| p > 0.0 && p > threshold * peak)
}

/// Build the delay-beam channels of every user from the rays of a scene.
pub fn synthesize_cir(
    scene: &Scene,
    sys: &SystemConfig,
    ops: &DftOperators,
    support_threshold: f64,
) -> Result<ChannelRealization> {
    let l = sys.n_taps;
    let mt = sys.antennas_per_subarray;
    let fm_h = ops.fm.adjoint();
    let mut x: Vec<CMat> = Vec::with_capacity(scene.rays.len());
    for rays in &scene.rays {
        let mut xk = CMat::zeros(l, sys.n_antennas());
        for r in rays {
            let beam = &fm_h * steering_vector(r.angle, mt);
            let lo = (r.delay - PULSE_HALF_WIDTH - 0.5).ceil().max(0.0) as usize;
            let hi = ((r.delay + PULSE_HALF_WIDTH + 0.5).floor() as usize).min(l - 1);
            for tap in lo..=hi {
                let p = delay_pulse(tap as f64 - r.delay);
                if p == 0.0 {
                    continue;
                }
                for i in 0..mt {
                    xk[(tap, r.subarray * mt + i)] += r.gain * beam[i] * p;
                }
            }
        }
        x.push(xk);
    }
    normalize_channel_power(&mut x)?;
    let h = x
        .iter()
        .map(|xk| ops.cir_to_frequency(xk))
        .collect::<Result<Vec<_>>>()?;
    let support = x.iter().map(|xk| support_mask(xk, mt, support_threshold)).collect();
    Ok(ChannelRealization { x, h, support })
}

/// Scene plus channels in one call.
pub fn generate_channels(
    sys: &SystemConfig,
    cfg: &SceneConfig,
    ops: &DftOperators,
) -> Result<(Scene, ChannelRealization)> {
    let scene = generate_scene(sys, cfg)?;
    let ch = synthesize_cir(&scene, sys, ops, cfg.support_threshold)?;
    Ok((scene, ch))
}

/// Sizes of the 4-connected components of a support mask.
pub fn support_components(mask: &DMatrix<bool>) -> Vec<usize> {
    let (rows, cols) = mask.shape();
    let mut seen = DMatrix::from_element(rows, cols, false);
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for r0 in 0..rows {
        for c0 in 0..cols {
            if !mask[(r0, c0)] || seen[(r0, c0)] {
                continue;
            }
            seen[(r0, c0)] = true;
            stack.push((r0, c0));
            let mut size = 0;
            while let Some((r, c)) = stack.pop() {
                size += 1;
                let nbrs = [
                    (r.wrapping_sub(1), c),
                    (r + 1, c),
                    (r, c.wrapping_sub(1)),
                    (r, c + 1),
                ];
                for (nr, nc) in nbrs {
                    if nr < rows && nc < cols && mask[(nr, nc)] && !seen[(nr, nc)] {
                        seen[(nr, nc)] = true;
                        stack.push((nr, nc));
                    }
                }
            }
            sizes.push(size);
        }
    }
    sizes
}
