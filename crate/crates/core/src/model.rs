//! System dimensions and the linear operators shared by every module.
//!
//! The frequency-domain channel of user `k` is `H_k = F_D X_k F_A` where
//! `X_k` (L x M) is the delay-beam representation, `F_D` (N x L) holds the
//! unnormalized DFT entries `exp(-j 2 pi n l / N)` and `F_A = I ⊗ F_Mt` is
//! block diagonal with one unitary DFT per sub-array. Because `F_D` is not
//! normalized, `F_D^H F_D = N I` and `||H_k||^2 = N ||X_k||^2`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

/// `exp(-j 2 pi num / den)` with the phase reduced modulo `den` first, which
/// keeps the large-index entries as accurate as the small ones.
pub fn dft_phase(num: usize, den: usize) -> C64 {
    let r = (num % den) as f64;
    C64::from_polar(1.0, -2.0 * PI * r / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Subcarriers `N`.
    pub n_subcarriers: usize,
    /// Delay taps `L` (cyclic-prefix length in samples).
    pub n_taps: usize,
    /// Sub-arrays `M̄`.
    pub n_subarrays: usize,
    /// Antennas per sub-array `M̃`.
    pub antennas_per_subarray: usize,
    /// Users `K`.
    pub n_users: usize,
    /// Pilot groups `G`.
    pub n_groups: usize,
    /// Carrier frequency in Hz.
    pub carrier_freq: f64,
    /// Subcarrier spacing in Hz.
    pub subcarrier_spacing: f64,
    /// Distance between neighbouring sub-array centres in metres.
    pub subarray_spacing: f64,
    /// Total pilot energy per user and OFDM symbol, `P^Tr`.
    pub pilot_power: f64,
    /// Noise variance per received sample, `sigma_z^2`.
    pub noise_var: f64,
}

impl SystemConfig {
    /// Desk-scale configuration used by the benchmarks and acceptance tests.
    pub fn desk() -> Self {
        let n = 128;
        Self {
            n_subcarriers: n,
            n_taps: 16,
            n_subarrays: 16,
            antennas_per_subarray: 4,
            n_users: 8,
            n_groups: 4,
            carrier_freq: 3.5e9,
            subcarrier_spacing: 240e3,
            subarray_spacing: 0.5,
            pilot_power: n as f64,
            noise_var: snr_to_noise_var(20.0, n as f64, n),
        }
    }

    pub fn n_antennas(&self) -> usize {
        self.n_subarrays * self.antennas_per_subarray
    }

    /// Sampling period `1 / (N Δf)`.
    pub fn sample_period(&self) -> f64 {
        1.0 / (self.n_subcarriers as f64 * self.subcarrier_spacing)
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq
    }

    pub fn with_snr_db(mut self, snr_db: f64) -> Self {
        self.noise_var = snr_to_noise_var(snr_db, self.pilot_power, self.n_subcarriers);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_subcarriers == 0
            || self.n_taps == 0
            || self.n_subarrays == 0
            || self.antennas_per_subarray == 0
            || self.n_users == 0
            || self.n_groups == 0
        {
            return fail("all dimensions must be positive".into());
        }
        if self.n_subcarriers < self.n_taps {
            return fail(format!(
                "N = {} is smaller than L = {}",
                self.n_subcarriers, self.n_taps
            ));
        }
        if self.n_groups > self.n_users {
            return fail(format!(
                "G = {} exceeds K = {}",
                self.n_groups, self.n_users
            ));
        }
        if !(self.pilot_power.is_finite() && self.pilot_power > 0.0) {
            return fail("pilot power must be positive".into());
        }
        if !(self.noise_var.is_finite() && self.noise_var >= 0.0) {
            return fail("noise variance must be finite and non-negative".into());
        }
        for (name, v) in [
            ("carrier frequency", self.carrier_freq),
            ("subcarrier spacing", self.subcarrier_spacing),
            ("sub-array spacing", self.subarray_spacing),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be positive"));
            }
        }
        Ok(())
    }
}

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// `sigma_z^2 = P^Tr / (N 10^(snr/10))`.
pub fn snr_to_noise_var(snr_db: f64, pilot_power: f64, n_subcarriers: usize) -> f64 {
    pilot_power / (n_subcarriers as f64 * 10f64.powf(snr_db / 10.0))
}

/// Rows of `F_D` for the given subcarrier indices.
pub fn build_partial_dft(rows: &[usize], n_taps: usize, n_subcarriers: usize) -> CMat {
    CMat::from_fn(rows.len(), n_taps, |i, l| dft_phase(rows[i] * l, n_subcarriers))
}

/// Unitary `M̃`-point DFT, `F[a, b] = exp(-j 2 pi a b / M̃) / sqrt(M̃)`.
pub fn unitary_dft(m: usize) -> CMat {
    let s = 1.0 / (m as f64).sqrt();
    CMat::from_fn(m, m, |a, b| dft_phase(a * b, m) * s)
}

/// Precomputed `F_D` and the per-sub-array block of `F_A`.
#[derive(Debug, Clone)]
pub struct DftOperators {
    pub n_subcarriers: usize,
    pub n_taps: usize,
    pub n_subarrays: usize,
    pub fd: CMat,
    pub fm: CMat,
    fm_h: CMat,
}

impl DftOperators {
    pub fn new(cfg: &SystemConfig) -> Self {
        Self::with_dims(
            cfg.n_subcarriers,
            cfg.n_taps,
            cfg.n_subarrays,
            cfg.antennas_per_subarray,
        )
    }

    pub fn with_dims(n: usize, l: usize, m_bar: usize, m_tilde: usize) -> Self {
        let rows: Vec<usize> = (0..n).collect();
        let fm = unitary_dft(m_tilde);
        Self {
            n_subcarriers: n,
            n_taps: l,
            n_subarrays: m_bar,
            fd: build_partial_dft(&rows, l, n),
            fm_h: fm.adjoint(),
            fm,
        }
    }

    pub fn antennas_per_subarray(&self) -> usize {
        self.fm.nrows()
    }

    pub fn n_antennas(&self) -> usize {
        self.n_subarrays * self.antennas_per_subarray()
    }

    /// Full `F_A = I_M̄ ⊗ F_M̃`.
    pub fn fa(&self) -> CMat {
        let mt = self.antennas_per_subarray();
        let m = self.n_antennas();
        let mut out = CMat::zeros(m, m);
        for b in 0..self.n_subarrays {
            out.view_mut((b * mt, b * mt), (mt, mt)).copy_from(&self.fm);
        }
        out
    }

    fn right_blocks(&self, a: &CMat, block: &CMat) -> CMat {
        let mt = self.antennas_per_subarray();
        let mut out = CMat::zeros(a.nrows(), a.ncols());
        for b in 0..self.n_subarrays {
            let cols = a.columns(b * mt, mt);
            out.columns_mut(b * mt, mt).copy_from(&(cols * block));
        }
        out
    }

    /// `A F_A`, applied block by block.
    pub fn apply_fa(&self, a: &CMat) -> CMat {
        self.right_blocks(a, &self.fm)
    }

    /// `A F_A^H`.
    pub fn apply_fa_h(&self, a: &CMat) -> CMat {
        self.right_blocks(a, &self.fm_h)
    }

    fn check(&self, a: &CMat, rows: usize, context: &'static str) -> Result<()> {
        let m = self.n_antennas();
        if a.nrows() != rows || a.ncols() != m {
            return Err(shape(
                context,
                format!("{rows}x{m}"),
                format!("{}x{}", a.nrows(), a.ncols()),
            ));
        }
        Ok(())
    }

    /// `H = F_D X F_A`.
    pub fn cir_to_frequency(&self, x: &CMat) -> Result<CMat> {
        self.check(x, self.n_taps, "cir_to_frequency")?;
        Ok(self.apply_fa(&(&self.fd * x)))
    }

    /// Least-squares inverse `(1/N) F_D^H H F_A^H`.
    pub fn frequency_to_cir(&self, h: &CMat) -> Result<CMat> {
        self.check(h, self.n_subcarriers, "frequency_to_cir")?;
        let x = self.fd.ad_mul(h) / C64::from(self.n_subcarriers as f64);
        Ok(self.apply_fa_h(&x))
    }

    /// Received rows into the beam domain, `Y F_A^H`.
    pub fn beam_transform(&self, y: &CMat) -> Result<CMat> {
        self.check(y, y.nrows(), "beam_transform")?;
        Ok(self.apply_fa_h(y))
    }
}

/// Normalized mean-squared error `sum ||H - Ĥ||^2 / sum ||H||^2` over users.
pub fn nmse(estimate: &[CMat], truth: &[CMat]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(shape("nmse", truth.len(), estimate.len()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (e, t) in estimate.iter().zip(truth) {
        if e.shape() != t.shape() {
            return Err(shape("nmse", format!("{:?}", t.shape()), format!("{:?}", e.shape())));
        }
        num += (e - t).norm_squared();
        den += t.norm_squared();
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric("nmse of an all-zero channel"));
    }
    Ok(num / den)
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}
