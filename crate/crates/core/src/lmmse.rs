//! Received-signal bookkeeping and the group-wise linear MMSE stage.
//!
//! After extracting a group's subcarriers and moving to the beam domain,
//! column `m` of the observation obeys `y = Σ_k A_k x_{k,m} + z` with white
//! noise of variance `σ_z^2`, one independent problem per group and antenna.

use nalgebra::{Cholesky, DVector};

use crate::error::{shape, Error, Result};
use crate::model::{CMat, CVec, DftOperators, C64};
use crate::pilots::PilotAllocation;

/// A group's sensing matrices and beam-domain observations.
#[derive(Debug, Clone)]
pub struct GroupProblem {
    pub users: Vec<usize>,
    /// Beam-domain observation, `B_g x M`.
    pub y: CMat,
    /// `A_k A_k^H` for each user of the group, `B_g x B_g`.
    pub gram: Vec<CMat>,
}

/// Everything the estimators need from one received pilot block.
#[derive(Debug, Clone)]
pub struct Problem {
    pub n_subcarriers: usize,
    pub n_taps: usize,
    pub n_antennas: usize,
    pub antennas_per_subarray: usize,
    pub noise_var: f64,
    /// `A_k` per user, `B_g x L`.
    pub sensing: Vec<CMat>,
    pub groups: Vec<GroupProblem>,
}

impl Problem {
    pub fn new(ops: &DftOperators, alloc: &PilotAllocation, y: &[CMat], noise_var: f64) -> Result<Self> {
        if y.len() != alloc.n_symbols {
            return Err(shape("received symbols", alloc.n_symbols, y.len()));
        }
        if !(noise_var.is_finite() && noise_var >= 0.0) {
            return Err(Error::Config("noise variance must be non-negative".into()));
        }
        if alloc.n_subcarriers != ops.n_subcarriers {
            return Err(shape("allocation subcarriers", ops.n_subcarriers, alloc.n_subcarriers));
        }
        for ys in y {
            if ys.nrows() != ops.n_subcarriers || ys.ncols() != ops.n_antennas() {
                return Err(shape(
                    "received block",
                    format!("{}x{}", ops.n_subcarriers, ops.n_antennas()),
                    format!("{}x{}", ys.nrows(), ys.ncols()),
                ));
            }
        }
        let sensing = alloc.sensing_matrices(ops.n_taps);
        let groups = (0..alloc.n_groups())
            .map(|g| {
                let users = alloc.groups[g].clone();
                let y = ops.apply_fa_h(&alloc.group_observation(y, g));
                let gram = users.iter().map(|&u| sensing[u].clone() * sensing[u].adjoint()).collect();
                GroupProblem { users, y, gram }
            })
            .collect();
        Ok(Self {
            n_subcarriers: ops.n_subcarriers,
            n_taps: ops.n_taps,
            n_antennas: ops.n_antennas(),
            antennas_per_subarray: ops.antennas_per_subarray(),
            noise_var,
            sensing,
            groups,
        })
    }

    pub fn n_users(&self) -> usize {
        self.sensing.len()
    }

    pub fn n_subarrays(&self) -> usize {
        self.n_antennas / self.antennas_per_subarray
    }

    /// Default flat prior variance: the mean per-coefficient power `1 / L`
    /// of a unit-power channel, since `||X_k||^2 = ||H_k||^2 / N = M`.
    pub fn flat_prior_var(&self) -> f64 {
        1.0 / self.n_taps as f64
    }
}

/// Gaussian belief on one user-antenna column: mean vector, shared variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMessage {
    pub mean: CVec,
    pub var: f64,
}

/// Gaussian messages for all users, one `L x M` mean and `M` variances each.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageField {
    pub mean: Vec<CMat>,
    pub var: Vec<DVector<f64>>,
}

impl MessageField {
    pub fn flat(n_users: usize, n_taps: usize, n_antennas: usize, var: f64) -> Self {
        Self {
            mean: vec![CMat::zeros(n_taps, n_antennas); n_users],
            var: vec![DVector::from_element(n_antennas, var); n_users],
        }
    }

    pub fn column(&self, k: usize, m: usize) -> GaussianMessage {
        GaussianMessage {
            mean: self.mean[k].column(m).into_owned(),
            var: self.var[k][m],
        }
    }

    /// `rho * self + (1 - rho) * old` for both means and variances.
    pub fn damp(&mut self, old: &MessageField, rho: f64) {
        if rho >= 1.0 {
            return;
        }
        for k in 0..self.mean.len() {
            self.mean[k] = &self.mean[k] * C64::from(rho) + &old.mean[k] * C64::from(1.0 - rho);
            self.var[k] = &self.var[k] * rho + &old.var[k] * (1.0 - rho);
        }
    }
}

/// Extrinsic message and whether its variance had to be clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct Extrinsic {
    pub message: GaussianMessage,
    pub clamped: bool,
}

fn extrinsic_var(post_var: f64, pri_var: f64, floor: f64) -> (f64, bool) {
    let v = 1.0 / (1.0 / post_var - 1.0 / pri_var);
    if !v.is_finite() {
        (floor, true)
    } else if v < floor {
        (floor.max(v.abs()), true)
    } else {
        (v, false)
    }
}

/// Extrinsic mean. A proper but tiny extrinsic variance still weighs the
/// mean with its own value; an improper one passes the posterior mean on.
fn extrinsic_mean(post_mean: C64, post_var: f64, pri_mean: C64, pri_var: f64) -> C64 {
    let prec = 1.0 / post_var - 1.0 / pri_var;
    if prec > 0.0 && prec.is_finite() {
        (post_mean / post_var - pri_mean / pri_var) / prec
    } else {
        post_mean
    }
}

/// Remove the prior from a posterior:
/// `v = (1/v_post - 1/v_pri)^-1`, `m = v (m_post / v_post - m_pri / v_pri)`.
/// Non-positive or non-finite variances are replaced by `max(floor, |v|)`;
/// the mean then keeps the posterior mean.
pub fn extrinsic(post: &GaussianMessage, pri: &GaussianMessage, floor: f64) -> Extrinsic {
    let (var, clamped) = extrinsic_var(post.var, pri.var, floor);
    let mean = post.mean.zip_map(&pri.mean, |a, b| extrinsic_mean(a, post.var, b, pri.var));
    Extrinsic {
        message: GaussianMessage { mean, var },
        clamped,
    }
}

/// Field-wide extrinsic. Returns the number of clamped variances.
pub fn extrinsic_field(post: &MessageField, pri: &MessageField, floor: f64) -> (MessageField, usize) {
    let mut out = post.clone();
    let mut clamps = 0;
    for k in 0..post.mean.len() {
        for m in 0..post.var[k].len() {
            let (vp, vq) = (post.var[k][m], pri.var[k][m]);
            let (var, clamped) = extrinsic_var(vp, vq, floor);
            clamps += usize::from(clamped);
            out.var[k][m] = var;
            let src = post.mean[k].column(m);
            let pri_col = pri.mean[k].column(m);
            let mut dst = out.mean[k].column_mut(m);
            for l in 0..dst.len() {
                dst[l] = extrinsic_mean(src[l], vp, pri_col[l], vq);
            }
        }
    }
    (out, clamps)
}

/// Hermitian positive-definite inverse with a small diagonal loading if the
/// plain factorization fails.
pub(crate) fn hpd_inverse(mut r: CMat) -> CMat {
    let scale = (0..r.nrows()).map(|i| r[(i, i)].re.abs()).fold(0.0, f64::max).max(1e-300);
    let mut load = 0.0;
    loop {
        if let Some(ch) = Cholesky::new(r.clone()) {
            return ch.inverse();
        }
        let next = if load == 0.0 { 1e-12 * scale } else { load * 10.0 };
        for i in 0..r.nrows() {
            r[(i, i)] += C64::from(next - load);
        }
        load = next;
    }
}

fn same_vars(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(y.abs()))
}

/// Posterior of every `x_{k,m}` under independent priors `CN(μ, γ I)`:
/// `x̂ = μ + γ A^H M (y - Σ A μ)`, tap-averaged variance
/// `γ - γ^2 tr(A^H M A) / L`, with `M = (Σ γ A A^H + σ_z^2 I)^-1`.
pub fn module_a(problem: &Problem, prior: &MessageField) -> MessageField {
    let l = problem.n_taps as f64;
    let mut post = prior.clone();
    for grp in &problem.groups {
        let b = grp.y.nrows();
        let gram_t: Vec<CMat> = grp.gram.iter().map(|g| g.transpose()).collect();
        let mut cached: Option<(Vec<f64>, CMat, Vec<f64>)> = None;
        for m in 0..problem.n_antennas {
            let gammas: Vec<f64> = grp.users.iter().map(|&u| prior.var[u][m]).collect();
            let reuse = matches!(&cached, Some((g, _, _)) if same_vars(g, &gammas));
            if !reuse {
                let mut r = CMat::identity(b, b) * C64::from(problem.noise_var);
                for (gram, &g) in grp.gram.iter().zip(&gammas) {
                    r += gram * C64::from(g);
                }
                let minv = hpd_inverse(r);
                let traces = gram_t.iter().map(|gt| minv.component_mul(gt).sum().re).collect();
                cached = Some((gammas.clone(), minv, traces));
            }
            let (_, minv, traces) = cached.as_ref().expect("inverse computed");
            let mut resid: CVec = grp.y.column(m).into_owned();
            for &u in &grp.users {
                resid -= &problem.sensing[u] * prior.mean[u].column(m);
            }
            let v = minv * resid;
            for (i, &u) in grp.users.iter().enumerate() {
                let g = gammas[i];
                let a = &problem.sensing[u];
                let upd = a.ad_mul(&v) * C64::from(g);
                let mut col = post.mean[u].column_mut(m);
                col += upd;
                post.var[u][m] = (g - g * g * traces[i] / l).max(g * f64::EPSILON);
            }
        }
    }
    post
}
