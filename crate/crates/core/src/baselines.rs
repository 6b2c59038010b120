//! Reference estimators sharing the received-signal model of [`Problem`].

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmmse::{extrinsic_field, hpd_inverse, module_a, MessageField, Problem};
use crate::model::{CMat, CVec, DftOperators, C64};
use crate::mrf::logit;
use crate::turbo::{check_truth, spike_slab_posterior, x_nmse};

/// Delay-beam and frequency-domain estimates of every user.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub x: Vec<CMat>,
    pub h: Vec<CMat>,
    /// NMSE per iteration for iterative methods given the truth.
    pub nmse_trace: Vec<f64>,
}

fn finish(ops: &DftOperators, x: Vec<CMat>, nmse_trace: Vec<f64>) -> Result<Estimate> {
    let h = x
        .iter()
        .map(|xk| ops.cir_to_frequency(xk))
        .collect::<Result<Vec<_>>>()?;
    Ok(Estimate { x, h, nmse_trace })
}

/// One-shot group-wise LMMSE under the flat prior `CN(0, v I)`.
pub fn lmmse_estimate(problem: &Problem, ops: &DftOperators, prior_var: Option<f64>) -> Result<Estimate> {
    let v = prior_var.unwrap_or_else(|| problem.flat_prior_var());
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::Config("prior variance must be positive".into()));
    }
    let prior = MessageField::flat(problem.n_users(), problem.n_taps, problem.n_antennas, v);
    finish(ops, module_a(problem, &prior).mean, Vec::new())
}

/// LMMSE with the true per-coefficient power `|X|^2` as prior variance.
pub fn lmmse_genie_estimate(problem: &Problem, ops: &DftOperators, truth: &[CMat]) -> Result<Estimate> {
    check_truth(problem, Some(truth))?;
    let l = problem.n_taps;
    let mut x = vec![CMat::zeros(l, problem.n_antennas); problem.n_users()];
    for grp in &problem.groups {
        let b = grp.y.nrows();
        for m in 0..problem.n_antennas {
            let mut r = CMat::identity(b, b) * C64::from(problem.noise_var);
            let mut weighted = Vec::with_capacity(grp.users.len());
            for &u in &grp.users {
                let p: Vec<f64> = (0..l).map(|t| truth[u][(t, m)].norm_sqr()).collect();
                let a = &problem.sensing[u];
                let ag = CMat::from_fn(b, l, |i, t| a[(i, t)] * p[t]);
                r += &ag * a.adjoint();
                weighted.push(ag);
            }
            let v = hpd_inverse(r) * grp.y.column(m);
            for (ag, &u) in weighted.iter().zip(&grp.users) {
                x[u].set_column(m, &ag.ad_mul(&v));
            }
        }
    }
    finish(ops, x, Vec::new())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VampConfig {
    pub max_iters: usize,
    pub damping: f64,
    /// Initial prior variance of the linear stage; `None` uses `1 / L`.
    pub init_var: Option<f64>,
    pub rate_init: f64,
    pub sigma2_init: f64,
    /// Refit the rate and slab variance by EM.
    pub learn: bool,
    pub var_floor: f64,
}

impl Default for VampConfig {
    fn default() -> Self {
        Self {
            max_iters: 30,
            damping: 1.0,
            init_var: None,
            rate_init: 0.1,
            sigma2_init: 1.0,
            learn: true,
            var_floor: 1e-8,
        }
    }
}

/// Turbo/VAMP iterations with an i.i.d. Bernoulli-Gaussian prior per user.
pub fn vamp_bg_estimate(
    problem: &Problem,
    ops: &DftOperators,
    cfg: &VampConfig,
    truth: Option<&[CMat]>,
) -> Result<Estimate> {
    if cfg.max_iters == 0 || !(cfg.damping > 0.0 && cfg.damping <= 1.0) {
        return Err(Error::Config("bad iteration count or damping".into()));
    }
    if !(0.0..=1.0).contains(&cfg.rate_init) || !(cfg.sigma2_init > 0.0) {
        return Err(Error::Config("bad Bernoulli-Gaussian initialization".into()));
    }
    check_truth(problem, truth)?;
    let k = problem.n_users();
    let (l, m) = (problem.n_taps, problem.n_antennas);
    let floor = cfg.var_floor * problem.flat_prior_var();
    let mut rate = vec![cfg.rate_init; k];
    let mut sigma2 = vec![cfg.sigma2_init; k];
    let mut to_a = MessageField::flat(k, l, m, cfg.init_var.unwrap_or_else(|| problem.flat_prior_var()));
    let mut to_b_old: Option<MessageField> = None;
    let mut x = vec![CMat::zeros(l, m); k];
    let mut trace = Vec::new();

    for iter in 1..=cfg.max_iters {
        let post_a = module_a(problem, &to_a);
        let (mut to_b, _) = extrinsic_field(&post_a, &to_a, floor);
        if let Some(old) = &to_b_old {
            to_b.damp(old, cfg.damping);
        }
        let mut post_b = to_b.clone();
        for u in 0..k {
            let prior_logit = logit(rate[u]);
            let (mut pi_sum, mut pow_sum) = (0.0, 0.0);
            for a in 0..m {
                let gamma = to_b.var[u][a];
                let mut var_sum = 0.0;
                for t in 0..l {
                    let (p, r, c) = spike_slab_posterior(to_b.mean[u][(t, a)], gamma, sigma2[u], prior_logit);
                    post_b.mean[u][(t, a)] = r * p;
                    var_sum += p * (c + r.norm_sqr()) - p * p * r.norm_sqr();
                    pi_sum += p;
                    pow_sum += p * (r.norm_sqr() + c);
                }
                post_b.var[u][a] = var_sum / l as f64;
            }
            if cfg.learn && iter < cfg.max_iters && pi_sum > 1e-300 {
                rate[u] = (pi_sum / (l * m) as f64).clamp(0.0, 1.0);
                sigma2[u] = (pow_sum / pi_sum).max(floor);
            }
        }
        let (mut next_a, _) = extrinsic_field(&post_b, &to_b, floor);
        if iter > 1 {
            next_a.damp(&to_a, cfg.damping);
        }
        x = post_b.mean;
        if let Some(t) = truth {
            trace.push(x_nmse(&x, t));
        }
        to_a = next_a;
        to_b_old = Some(to_b);
    }
    finish(ops, x, trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OmpConfig {
    /// Stop once the residual norm drops below `factor * sqrt(B) * σ_z`.
    pub residual_factor: f64,
    /// Atom budget as a fraction of `B`.
    pub budget_fraction: f64,
    /// Explicit atom budget; overrides the fraction and is capped at `B`.
    pub budget: Option<usize>,
}

impl Default for OmpConfig {
    fn default() -> Self {
        Self {
            residual_factor: 1.2,
            budget_fraction: 0.5,
            budget: None,
        }
    }
}

fn least_squares(d: &CMat, cols: &[usize], y: &CVec) -> CVec {
    let sub = d.select_columns(cols.iter());
    let mut g = sub.ad_mul(&sub);
    let rhs = sub.ad_mul(y);
    let scale = (0..g.nrows()).map(|i| g[(i, i)].re).fold(0.0, f64::max).max(1e-300);
    for i in 0..g.nrows() {
        g[(i, i)] += C64::from(1e-12 * scale);
    }
    match Cholesky::new(g.clone()) {
        Some(ch) => ch.solve(&rhs),
        None => g.lu().solve(&rhs).unwrap_or_else(|| CVec::zeros(cols.len())),
    }
}

/// Orthogonal matching pursuit per group and antenna over the stacked
/// dictionary of the group's sensing matrices.
pub fn omp_estimate(problem: &Problem, ops: &DftOperators, cfg: &OmpConfig) -> Result<Estimate> {
    if !(cfg.residual_factor >= 0.0) || !(cfg.budget_fraction > 0.0) {
        return Err(Error::Config("bad matching-pursuit settings".into()));
    }
    let l = problem.n_taps;
    let mut x = vec![CMat::zeros(l, problem.n_antennas); problem.n_users()];
    for grp in &problem.groups {
        let b = grp.y.nrows();
        let n_users = grp.users.len();
        let mut dict = CMat::zeros(b, l * n_users);
        for (i, &u) in grp.users.iter().enumerate() {
            dict.columns_mut(i * l, l).copy_from(&problem.sensing[u]);
        }
        let norms: Vec<f64> = (0..dict.ncols()).map(|j| dict.column(j).norm()).collect();
        let threshold = cfg.residual_factor * (b as f64).sqrt() * problem.noise_var.sqrt();
        let budget = match cfg.budget {
            Some(n) => n.min(b),
            None => ((cfg.budget_fraction * b as f64).floor() as usize).clamp(1, b),
        }
        .min(dict.ncols());
        for m in 0..problem.n_antennas {
            let y: CVec = grp.y.column(m).into_owned();
            let y_norm = y.norm();
            let mut chosen: Vec<usize> = Vec::new();
            let mut coef = CVec::zeros(0);
            let mut resid = y.clone();
            while chosen.len() < budget && resid.norm() > threshold.max(1e-12 * y_norm) {
                let corr = dict.ad_mul(&resid);
                let best = (0..dict.ncols())
                    .filter(|j| !chosen.contains(j) && norms[*j] > 0.0)
                    .max_by(|&i, &j| {
                        let ci = corr[i].norm() / norms[i];
                        let cj = corr[j].norm() / norms[j];
                        ci.total_cmp(&cj).then(j.cmp(&i))
                    });
                let Some(j) = best else { break };
                chosen.push(j);
                coef = least_squares(&dict, &chosen, &y);
                resid = &y - dict.select_columns(chosen.iter()) * &coef;
            }
            for (c, &j) in coef.iter().zip(&chosen) {
                let u = grp.users[j / l];
                x[u][(j % l, m)] = *c;
            }
        }
    }
    finish(ops, x, Vec::new())
}
