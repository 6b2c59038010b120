//! Turbo message passing with a Markov-random-field support prior.
//!
//! Module A is the group-wise LMMSE of [`crate::lmmse`]. Module B treats
//! every delay-beam coefficient as `x = α g` with `g ~ CN(0, σ²)` and a
//! binary activity `α` shared by the antennas of one sub-array at one tap.
//! Activity requires both the user's own support spin and a support spin
//! common to all users to be on, and then switches on with probability
//! `η`. Each user's spins and the common spins form 4-connected Ising grids
//! over (tap, sub-array). The two modules exchange extrinsic Gaussian
//! messages, and `η`, `σ²` and the grid parameters are refit by EM.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::lmmse::{extrinsic_field, module_a, MessageField, Problem};
use crate::model::{CMat, DftOperators, C64};
use crate::mrf::{self, belief, combine_evidence, common_output, logit, sigmoid, MrfParams, MrfState};

/// Starting values of the learned hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperInit {
    pub eta: f64,
    pub sigma2: f64,
    pub w: MrfParams,
    pub w_common: MrfParams,
}

impl Default for HyperInit {
    fn default() -> Self {
        Self {
            eta: 0.1,
            sigma2: 1.0,
            w: MrfParams::default(),
            w_common: MrfParams::default(),
        }
    }
}

/// Learned prior parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    /// Activation probability per user.
    pub eta: Vec<f64>,
    /// Slab variance per user over (tap, sub-array).
    pub sigma2: Vec<DMatrix<f64>>,
    /// Grid parameters of each user's support.
    pub w: Vec<MrfParams>,
    /// Grid parameters of the common support.
    pub w_common: MrfParams,
}

impl HyperParams {
    pub fn init(init: &HyperInit, k: usize, l: usize, m_bar: usize) -> Self {
        Self {
            eta: vec![init.eta; k],
            sigma2: vec![DMatrix::from_element(l, m_bar, init.sigma2); k],
            w: vec![init.w; k],
            w_common: init.w_common,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Outer iterations `I_max`.
    pub max_iters: usize,
    /// Full grid sweeps per outer iteration.
    pub mrf_iters: usize,
    /// Message damping in `(0, 1]`, 1 disables it.
    pub damping: f64,
    /// Initial prior variance of Module A; `None` uses `1 / L`.
    pub init_var: Option<f64>,
    pub hyper_init: HyperInit,
    /// Refit `η` and `σ²` after each iteration.
    pub learn_hyper: bool,
    /// Refit the grid parameters every `mrf_update_every` iterations.
    pub learn_mrf: bool,
    pub mrf_update_every: usize,
    /// Gradient step of the first grid refit; the `j`-th refit uses
    /// `mrf_step / j` so the parameters settle.
    pub mrf_step: f64,
    /// Couple the users through a common support grid.
    pub common_support: bool,
    /// Variance floor as a multiple of `1 / L`.
    pub var_floor: f64,
    /// Relative change of the estimate below which it counts as converged.
    pub conv_tol: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            max_iters: 30,
            mrf_iters: 4,
            damping: 1.0,
            init_var: None,
            hyper_init: HyperInit::default(),
            learn_hyper: true,
            learn_mrf: true,
            mrf_update_every: 3,
            mrf_step: 0.5,
            common_support: true,
            var_floor: 1e-8,
            conv_tol: 1e-4,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.max_iters == 0 {
            return fail("at least one iteration is required");
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return fail("damping must lie in (0, 1]");
        }
        if let Some(v) = self.init_var {
            if !(v.is_finite() && v > 0.0) {
                return fail("initial variance must be positive");
            }
        }
        let h = &self.hyper_init;
        if !(0.0..=1.0).contains(&h.eta) {
            return fail("eta must lie in [0, 1]");
        }
        if !(h.sigma2.is_finite() && h.sigma2 > 0.0) {
            return fail("sigma2 must be positive");
        }
        if h.w.w1 < 0.0 || h.w_common.w1 < 0.0 {
            return fail("w1 must be non-negative");
        }
        if self.mrf_update_every == 0 {
            return fail("grid update period must be positive");
        }
        if !(self.var_floor > 0.0) {
            return fail("variance floor must be positive");
        }
        Ok(())
    }

    pub(crate) fn floor(&self, problem: &Problem) -> f64 {
        self.var_floor * problem.flat_prior_var()
    }

    pub(crate) fn start_var(&self, problem: &Problem) -> f64 {
        self.init_var.unwrap_or_else(|| problem.flat_prior_var())
    }
}

/// Support probabilities and grid messages carried between iterations.
#[derive(Debug, Clone)]
pub struct SupportBeliefs {
    /// Individual grid state per user.
    pub user_state: Vec<MrfState>,
    pub common_state: MrfState,
    /// Latest common-grid output seen by each user, `π^{out,s_c}_k`.
    pub common_out: Vec<DMatrix<f64>>,
}

impl SupportBeliefs {
    pub fn new(k: usize, l: usize, m_bar: usize) -> Self {
        Self {
            user_state: vec![MrfState::new(l, m_bar); k],
            common_state: MrfState::new(l, m_bar),
            common_out: vec![DMatrix::from_element(l, m_bar, 0.5); k],
        }
    }
}

/// Per-user quantities of one Module B pass that EM needs.
#[derive(Debug, Clone)]
pub struct DenoiserStats {
    /// Posterior activity `P(x ≠ 0)`, L x M.
    pub pi: DMatrix<f64>,
    /// Slab-conditional posterior mean `r̂`, L x M.
    pub r: CMat,
    /// Slab-conditional posterior variance `Ĉ`, L x M.
    pub c: DMatrix<f64>,
    /// `P(α = 1)` from the activity messages, L x M̄.
    pub p_alpha: DMatrix<f64>,
    /// `P(s_k = +1)`, L x M̄.
    pub p_s: DMatrix<f64>,
}

/// Output of Module B.
#[derive(Debug, Clone)]
pub struct ModuleBOutput {
    pub posterior: MessageField,
    pub stats: Vec<DenoiserStats>,
    /// `P(s_c = +1)`, L x M̄.
    pub p_common: DMatrix<f64>,
}

/// Log-odds of the slab against the spike for an AWGN observation
/// `μ = x + CN(0, γ)`: `ln CN(0; μ, γ + σ²) - ln CN(0; μ, γ)`.
pub fn slab_log_odds(mu: C64, gamma: f64, sigma2: f64) -> f64 {
    let a = mu.norm_sqr();
    a * sigma2 / (gamma * (gamma + sigma2)) - (1.0 + sigma2 / gamma).ln()
}

/// Spike-and-slab posterior of one coefficient: activity probability
/// `π`, slab mean `r̂` and slab variance `Ĉ`.
pub fn spike_slab_posterior(mu: C64, gamma: f64, sigma2: f64, prior_logit: f64) -> (f64, C64, f64) {
    let pi = sigmoid(prior_logit + slab_log_odds(mu, gamma, sigma2));
    let r = mu * (sigma2 / (sigma2 + gamma));
    let c = gamma * sigma2 / (gamma + sigma2);
    (pi, r, c)
}

/// Message from the activity of a cell to a support spin, given the other
/// spin's message `other` and the aggregated coefficient evidence `alpha_up`.
fn spin_input(alpha_up: f64, other: f64, eta: f64) -> f64 {
    let num = 1.0 - alpha_up;
    let den = (1.0 - other * eta) * (1.0 - alpha_up) + other * alpha_up * eta;
    mrf::sigmoid(-(num.ln() - den.ln())).clamp(mrf::EPS, 1.0 - mrf::EPS)
}

/// Module B: spike-and-slab denoising with structured support inference.
#[allow(clippy::too_many_arguments)]
pub fn module_b_denoise(
    prior: &MessageField,
    hyper: &HyperParams,
    beliefs: &mut SupportBeliefs,
    m_tilde: usize,
    mrf_iters: usize,
    common_support: bool,
) -> ModuleBOutput {
    let k_users = prior.mean.len();
    let (l, m) = prior.mean[0].shape();
    let m_bar = m / m_tilde;

    // Coefficient evidence per antenna and its sub-array aggregate.
    let mut in_logit = Vec::with_capacity(k_users);
    let mut up_logit = Vec::with_capacity(k_users);
    let mut up = Vec::with_capacity(k_users);
    for k in 0..k_users {
        let lo = DMatrix::from_fn(l, m, |t, a| {
            slab_log_odds(prior.mean[k][(t, a)], prior.var[k][a], hyper.sigma2[k][(t, a / m_tilde)])
        });
        let agg = DMatrix::from_fn(l, m_bar, |t, b| (0..m_tilde).map(|i| lo[(t, b * m_tilde + i)]).sum::<f64>());
        up.push(agg.map(|s| sigmoid(s).clamp(mrf::EPS, 1.0 - mrf::EPS)));
        in_logit.push(lo);
        up_logit.push(agg);
    }

    // Individual grids, using the previous common output.
    let mut s_in = Vec::with_capacity(k_users);
    let mut s_out = Vec::with_capacity(k_users);
    for k in 0..k_users {
        let c_prev = if common_support {
            beliefs.common_out[k].clone()
        } else {
            DMatrix::from_element(l, m_bar, 1.0)
        };
        let pin = up[k].zip_map(&c_prev, |a, c| spin_input(a, c, hyper.eta[k]));
        let pout = mrf::run_mrf(&mut beliefs.user_state[k], &pin, hyper.w[k], mrf_iters);
        s_in.push(pin);
        s_out.push(pout);
    }

    // Common grid from every user's evidence.
    let p_common = if common_support {
        let c_in: Vec<DMatrix<f64>> = (0..k_users)
            .map(|k| up[k].zip_map(&s_out[k], |a, s| spin_input(a, s, hyper.eta[k])))
            .collect();
        let combined = combine_evidence(&c_in);
        mrf::run_mrf(&mut beliefs.common_state, &combined, hyper.w_common, mrf_iters);
        let ext = beliefs.common_state.output_logit(hyper.w_common);
        for k in 0..k_users {
            beliefs.common_out[k] = common_output(&ext, &combined, &c_in[k]);
        }
        belief(&combined, &ext.map(|x| sigmoid(x)))
    } else {
        for k in 0..k_users {
            beliefs.common_out[k] = DMatrix::from_element(l, m_bar, 1.0);
        }
        DMatrix::from_element(l, m_bar, 1.0)
    };

    let mut posterior = prior.clone();
    let mut stats = Vec::with_capacity(k_users);
    for k in 0..k_users {
        let down = DMatrix::from_fn(l, m_bar, |t, b| {
            let c = if common_support { beliefs.common_out[k][(t, b)] } else { 1.0 };
            (s_out[k][(t, b)] * c * hyper.eta[k]).clamp(mrf::EPS, 1.0 - mrf::EPS)
        });
        let p_alpha = up[k].zip_map(&down, |a, d| sigmoid(logit(a) + logit(d)));
        let mut pi = DMatrix::zeros(l, m);
        let mut r = CMat::zeros(l, m);
        let mut c = DMatrix::zeros(l, m);
        // A zero rate rules activity out whatever the evidence says.
        let down_logit = |t: usize, b: usize| {
            if hyper.eta[k] == 0.0 {
                f64::NEG_INFINITY
            } else {
                logit(down[(t, b)])
            }
        };
        for a in 0..m {
            let b = a / m_tilde;
            let gamma = prior.var[k][a];
            let mut var_sum = 0.0;
            for t in 0..l {
                // Everything the other antennas and the grids say about α.
                let prior_logit = down_logit(t, b) + up_logit[k][(t, b)] - in_logit[k][(t, a)];
                let (p, rv, cv) =
                    spike_slab_posterior(prior.mean[k][(t, a)], gamma, hyper.sigma2[k][(t, b)], prior_logit);
                pi[(t, a)] = p;
                r[(t, a)] = rv;
                c[(t, a)] = cv;
                posterior.mean[k][(t, a)] = rv * p;
                var_sum += p * (cv + rv.norm_sqr()) - p * p * rv.norm_sqr();
            }
            posterior.var[k][a] = var_sum / l as f64;
        }
        let p_s = belief(&s_in[k], &s_out[k]);
        stats.push(DenoiserStats { pi, r, c, p_alpha, p_s });
    }
    ModuleBOutput {
        posterior,
        stats,
        p_common,
    }
}

/// EM refit of `η` and `σ²`, and optionally of the grid parameters.
/// Degenerate denominators keep the previous value.
pub fn em_update(
    hyper: &mut HyperParams,
    out: &ModuleBOutput,
    m_tilde: usize,
    sigma2_floor: f64,
    grid_step: Option<f64>,
) {
    for (k, st) in out.stats.iter().enumerate() {
        let num: f64 = st.p_alpha.sum();
        let den: f64 = st.p_s.zip_map(&out.p_common, |a, b| a * b).sum();
        if den > 1e-300 {
            hyper.eta[k] = (num / den).clamp(0.0, 1.0);
        }
        let (l, m_bar) = hyper.sigma2[k].shape();
        for b in 0..m_bar {
            for t in 0..l {
                let mut num = 0.0;
                for i in 0..m_tilde {
                    let a = b * m_tilde + i;
                    num += st.pi[(t, a)] * (st.r[(t, a)].norm_sqr() + st.c[(t, a)]);
                }
                let den = m_tilde as f64 * st.p_alpha[(t, b)];
                if den > 1e-300 && num.is_finite() {
                    hyper.sigma2[k][(t, b)] = (num / den).max(sigma2_floor);
                }
            }
        }
        if let Some(step) = grid_step {
            hyper.w[k] = mrf::update_params(&st.p_s, hyper.w[k], step);
        }
    }
    if let Some(step) = grid_step {
        hyper.w_common = mrf::update_params(&out.p_common, hyper.w_common, step);
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// NMSE after each iteration, when the true channels were supplied.
    pub nmse: Vec<f64>,
    /// Relative change of the estimate at each iteration.
    pub change: Vec<f64>,
    /// Clamped extrinsic variances at each iteration.
    pub clamps: Vec<usize>,
    /// First iteration whose relative change fell below the tolerance.
    pub converged_at: Option<usize>,
    /// Relative gap between the Module A and Module B means at the end.
    pub module_gap: f64,
}

#[derive(Debug, Clone)]
pub struct TurboOutput {
    /// Delay-beam estimates `X̂_k`.
    pub x: Vec<CMat>,
    /// Frequency-domain estimates `Ĥ_k = F_D X̂_k F_A`.
    pub h: Vec<CMat>,
    pub hyper: HyperParams,
    /// Posterior `P(α = 1)` per user, L x M̄.
    pub support: Vec<DMatrix<f64>>,
    /// Module A means of the first iteration (the flat-prior LMMSE).
    pub first_lmmse: Vec<CMat>,
    pub diagnostics: Diagnostics,
}

pub(crate) fn relative_change(new: &[CMat], old: &[CMat]) -> f64 {
    let num: f64 = new.iter().zip(old).map(|(a, b)| (a - b).norm_squared()).sum();
    let den: f64 = new.iter().map(|a| a.norm_squared()).sum();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}

pub(crate) fn x_nmse(est: &[CMat], truth: &[CMat]) -> f64 {
    let num: f64 = est.iter().zip(truth).map(|(a, b)| (a - b).norm_squared()).sum();
    let den: f64 = truth.iter().map(|b| b.norm_squared()).sum();
    num / den
}

pub(crate) fn check_truth(problem: &Problem, truth: Option<&[CMat]>) -> Result<()> {
    if let Some(t) = truth {
        if t.len() != problem.n_users() {
            return Err(shape("true channels", problem.n_users(), t.len()));
        }
        if t.iter().any(|x| x.shape() != (problem.n_taps, problem.n_antennas)) {
            return Err(shape("true channel", format!("{}x{}", problem.n_taps, problem.n_antennas), "other"));
        }
    }
    Ok(())
}

/// Full estimator. `truth` (the true `X_k`) only feeds the diagnostics.
pub fn run_turbo_mrf(
    problem: &Problem,
    ops: &DftOperators,
    cfg: &EstimatorConfig,
    truth: Option<&[CMat]>,
) -> Result<TurboOutput> {
    cfg.validate()?;
    check_truth(problem, truth)?;
    let k = problem.n_users();
    let l = problem.n_taps;
    let m = problem.n_antennas;
    let mt = problem.antennas_per_subarray;
    let m_bar = problem.n_subarrays();
    let floor = cfg.floor(problem);

    let mut hyper = HyperParams::init(&cfg.hyper_init, k, l, m_bar);
    let mut beliefs = SupportBeliefs::new(k, l, m_bar);
    let mut to_a = MessageField::flat(k, l, m, cfg.start_var(problem));
    let mut to_b_old: Option<MessageField> = None;
    let mut x_b: Vec<CMat> = vec![CMat::zeros(l, m); k];
    let mut x_a = x_b.clone();
    let mut first_lmmse = Vec::new();
    let mut support = Vec::new();
    let mut diag = Diagnostics::default();

    for iter in 1..=cfg.max_iters {
        let post_a = module_a(problem, &to_a);
        if iter == 1 {
            first_lmmse = post_a.mean.clone();
        }
        let (mut to_b, clamps_a) = extrinsic_field(&post_a, &to_a, floor);
        if let Some(old) = &to_b_old {
            to_b.damp(old, cfg.damping);
        }

        let out_b = module_b_denoise(&to_b, &hyper, &mut beliefs, mt, cfg.mrf_iters, cfg.common_support);
        let (mut next_a, clamps_b) = extrinsic_field(&out_b.posterior, &to_b, floor);
        if iter > 1 {
            next_a.damp(&to_a, cfg.damping);
        }

        let change = relative_change(&out_b.posterior.mean, &x_b);
        x_a = post_a.mean;
        x_b = out_b.posterior.mean.clone();
        diag.change.push(change);
        diag.clamps.push(clamps_a + clamps_b);
        if diag.converged_at.is_none() && iter > 1 && change < cfg.conv_tol {
            diag.converged_at = Some(iter);
        }
        if let Some(t) = truth {
            diag.nmse.push(x_nmse(&x_b, t));
        }
        support = out_b.stats.iter().map(|s| s.p_alpha.clone()).collect();

        if iter < cfg.max_iters {
            if cfg.learn_hyper || cfg.learn_mrf {
                let refit = iter / cfg.mrf_update_every;
                let grid = (cfg.learn_mrf && iter % cfg.mrf_update_every == 0).then(|| cfg.mrf_step / refit as f64);
                let mut next = hyper.clone();
                em_update(&mut next, &out_b, mt, floor, grid);
                if cfg.learn_hyper {
                    hyper.eta = next.eta;
                    hyper.sigma2 = next.sigma2;
                }
                hyper.w = next.w;
                hyper.w_common = next.w_common;
            }
            to_a = next_a;
            to_b_old = Some(to_b);
        }
    }

    diag.module_gap = relative_change(&x_a, &x_b);
    let h = x_b
        .iter()
        .map(|x| ops.cir_to_frequency(x))
        .collect::<Result<Vec<_>>>()?;
    Ok(TurboOutput {
        x: x_b,
        h,
        hyper,
        support,
        first_lmmse,
        diagnostics: diag,
    })
}
