//! Subcarrier-to-group pattern design by projected Adam on a relaxed MSE.
//!
//! For a relaxed pattern `C` (N x G, entries in [0, 1]) the selection weights
//! are `b = c^2`. Group `g` sees `Ã_g = sqrt(P / 1'b_g) diag(b_g) F̃_g`, where
//! `F̃_g` stacks the cyclically shifted delay dictionaries of its members,
//! and the objective is the summed LMMSE error
//! `J = Σ_g tr[(λ0^-1 I + Ã_g^H Σ_g^-1 Ã_g)^-1]` with the other groups'
//! leakage in `Σ_g = σ^2 I + λ0 Σ_{g' ≠ g} Ã_g' Ã_g'^H`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmmse::hpd_inverse;
use crate::model::{dft_phase, CMat, C64};
use crate::pilots::{group_shift, GroupPattern};
use crate::rng::cell_rng;

/// Diagonal loading added inside every inverse of the objective.
pub const INVERSE_REG: f64 = 1e-10;

/// What the pattern is optimized for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternProblem {
    pub n_subcarriers: usize,
    pub n_taps: usize,
    pub power: f64,
    pub noise_var: f64,
    /// Prior variance `λ0`.
    pub prior_var: f64,
    /// Member count of each group.
    pub group_sizes: Vec<usize>,
}

impl PatternProblem {
    pub fn n_groups(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_sizes.is_empty() || self.group_sizes.contains(&0) {
            return Err(Error::Config("every group needs members".into()));
        }
        if self.n_taps == 0 || self.n_subcarriers < self.n_taps {
            return Err(Error::Config("need N >= L > 0".into()));
        }
        if !(self.power > 0.0 && self.noise_var >= 0.0 && self.prior_var > 0.0) {
            return Err(Error::Config("power, noise and prior variance out of range".into()));
        }
        Ok(())
    }

    /// `F̃_g`, N x L|K_g|.
    pub fn dictionary(&self, g: usize) -> CMat {
        let (n, l) = (self.n_subcarriers, self.n_taps);
        let size = self.group_sizes[g];
        CMat::from_fn(n, l * size, |row, col| {
            let tau = group_shift(col / l, size, n);
            dft_phase(row * (col % l + tau), n)
        })
    }
}

fn check_relaxed(c: &DMatrix<f64>, p: &PatternProblem) -> Result<()> {
    if c.nrows() != p.n_subcarriers || c.ncols() != p.n_groups() {
        return Err(crate::error::shape(
            "relaxed pattern",
            format!("{}x{}", p.n_subcarriers, p.n_groups()),
            format!("{}x{}", c.nrows(), c.ncols()),
        ));
    }
    if let Some(g) = (0..c.ncols()).find(|&g| c.column(g).iter().all(|&v| v == 0.0)) {
        return Err(Error::InfeasiblePattern(format!("group {g} has no subcarrier weight")));
    }
    Ok(())
}

struct Evaluator<'a> {
    p: &'a PatternProblem,
    dicts: Vec<CMat>,
}

impl<'a> Evaluator<'a> {
    fn new(p: &'a PatternProblem) -> Self {
        Self {
            dicts: (0..p.n_groups()).map(|g| p.dictionary(g)).collect(),
            p,
        }
    }

    /// Objective and, on request, its gradient with respect to `c`.
    fn eval(&self, c: &DMatrix<f64>, want_grad: bool) -> (f64, Option<DMatrix<f64>>) {
        let p = self.p;
        let (n, g_count) = (p.n_subcarriers, p.n_groups());
        let lam = p.prior_var;
        let b = c.map(|v| v * v);
        let sums: Vec<f64> = (0..g_count).map(|g| b.column(g).sum().max(1e-300)).collect();
        let a: Vec<CMat> = (0..g_count)
            .map(|g| {
                let s = (p.power / sums[g]).sqrt();
                let mut ag = self.dicts[g].clone();
                for r in 0..n {
                    let d = C64::from(b[(r, g)] * s);
                    for v in ag.row_mut(r).iter_mut() {
                        *v *= d;
                    }
                }
                ag
            })
            .collect();
        let outer: Vec<CMat> = a.iter().map(|ag| ag * ag.adjoint()).collect();
        let mut total = CMat::zeros(n, n);
        for o in &outer {
            total += o;
        }

        let mut j = 0.0;
        let mut grad_d = DMatrix::<f64>::zeros(n, g_count);
        let mut w_parts: Vec<CMat> = Vec::new();
        for g in 0..g_count {
            let mut sigma = (&total - &outer[g]) * C64::from(lam);
            for i in 0..n {
                sigma[(i, i)] += C64::from(p.noise_var + INVERSE_REG);
            }
            let sigma_inv = hpd_inverse(sigma);
            let si_a = &sigma_inv * &a[g];
            let mut q = a[g].ad_mul(&si_a);
            for i in 0..q.nrows() {
                q[(i, i)] += C64::from(1.0 / lam + INVERSE_REG);
            }
            let t = hpd_inverse(q);
            j += t.trace().re;
            if want_grad {
                let t2 = &t * &t;
                let v = &si_a * &t2;
                for r in 0..n {
                    let mut acc = C64::from(0.0);
                    for col in 0..v.ncols() {
                        acc += v[(r, col)].conj() * self.dicts[g][(r, col)];
                    }
                    grad_d[(r, g)] -= 2.0 * acc.re;
                }
                w_parts.push(&v * si_a.adjoint());
            }
        }
        if !want_grad {
            return (j, None);
        }

        let mut w_total = CMat::zeros(n, n);
        for w in &w_parts {
            w_total += w;
        }
        for g in 0..g_count {
            let u = (&w_total - &w_parts[g]) * &a[g];
            for r in 0..n {
                let mut acc = C64::from(0.0);
                for col in 0..u.ncols() {
                    acc += u[(r, col)].conj() * self.dicts[g][(r, col)];
                }
                grad_d[(r, g)] += 2.0 * lam * acc.re;
            }
        }

        // d = b sqrt(P / s), b = c^2.
        let mut grad = DMatrix::zeros(n, g_count);
        for g in 0..g_count {
            let s = sums[g];
            let root = (p.power / s).sqrt();
            let cross: f64 = (0..n).map(|r| grad_d[(r, g)] * b[(r, g)]).sum();
            for r in 0..n {
                let db = grad_d[(r, g)] * root - 0.5 * root / s * cross;
                grad[(r, g)] = db * 2.0 * c[(r, g)];
            }
        }
        (j, Some(grad))
    }
}

/// Relaxed objective at `c`.
pub fn mse_objective(c: &DMatrix<f64>, p: &PatternProblem) -> Result<f64> {
    p.validate()?;
    check_relaxed(c, p)?;
    Ok(Evaluator::new(p).eval(c, false).0)
}

/// Analytic gradient of [`mse_objective`] with respect to `c`.
pub fn objective_gradient(c: &DMatrix<f64>, p: &PatternProblem) -> Result<DMatrix<f64>> {
    p.validate()?;
    check_relaxed(c, p)?;
    Ok(Evaluator::new(p).eval(c, true).1.expect("gradient requested"))
}

/// Objective of a binary pattern.
pub fn pattern_objective(pattern: &GroupPattern, p: &PatternProblem) -> Result<f64> {
    let c = DMatrix::from_fn(pattern.n_subcarriers, pattern.n_groups(), |n, g| {
        if pattern.get(n, g) {
            1.0
        } else {
            0.0
        }
    });
    mse_objective(&c, p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Amplitude of the seeded perturbation added to the uniform start,
    /// which separates otherwise identical groups.
    pub init_jitter: f64,
    pub seed: u64,
    /// Starting points: the jittered uniform pattern, block-interleaved
    /// combs, then random patterns. Each runs `screen_steps` and the best
    /// one continues to `steps`.
    pub starts: usize,
    pub screen_steps: usize,
    /// Subcarriers allowed to carry pilots; `None` allows all.
    pub active: Option<Vec<bool>>,
    /// Minimum subcarriers per group after rounding; `None` uses `L`.
    pub min_per_group: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            steps: 200,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            init_jitter: 1e-2,
            seed: 0,
            starts: 8,
            screen_steps: 10,
            active: None,
            min_per_group: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerOutput {
    pub pattern: GroupPattern,
    /// Final relaxed `C`.
    pub relaxed: DMatrix<f64>,
    /// Relaxed objective before each step and after the last one.
    pub trace: Vec<f64>,
    /// Objective of the rounded pattern.
    pub objective: f64,
    /// The last iterate was not the best one, which was returned instead.
    pub not_converged: bool,
}

/// Clip to [0, 1], zero inactive rows and rescale rows whose `Σ_g c^2 > 1`.
fn project(c: &mut DMatrix<f64>, active: Option<&[bool]>) {
    for r in 0..c.nrows() {
        if active.is_some_and(|a| !a[r]) {
            c.row_mut(r).fill(0.0);
            continue;
        }
        let mut row = c.row_mut(r);
        for v in row.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        let s: f64 = row.iter().map(|v| v * v).sum();
        if s > 1.0 {
            row /= s.sqrt();
        }
    }
}

/// Round a relaxed pattern: each subcarrier joins its strongest group when
/// `c^2 >= 0.25`, then groups below `min_per_group` take the idle or
/// surplus subcarriers they weight most.
pub fn round_pattern(c: &DMatrix<f64>, min_per_group: usize, active: Option<&[bool]>) -> Result<GroupPattern> {
    let (n, g_count) = c.shape();
    let usable = (0..n).filter(|&r| active.map_or(true, |a| a[r])).count();
    if g_count * min_per_group > usable {
        return Err(Error::InfeasiblePattern(format!(
            "{g_count} groups of at least {min_per_group} need more than {usable} subcarriers"
        )));
    }
    let b = c.map(|v| v * v);
    let mut assign = vec![usize::MAX; n];
    for r in 0..n {
        if active.is_some_and(|a| !a[r]) {
            continue;
        }
        let (best, val) = (0..g_count).fold((0, f64::MIN), |acc, g| {
            if b[(r, g)] > acc.1 {
                (g, b[(r, g)])
            } else {
                acc
            }
        });
        if val >= 0.25 {
            assign[r] = best;
        }
    }
    loop {
        let counts: Vec<usize> = (0..g_count).map(|g| assign.iter().filter(|&&a| a == g).count()).collect();
        let Some(g) = (0..g_count).find(|&g| counts[g] < min_per_group) else {
            break;
        };
        let donor_ok = |a: usize| a == usize::MAX || (a != g && counts[a] > min_per_group);
        let pick = (0..n)
            .filter(|&r| active.map_or(true, |a| a[r]) && donor_ok(assign[r]))
            .max_by(|&x, &y| {
                let idle = |r: usize| assign[r] == usize::MAX;
                idle(x).cmp(&idle(y)).then(b[(x, g)].total_cmp(&b[(y, g)])).then(y.cmp(&x))
            })
            .ok_or_else(|| Error::InfeasiblePattern("cannot repair group sizes".into()))?;
        assign[pick] = g;
    }
    Ok(GroupPattern::from_assignment(&assign, g_count))
}

/// One projected-Adam descent, resumable.
struct Descent {
    c: DMatrix<f64>,
    m1: DMatrix<f64>,
    m2: DMatrix<f64>,
    step: usize,
    trace: Vec<f64>,
    best: Option<(f64, DMatrix<f64>)>,
}

impl Descent {
    fn new(c: DMatrix<f64>) -> Self {
        let (n, g) = c.shape();
        Self {
            c,
            m1: DMatrix::zeros(n, g),
            m2: DMatrix::zeros(n, g),
            step: 0,
            trace: Vec::new(),
            best: None,
        }
    }

    fn run(&mut self, eval: &Evaluator, cfg: &OptimizerConfig, steps: usize, active: Option<&[bool]>) {
        for _ in 0..steps {
            self.step += 1;
            let (j, grad) = eval.eval(&self.c, true);
            let grad = grad.expect("gradient requested");
            self.trace.push(j);
            if self.best.as_ref().map_or(true, |(bj, _)| j < *bj) {
                self.best = Some((j, self.c.clone()));
            }
            self.m1 = &self.m1 * cfg.beta1 + &grad * (1.0 - cfg.beta1);
            self.m2 = &self.m2 * cfg.beta2 + grad.map(|v| v * v) * (1.0 - cfg.beta2);
            let c1 = 1.0 - cfg.beta1.powi(self.step as i32);
            let c2 = 1.0 - cfg.beta2.powi(self.step as i32);
            for i in 0..self.c.len() {
                let mh = self.m1[i] / c1;
                let vh = self.m2[i] / c2;
                self.c[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
            }
            project(&mut self.c, active);
        }
    }

    fn current(&self, eval: &Evaluator) -> f64 {
        eval.eval(&self.c, false).0
    }
}

/// Uniform start, then block-interleaved combs with blocks of 1, 2, 4, ...
/// subcarriers, then random patterns, `cfg.starts` in total.
fn starting_points(n: usize, g_count: usize, cfg: &OptimizerConfig) -> Vec<DMatrix<f64>> {
    let mut rng = cell_rng(cfg.seed, 0);
    let base = 1.0 / (g_count as f64 + 1.0);
    let mut out = vec![DMatrix::from_fn(n, g_count, |_, _| {
        base + cfg.init_jitter * (rng.gen::<f64>() - 0.5)
    })];
    let mut block = 1;
    while out.len() < cfg.starts && block * g_count <= n {
        out.push(DMatrix::from_fn(n, g_count, |r, g| {
            if (r / block) % g_count == g {
                1.0
            } else {
                0.0
            }
        }));
        block *= 2;
    }
    while out.len() < cfg.starts {
        out.push(DMatrix::from_fn(n, g_count, |_, _| rng.gen::<f64>()));
    }
    out
}

/// Projected Adam on the relaxed objective followed by rounding.
pub fn optimize_pattern(p: &PatternProblem, cfg: &OptimizerConfig) -> Result<OptimizerOutput> {
    p.validate()?;
    let (n, g_count) = (p.n_subcarriers, p.n_groups());
    if let Some(a) = &cfg.active {
        if a.len() != n {
            return Err(crate::error::shape("active mask", n, a.len()));
        }
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("learning rate must be positive".into()));
    }
    if cfg.starts == 0 {
        return Err(Error::Config("need at least one starting point".into()));
    }
    let active = cfg.active.as_deref();
    let eval = Evaluator::new(p);
    let screen = if cfg.starts > 1 { cfg.screen_steps.min(cfg.steps) } else { cfg.steps };

    let mut winner: Option<(f64, Descent)> = None;
    for mut c in starting_points(n, g_count, cfg) {
        project(&mut c, active);
        let mut d = Descent::new(c);
        d.run(&eval, cfg, screen, active);
        let j = d.current(&eval);
        if winner.as_ref().map_or(true, |(wj, _)| j < *wj) {
            winner = Some((j, d));
        }
    }
    let (_, mut d) = winner.expect("at least one start");
    d.run(&eval, cfg, cfg.steps - screen, active);

    let last = d.current(&eval);
    d.trace.push(last);
    let mut c = d.c;
    let mut not_converged = false;
    if let Some((bj, bc)) = d.best {
        if bj < last * (1.0 - 1e-6) {
            c = bc;
            not_converged = true;
        }
    }
    let min_per_group = cfg.min_per_group.unwrap_or(p.n_taps);
    let pattern = round_pattern(&c, min_per_group, active)?;
    let objective = pattern_objective(&pattern, p)?;
    Ok(OptimizerOutput {
        pattern,
        relaxed: c,
        trace: d.trace,
        objective,
        not_converged,
    })
}
