//! Loopy belief propagation on a 4-connected Ising grid over (tap, sub-array).
//!
//! The prior on the support spins `s ∈ {-1, +1}` is
//! `p(S) ∝ exp(w1 Σ_edges s s' - (w2 / 2) Σ s)`, so `w1 ≥ 0` rewards
//! neighbouring cells that agree and `w2 > 0` favours inactive cells.
//! Evidence enters as a probability `π_in = P(s = +1)` per cell.
//!
//! Messages are stored as the probability they assign to `+1`. A message
//! named after a direction is the one a cell receives from that side:
//! `L` from the previous tap, `R` from the next tap, `T` from the previous
//! sub-array and `B` from the next one. Missing neighbours keep the neutral
//! value 0.5. All products are evaluated in the log domain.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Messages are kept inside `[EPS, 1 - EPS]`.
pub const EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MrfParams {
    pub w1: f64,
    pub w2: f64,
}

impl Default for MrfParams {
    fn default() -> Self {
        Self { w1: 0.4, w2: 0.4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    L,
    R,
    T,
    B,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::L, Direction::R, Direction::T, Direction::B];

    fn index(self) -> usize {
        self as usize
    }

    fn opposite(self) -> Direction {
        match self {
            Direction::L => Direction::R,
            Direction::R => Direction::L,
            Direction::T => Direction::B,
            Direction::B => Direction::T,
        }
    }

    /// Neighbour that sends this message to `(l, b)`, if any.
    fn source(self, l: usize, b: usize, rows: usize, cols: usize) -> Option<(usize, usize)> {
        match self {
            Direction::L => (l > 0).then(|| (l - 1, b)),
            Direction::R => (l + 1 < rows).then(|| (l + 1, b)),
            Direction::T => (b > 0).then(|| (l, b - 1)),
            Direction::B => (b + 1 < cols).then(|| (l, b + 1)),
        }
    }
}

fn clamp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn logit(p: f64) -> f64 {
    let p = clamp(p);
    p.ln() - (1.0 - p).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Directional messages of one grid, `L` taps by `M̄` sub-arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct MrfState {
    lambda: [DMatrix<f64>; 4],
}

impl MrfState {
    pub fn new(rows: usize, cols: usize) -> Self {
        let half = DMatrix::from_element(rows, cols, 0.5);
        Self {
            lambda: [half.clone(), half.clone(), half.clone(), half],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.lambda[0].shape()
    }

    pub fn message(&self, d: Direction) -> &DMatrix<f64> {
        &self.lambda[d.index()]
    }

    /// Sum of the log messages for `+1` and for `-1` over all directions.
    fn log_products(&self, l: usize, b: usize) -> (f64, f64) {
        let mut lp = 0.0;
        let mut lq = 0.0;
        for m in &self.lambda {
            let v = m[(l, b)];
            lp += v.ln();
            lq += (1.0 - v).ln();
        }
        (lp, lq)
    }

    /// One pass of direction `d` over the grid, in propagation order.
    pub fn sweep(&mut self, d: Direction, pi_in: &DMatrix<f64>, params: MrfParams) {
        let (rows, cols) = self.shape();
        let skip = d.opposite().index();
        let w1 = params.w1;
        let half_w2 = params.w2 / 2.0;
        let norm = log_add(w1, -w1);
        let update = |state: &mut Self, l: usize, b: usize| {
            let Some((sl, sb)) = d.source(l, b, rows, cols) else {
                return;
            };
            let p = clamp(pi_in[(sl, sb)]);
            let mut lp = p.ln();
            let mut lq = (1.0 - p).ln();
            for (i, m) in state.lambda.iter().enumerate() {
                if i != skip {
                    let v = m[(sl, sb)];
                    lp += v.ln();
                    lq += (1.0 - v).ln();
                }
            }
            let a = lp - half_w2;
            let c = lq + half_w2;
            let log_msg = log_add(w1 + a, -w1 + c) - norm - log_add(a, c);
            state.lambda[d.index()][(l, b)] = clamp(log_msg.exp());
        };
        match d {
            Direction::L => {
                for b in 0..cols {
                    for l in 0..rows {
                        update(self, l, b);
                    }
                }
            }
            Direction::R => {
                for b in 0..cols {
                    for l in (0..rows).rev() {
                        update(self, l, b);
                    }
                }
            }
            Direction::T => {
                for b in 0..cols {
                    for l in 0..rows {
                        update(self, l, b);
                    }
                }
            }
            Direction::B => {
                for b in (0..cols).rev() {
                    for l in 0..rows {
                        update(self, l, b);
                    }
                }
            }
        }
    }

    /// Log-odds of the prior-side (extrinsic) output of every cell.
    pub fn output_logit(&self, params: MrfParams) -> DMatrix<f64> {
        let (rows, cols) = self.shape();
        DMatrix::from_fn(rows, cols, |l, b| {
            let (lp, lq) = self.log_products(l, b);
            (lp - params.w2 / 2.0) - (lq + params.w2 / 2.0)
        })
    }

    /// Extrinsic output `π_out`, excluding each cell's own evidence.
    pub fn output(&self, params: MrfParams) -> DMatrix<f64> {
        self.output_logit(params).map(|x| clamp(sigmoid(x)))
    }
}

/// Run `iters` full sweeps (L, R, T, B) and return the extrinsic output.
pub fn run_mrf(
    state: &mut MrfState,
    pi_in: &DMatrix<f64>,
    params: MrfParams,
    iters: usize,
) -> DMatrix<f64> {
    assert_eq!(state.shape(), pi_in.shape(), "evidence and state grids differ");
    for _ in 0..iters {
        for d in Direction::ALL {
            state.sweep(d, pi_in, params);
        }
    }
    state.output(params)
}

/// Full belief combining the extrinsic output with the cell's own evidence.
pub fn belief(pi_in: &DMatrix<f64>, pi_out: &DMatrix<f64>) -> DMatrix<f64> {
    pi_in.zip_map(pi_out, |a, b| clamp(sigmoid(logit(a) + logit(b))))
}

/// Output of the shared grid as seen by one contributor: the shared
/// extrinsic combined with every other contributor's evidence.
pub fn common_output(
    common_logit: &DMatrix<f64>,
    common_in: &DMatrix<f64>,
    own_in: &DMatrix<f64>,
) -> DMatrix<f64> {
    DMatrix::from_fn(common_logit.nrows(), common_logit.ncols(), |l, b| {
        let x = common_logit[(l, b)] + logit(common_in[(l, b)]) - logit(own_in[(l, b)]);
        clamp(sigmoid(x))
    })
}

/// Normalized product of independent evidence maps for a shared grid.
pub fn combine_evidence(maps: &[DMatrix<f64>]) -> DMatrix<f64> {
    let (rows, cols) = maps[0].shape();
    DMatrix::from_fn(rows, cols, |l, b| {
        clamp(sigmoid(maps.iter().map(|m| logit(m[(l, b)])).sum()))
    })
}

/// Gradient of the mean pseudo-log-likelihood of the grid prior, with spins
/// replaced by their posterior expectations `2 p - 1`.
pub fn pseudo_likelihood_gradient(p_pos: &DMatrix<f64>, params: MrfParams) -> (f64, f64) {
    let (rows, cols) = p_pos.shape();
    let e = p_pos.map(|p| 2.0 * p - 1.0);
    let mut g1 = 0.0;
    let mut g2 = 0.0;
    for b in 0..cols {
        for l in 0..rows {
            let mut nb = 0.0;
            for d in Direction::ALL {
                if let Some((sl, sb)) = d.source(l, b, rows, cols) {
                    nb += e[(sl, sb)];
                }
            }
            let r = e[(l, b)] - (params.w1 * nb - params.w2 / 2.0).tanh();
            g1 += nb * r;
            g2 -= 0.5 * r;
        }
    }
    let cells = (rows * cols) as f64;
    (g1 / cells, g2 / cells)
}

/// One projected gradient-ascent step on the grid parameters, `w1 ≥ 0`.
pub fn update_params(p_pos: &DMatrix<f64>, params: MrfParams, step: f64) -> MrfParams {
    let (g1, g2) = pseudo_likelihood_gradient(p_pos, params);
    MrfParams {
        w1: (params.w1 + step * g1).max(0.0),
        w2: params.w2 + step * g2,
    }
}
