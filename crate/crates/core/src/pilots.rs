//! Pilot construction: subcarrier group patterns, cyclic-shift codes and
//! the per-user sensing matrices seen by the receiver.
//!
//! Users are split into groups. Each group owns a disjoint set of
//! subcarriers and, inside a group, users are told apart by cyclic delay
//! shifts `tau = round(k N / |K_g|)` applied as a linear phase ramp.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::model::{dft_phase, CMat, CVec, C64};
use crate::rng::complex_normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PilotScheme {
    /// Grouped frequency-division plus in-group cyclic-shift code division.
    NfdCdm,
    /// Every user on every subcarrier with cyclic-shift codes.
    OCdm,
    /// One user per group on an interleaved comb.
    SrFdm,
    /// Every user on every subcarrier with random-phase codes.
    NoCdm,
    /// Up to eight orthogonal users per OFDM symbol over several symbols.
    OrthogonalMultiSymbol,
}

/// Subcarrier-to-group selection `B̄` (N x G, binary), stored per group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPattern {
    pub n_subcarriers: usize,
    groups: Vec<Vec<bool>>,
}

impl GroupPattern {
    pub fn from_columns(columns: Vec<Vec<bool>>) -> Result<Self> {
        let n = columns.first().map_or(0, Vec::len);
        if columns.is_empty() || n == 0 {
            return Err(Error::Config("empty pattern".into()));
        }
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::Config("ragged pattern".into()));
        }
        Ok(Self {
            n_subcarriers: n,
            groups: columns,
        })
    }

    /// Every subcarrier in the single group.
    pub fn all_ones(n: usize) -> Self {
        Self {
            n_subcarriers: n,
            groups: vec![vec![true; n]],
        }
    }

    /// Interleaved comb, subcarrier `n` to group `n mod G`.
    pub fn periodic(n: usize, g: usize) -> Self {
        Self {
            n_subcarriers: n,
            groups: (0..g).map(|gi| (0..n).map(|ni| ni % g == gi).collect()).collect(),
        }
    }

    /// Each subcarrier goes to a uniformly drawn group. Redrawn until every
    /// group holds at least `min_per_group` subcarriers.
    pub fn random<R: Rng + ?Sized>(n: usize, g: usize, min_per_group: usize, rng: &mut R) -> Result<Self> {
        if g * min_per_group > n {
            return Err(Error::InfeasiblePattern(format!(
                "{g} groups of at least {min_per_group} do not fit in {n} subcarriers"
            )));
        }
        loop {
            let assign: Vec<usize> = (0..n).map(|_| rng.gen_range(0..g)).collect();
            let p = Self::from_assignment(&assign, g);
            if (0..g).all(|gi| p.count(gi) >= min_per_group) {
                return Ok(p);
            }
        }
    }

    /// Pattern from a per-subcarrier group index; `usize::MAX` leaves it idle.
    pub fn from_assignment(assign: &[usize], g: usize) -> Self {
        Self {
            n_subcarriers: assign.len(),
            groups: (0..g).map(|gi| assign.iter().map(|&a| a == gi).collect()).collect(),
        }
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn get(&self, n: usize, g: usize) -> bool {
        self.groups[g][n]
    }

    pub fn column(&self, g: usize) -> &[bool] {
        &self.groups[g]
    }

    pub fn count(&self, g: usize) -> usize {
        self.groups[g].iter().filter(|&&b| b).count()
    }

    pub fn rows(&self, g: usize) -> Vec<usize> {
        (0..self.n_subcarriers).filter(|&n| self.groups[g][n]).collect()
    }

    /// No subcarrier is shared by two groups.
    pub fn is_feasible(&self) -> bool {
        (0..self.n_subcarriers).all(|n| self.groups.iter().filter(|c| c[n]).count() <= 1)
    }

    pub fn to_bitstrings(&self) -> Vec<String> {
        self.groups
            .iter()
            .map(|c| c.iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect()
    }

    pub fn from_bitstrings(bits: &[String]) -> Result<Self> {
        let cols = bits
            .iter()
            .map(|s| {
                s.chars()
                    .map(|ch| match ch {
                        '1' => Ok(true),
                        '0' => Ok(false),
                        _ => Err(Error::Config(format!("bad pattern character {ch:?}"))),
                    })
                    .collect::<Result<Vec<bool>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_columns(cols)
    }
}

/// Cyclic-shift code `b̃[n] = exp(-j 2 pi tau n / N)`, `n = 0..N-1`.
pub fn cyclic_shift_code(tau: usize, n: usize) -> CVec {
    CVec::from_fn(n, |i, _| dft_phase(tau * i, n))
}

/// Artificial delay of the `k`-th member (zero based) of a group of `size`.
pub fn group_shift(k: usize, size: usize, n: usize) -> usize {
    ((k * n) as f64 / size as f64).round() as usize
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn group_sizes(k: usize, g: usize) -> Vec<usize> {
    (0..g).map(|i| k / g + usize::from(i < k % g)).collect()
}

fn canonical(mut groups: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort_by_key(|g| g.first().copied().unwrap_or(usize::MAX));
    groups
}

/// Largest user count for which grouping is solved by exhaustive search.
pub const EXACT_GROUPING_MAX_USERS: usize = 10;

/// Split users into `g` groups of near-equal size, maximizing the summed
/// intra-group pairwise distance. Exhaustive for small `K`, greedy otherwise.
pub fn group_users(positions: &[[f64; 3]], g: usize) -> Result<Vec<Vec<usize>>> {
    let k = positions.len();
    if g == 0 || g > k {
        return Err(Error::Config(format!("cannot split {k} users into {g} groups")));
    }
    let d: Vec<Vec<f64>> = positions
        .iter()
        .map(|a| positions.iter().map(|b| dist(a, b)).collect())
        .collect();
    let sizes = group_sizes(k, g);
    let groups = if k <= EXACT_GROUPING_MAX_USERS {
        exact_grouping(&d, &sizes)
    } else {
        greedy_grouping(&d, &sizes)
    };
    Ok(canonical(groups))
}

fn exact_grouping(d: &[Vec<f64>], sizes: &[usize]) -> Vec<Vec<usize>> {
    struct Search<'a> {
        d: &'a [Vec<f64>],
        sizes: &'a [usize],
        current: Vec<Vec<usize>>,
        best: Option<(f64, Vec<Vec<usize>>)>,
    }
    impl Search<'_> {
        fn go(&mut self, user: usize, score: f64) {
            if user == self.d.len() {
                if self.best.as_ref().map_or(true, |(b, _)| score > *b + 1e-12) {
                    self.best = Some((score, self.current.clone()));
                }
                return;
            }
            for gi in 0..self.sizes.len() {
                if self.current[gi].len() == self.sizes[gi] {
                    continue;
                }
                // Empty groups of equal capacity are interchangeable.
                if self.current[gi].is_empty()
                    && (0..gi).any(|h| self.current[h].is_empty() && self.sizes[h] == self.sizes[gi])
                {
                    continue;
                }
                let gain: f64 = self.current[gi].iter().map(|&o| self.d[user][o]).sum();
                self.current[gi].push(user);
                self.go(user + 1, score + gain);
                self.current[gi].pop();
            }
        }
    }
    let mut s = Search {
        d,
        sizes,
        current: vec![Vec::new(); sizes.len()],
        best: None,
    };
    s.go(0, 0.0);
    s.best.map(|(_, g)| g).unwrap_or_default()
}

fn greedy_grouping(d: &[Vec<f64>], sizes: &[usize]) -> Vec<Vec<usize>> {
    let k = d.len();
    let mut free = vec![true; k];
    let mut groups: Vec<Vec<usize>> = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut members = Vec::with_capacity(size);
        if size >= 2 {
            let mut best: Option<(f64, usize, usize)> = None;
            for i in 0..k {
                for j in i + 1..k {
                    if free[i] && free[j] && best.map_or(true, |(b, _, _)| d[i][j] > b) {
                        best = Some((d[i][j], i, j));
                    }
                }
            }
            if let Some((_, i, j)) = best {
                members.extend([i, j]);
                free[i] = false;
                free[j] = false;
            }
        }
        while members.len() < size {
            let mut best: Option<(f64, usize)> = None;
            for i in (0..k).filter(|&i| free[i]) {
                let s: f64 = members.iter().map(|&o| d[i][o]).sum();
                if best.map_or(true, |(b, _)| s > b) {
                    best = Some((s, i));
                }
            }
            let (_, i) = best.expect("enough free users");
            members.push(i);
            free[i] = false;
        }
        groups.push(members);
    }
    groups
}

/// Complete pilot assignment for every user.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotAllocation {
    pub scheme: PilotScheme,
    pub n_subcarriers: usize,
    pub n_symbols: usize,
    pub power: f64,
    /// Users of each group, ascending.
    pub groups: Vec<Vec<usize>>,
    /// OFDM symbol on which each group transmits.
    pub group_symbol: Vec<usize>,
    /// Subcarriers of each group, ascending.
    pub group_rows: Vec<Vec<usize>>,
    /// Group of each user.
    pub user_group: Vec<usize>,
    /// Cyclic shift of each user (zero for random-phase codes).
    pub shifts: Vec<usize>,
    /// Pilot vector `u_k` (length N) of each user.
    pub pilots: Vec<CVec>,
}

fn check_power(power: f64) -> Result<()> {
    if power.is_finite() && power > 0.0 {
        Ok(())
    } else {
        Err(Error::Config("pilot power must be positive".into()))
    }
}

fn user_index(groups: &[Vec<usize>]) -> Result<Vec<usize>> {
    let k = groups.iter().map(Vec::len).sum::<usize>();
    let mut user_group = vec![usize::MAX; k];
    for (g, members) in groups.iter().enumerate() {
        for &u in members {
            if u >= k || user_group[u] != usize::MAX {
                return Err(Error::Config("groups must partition 0..K".into()));
            }
            user_group[u] = g;
        }
    }
    Ok(user_group)
}

fn coded_pilot(rows: &[usize], tau: usize, n: usize, power: f64) -> CVec {
    let code = cyclic_shift_code(tau, n);
    let scale = C64::from((power / rows.len() as f64).sqrt());
    let mut u = CVec::zeros(n);
    for &r in rows {
        u[r] = code[r] * scale;
    }
    u
}

/// Shared assembly for the cyclic-shift schemes.
fn shifted(
    scheme: PilotScheme,
    n: usize,
    power: f64,
    groups: Vec<Vec<usize>>,
    group_rows: Vec<Vec<usize>>,
    group_symbol: Vec<usize>,
) -> Result<PilotAllocation> {
    check_power(power)?;
    let user_group = user_index(&groups)?;
    let k = user_group.len();
    let mut shifts = vec![0; k];
    let mut pilots = vec![CVec::zeros(n); k];
    for (g, members) in groups.iter().enumerate() {
        if group_rows[g].is_empty() {
            return Err(Error::EmptyGroup(g));
        }
        for (pos, &u) in members.iter().enumerate() {
            shifts[u] = group_shift(pos, members.len(), n);
            pilots[u] = coded_pilot(&group_rows[g], shifts[u], n, power);
        }
    }
    let n_symbols = group_symbol.iter().max().map_or(1, |s| s + 1);
    Ok(PilotAllocation {
        scheme,
        n_subcarriers: n,
        n_symbols,
        power,
        groups,
        group_symbol,
        group_rows,
        user_group,
        shifts,
        pilots,
    })
}

impl PilotAllocation {
    /// Grouped FDM plus in-group cyclic-shift CDM on a single symbol.
    pub fn nfdcdm(pattern: &GroupPattern, groups: &[Vec<usize>], power: f64) -> Result<Self> {
        if pattern.n_groups() != groups.len() {
            return Err(shape("pattern groups", groups.len(), pattern.n_groups()));
        }
        if !pattern.is_feasible() {
            return Err(Error::InfeasiblePattern(
                "a subcarrier is assigned to more than one group".into(),
            ));
        }
        let rows = (0..groups.len()).map(|g| pattern.rows(g)).collect();
        shifted(
            PilotScheme::NfdCdm,
            pattern.n_subcarriers,
            power,
            groups.to_vec(),
            rows,
            vec![0; groups.len()],
        )
    }

    /// All users share all subcarriers, separated by cyclic shifts.
    pub fn o_cdm(k: usize, n: usize, power: f64) -> Result<Self> {
        shifted(
            PilotScheme::OCdm,
            n,
            power,
            vec![(0..k).collect()],
            vec![(0..n).collect()],
            vec![0],
        )
    }

    /// One user per group on the comb `n mod K = k`.
    pub fn sr_fdm(k: usize, n: usize, power: f64) -> Result<Self> {
        shifted(
            PilotScheme::SrFdm,
            n,
            power,
            (0..k).map(|u| vec![u]).collect(),
            (0..k).map(|u| (0..n).filter(|i| i % k == u).collect()).collect(),
            vec![0; k],
        )
    }

    /// Up to `per_symbol` users per OFDM symbol, cyclic shifts within a symbol.
    pub fn orthogonal_multi_symbol(k: usize, n: usize, power: f64, per_symbol: usize) -> Result<Self> {
        if per_symbol == 0 {
            return Err(Error::Config("per-symbol user count must be positive".into()));
        }
        let groups: Vec<Vec<usize>> = (0..k)
            .collect::<Vec<_>>()
            .chunks(per_symbol)
            .map(<[usize]>::to_vec)
            .collect();
        let g = groups.len();
        shifted(
            PilotScheme::OrthogonalMultiSymbol,
            n,
            power,
            groups,
            vec![(0..n).collect(); g],
            (0..g).collect(),
        )
    }

    /// Independent uniform random phases on all subcarriers for every user.
    pub fn no_cdm<R: Rng + ?Sized>(k: usize, n: usize, power: f64, rng: &mut R) -> Result<Self> {
        let phases: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..n).map(|_| 2.0 * PI * rng.gen::<f64>()).collect())
            .collect();
        Self::no_cdm_from_phases(&phases, power)
    }

    fn no_cdm_from_phases(phases: &[Vec<f64>], power: f64) -> Result<Self> {
        check_power(power)?;
        let k = phases.len();
        let n = phases.first().map_or(0, Vec::len);
        if k == 0 || n == 0 {
            return Err(Error::Config("empty random-phase allocation".into()));
        }
        let amp = (power / n as f64).sqrt();
        let pilots = phases
            .iter()
            .map(|p| CVec::from_iterator(n, p.iter().map(|&t| C64::from_polar(amp, t))))
            .collect();
        Ok(Self {
            scheme: PilotScheme::NoCdm,
            n_subcarriers: n,
            n_symbols: 1,
            power,
            groups: vec![(0..k).collect()],
            group_symbol: vec![0],
            group_rows: vec![(0..n).collect()],
            user_group: vec![0; k],
            shifts: vec![0; k],
            pilots,
        })
    }

    pub fn n_users(&self) -> usize {
        self.pilots.len()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// Fraction of the subcarrier-symbol grid that carries pilots.
    pub fn pilot_ratio(&self) -> f64 {
        let used: usize = self.group_rows.iter().map(Vec::len).sum();
        used as f64 / (self.n_subcarriers * self.n_symbols) as f64
    }

    /// Per-user sensing matrix `A_k = diag(ũ_k) F_P` over the rows of its group.
    pub fn sensing_matrices(&self, n_taps: usize) -> Vec<CMat> {
        (0..self.n_users())
            .map(|u| {
                let rows = &self.group_rows[self.user_group[u]];
                let p = &self.pilots[u];
                CMat::from_fn(rows.len(), n_taps, |i, l| {
                    p[rows[i]] * dft_phase(rows[i] * l, self.n_subcarriers)
                })
            })
            .collect()
    }

    /// Received pilots `Y_s = sum_k diag(u_k) H_k + Z_s` for every symbol.
    pub fn transmit<R: Rng + ?Sized>(&self, h: &[CMat], noise_var: f64, rng: &mut R) -> Result<Vec<CMat>> {
        if h.len() != self.n_users() {
            return Err(shape("transmit users", self.n_users(), h.len()));
        }
        let n = self.n_subcarriers;
        let m = h[0].ncols();
        let mut y = vec![CMat::zeros(n, m); self.n_symbols];
        for (u, hu) in h.iter().enumerate() {
            if hu.nrows() != n || hu.ncols() != m {
                return Err(shape("transmit channel", format!("{n}x{m}"), format!("{}x{}", hu.nrows(), hu.ncols())));
            }
            let s = self.group_symbol[self.user_group[u]];
            let p = &self.pilots[u];
            for c in 0..m {
                for r in 0..n {
                    y[s][(r, c)] += p[r] * hu[(r, c)];
                }
            }
        }
        if noise_var > 0.0 {
            for ys in &mut y {
                for v in ys.iter_mut() {
                    *v += complex_normal(rng, noise_var);
                }
            }
        }
        Ok(y)
    }

    /// Rows of group `g` taken from its symbol's received matrix.
    pub fn group_observation(&self, y: &[CMat], g: usize) -> CMat {
        let ys = &y[self.group_symbol[g]];
        ys.select_rows(self.group_rows[g].iter())
    }

    pub fn to_file(&self) -> AllocationFile {
        let phases = (self.scheme == PilotScheme::NoCdm).then(|| {
            self.pilots.iter().map(|p| p.iter().map(|c| c.arg()).collect()).collect()
        });
        let pattern = self
            .group_rows
            .iter()
            .map(|rows| {
                let mut s = vec!['0'; self.n_subcarriers];
                for &r in rows {
                    s[r] = '1';
                }
                s.into_iter().collect()
            })
            .collect();
        AllocationFile {
            format: ALLOCATION_FORMAT.into(),
            scheme: self.scheme,
            n_subcarriers: self.n_subcarriers,
            power: self.power,
            groups: self.groups.clone(),
            group_symbol: self.group_symbol.clone(),
            pattern,
            shifts: self.shifts.clone(),
            phases,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str::<AllocationFile>(s)?.into_allocation()
    }
}

pub const ALLOCATION_FORMAT: &str = "xlmimo-pilots/1";

/// On-disk pilot allocation. The pattern holds one bitstring per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationFile {
    pub format: String,
    pub scheme: PilotScheme,
    pub n_subcarriers: usize,
    pub power: f64,
    pub groups: Vec<Vec<usize>>,
    pub group_symbol: Vec<usize>,
    pub pattern: Vec<String>,
    pub shifts: Vec<usize>,
    pub phases: Option<Vec<Vec<f64>>>,
}

impl AllocationFile {
    pub fn into_allocation(self) -> Result<PilotAllocation> {
        if self.format != ALLOCATION_FORMAT {
            return Err(Error::Config(format!("unknown allocation format {}", self.format)));
        }
        if let Some(phases) = &self.phases {
            return PilotAllocation::no_cdm_from_phases(phases, self.power);
        }
        let pattern = GroupPattern::from_bitstrings(&self.pattern)?;
        if pattern.n_subcarriers != self.n_subcarriers {
            return Err(shape("pattern length", self.n_subcarriers, pattern.n_subcarriers));
        }
        let rows = (0..pattern.n_groups()).map(|g| pattern.rows(g)).collect();
        let alloc = shifted(
            self.scheme,
            self.n_subcarriers,
            self.power,
            self.groups,
            rows,
            self.group_symbol,
        )?;
        if alloc.shifts != self.shifts {
            return Err(Error::Config("stored shifts disagree with the group layout".into()));
        }
        Ok(alloc)
    }
}
