use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xlmimo::model::{build_partial_dft, CMat, DftOperators, C64};
use xlmimo::pilots::{
    cyclic_shift_code, group_shift, group_users, GroupPattern, PilotAllocation, PilotScheme,
};
use xlmimo::Error;

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn intra_distance(groups: &[Vec<usize>], pos: &[[f64; 3]]) -> f64 {
    groups
        .iter()
        .map(|g| {
            let mut s = 0.0;
            for (i, &a) in g.iter().enumerate() {
                for &b in &g[i + 1..] {
                    s += dist(&pos[a], &pos[b]);
                }
            }
            s
        })
        .sum()
}

/// Best summed intra-group distance over every labelling of users into
/// `g` groups whose sizes differ by at most one.
fn brute_force_best(pos: &[[f64; 3]], g: usize) -> f64 {
    let k = pos.len();
    let mut want: Vec<usize> = (0..g).map(|i| k / g + usize::from(i < k % g)).collect();
    want.sort_unstable();
    let mut best = f64::NEG_INFINITY;
    let total = g.pow(k as u32);
    for code in 0..total {
        let mut groups = vec![Vec::new(); g];
        let mut c = code;
        for u in 0..k {
            groups[c % g].push(u);
            c /= g;
        }
        let mut sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        if sizes == want {
            best = best.max(intra_distance(&groups, pos));
        }
    }
    best
}

fn all_schemes(k: usize, n: usize, power: f64) -> Vec<PilotAllocation> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let groups: Vec<Vec<usize>> = (0..2).map(|g| (0..k).filter(|u| u % 2 == g).collect()).collect();
    vec![
        PilotAllocation::nfdcdm(&GroupPattern::periodic(n, 2), &groups, power).unwrap(),
        PilotAllocation::o_cdm(k, n, power).unwrap(),
        PilotAllocation::sr_fdm(k, n, power).unwrap(),
        PilotAllocation::no_cdm(k, n, power, &mut rng).unwrap(),
        PilotAllocation::orthogonal_multi_symbol(k, n, power, 3).unwrap(),
    ]
}

#[test]
fn two_users_one_group() {
    let g = group_users(&[[0.0; 3], [1.0, 0.0, 0.0]], 1).unwrap();
    assert_eq!(g, vec![vec![0, 1]]);
}

#[test]
fn square_corners_pair_diagonally() {
    let pos = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
    assert_eq!(group_users(&pos, 2).unwrap(), vec![vec![0, 2], vec![1, 3]]);
}

#[test]
fn as_many_groups_as_users_gives_singletons() {
    let pos = [[0.0; 3], [1.0, 2.0, 0.0], [5.0, 1.0, 0.0], [3.0, 3.0, 3.0]];
    assert_eq!(group_users(&pos, 4).unwrap(), vec![vec![0], vec![1], vec![2], vec![3]]);
}

#[test]
fn grouping_rejects_bad_counts() {
    let pos = [[0.0; 3], [1.0, 0.0, 0.0]];
    assert!(group_users(&pos, 0).is_err());
    assert!(group_users(&pos, 3).is_err());
}

#[test]
fn greedy_grouping_partitions_large_populations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pos: Vec<[f64; 3]> = (0..16)
        .map(|_| {
            use rand::Rng;
            [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0), 1.5]
        })
        .collect();
    let groups = group_users(&pos, 8).unwrap();
    let mut all: Vec<usize> = groups.concat();
    all.sort_unstable();
    assert_eq!(all, (0..16).collect::<Vec<_>>());
    assert!(groups.iter().all(|g| g.len() == 2));
}

#[test]
fn shift_code_examples() {
    let c = cyclic_shift_code(0, 6);
    assert!(c.iter().all(|z| (z - C64::new(1.0, 0.0)).norm() < 1e-15));
    let c = cyclic_shift_code(1, 4);
    let want = [C64::new(1.0, 0.0), C64::new(0.0, -1.0), C64::new(-1.0, 0.0), C64::new(0.0, 1.0)];
    for (z, w) in c.iter().zip(want) {
        assert!((z - w).norm() < 1e-15);
    }
}

#[test]
fn shifts_are_evenly_spread() {
    assert_eq!((0..4).map(|k| group_shift(k, 4, 128)).collect::<Vec<_>>(), vec![0, 32, 64, 96]);
    assert_eq!((0..3).map(|k| group_shift(k, 3, 8)).collect::<Vec<_>>(), vec![0, 3, 5]);
}

#[test]
fn ocdm_uses_every_subcarrier_with_spread_shifts() {
    let a = PilotAllocation::o_cdm(4, 16, 16.0).unwrap();
    assert_eq!(a.scheme, PilotScheme::OCdm);
    assert_eq!(a.shifts, vec![0, 4, 8, 12]);
    for p in &a.pilots {
        assert!(p.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }
    assert_eq!(a.pilot_ratio(), 1.0);
}

#[test]
fn pilots_are_phase_ramps_inside_the_group() {
    let n = 16;
    let pattern = GroupPattern::periodic(n, 2);
    let a = PilotAllocation::nfdcdm(&pattern, &[vec![0, 1], vec![2, 3]], n as f64).unwrap();
    for u in 0..4 {
        let g = a.user_group[u];
        let amp = (n as f64 / 8.0).sqrt();
        for r in 0..n {
            let z = a.pilots[u][r];
            if pattern.get(r, g) {
                let want = C64::from_polar(amp, -2.0 * std::f64::consts::PI * (a.shifts[u] * r) as f64 / n as f64);
                assert!((z - want).norm() < 1e-12);
            } else {
                assert_eq!(z, C64::new(0.0, 0.0));
            }
        }
    }
}

#[test]
fn users_of_different_groups_are_orthogonal() {
    let n = 32;
    let a = PilotAllocation::nfdcdm(&GroupPattern::periodic(n, 4), &[vec![0, 4], vec![1, 5], vec![2, 6], vec![3, 7]], n as f64)
        .unwrap();
    for i in 0..8 {
        for j in 0..8 {
            if a.user_group[i] != a.user_group[j] {
                let ip: C64 = a.pilots[i].iter().zip(a.pilots[j].iter()).map(|(x, y)| x.conj() * y).sum();
                assert_eq!(ip, C64::new(0.0, 0.0));
            }
        }
    }
}

#[test]
fn single_group_matches_ocdm_and_singletons_match_srfdm() {
    let (k, n) = (4, 16);
    let one = PilotAllocation::nfdcdm(&GroupPattern::all_ones(n), &[(0..k).collect()], n as f64).unwrap();
    let ocdm = PilotAllocation::o_cdm(k, n, n as f64).unwrap();
    assert_eq!(one.pilots, ocdm.pilots);
    assert_eq!(one.sensing_matrices(4), ocdm.sensing_matrices(4));
    let singles: Vec<Vec<usize>> = (0..k).map(|u| vec![u]).collect();
    let comb = PilotAllocation::nfdcdm(&GroupPattern::periodic(n, k), &singles, n as f64).unwrap();
    let srfdm = PilotAllocation::sr_fdm(k, n, n as f64).unwrap();
    assert_eq!(comb.pilots, srfdm.pilots);
}

#[test]
fn full_pilots_without_shift_sense_through_fd() {
    let (n, l) = (16, 4);
    let a = PilotAllocation::o_cdm(1, n, n as f64).unwrap();
    let s = &a.sensing_matrices(l)[0];
    let rows: Vec<usize> = (0..n).collect();
    let fd = build_partial_dft(&rows, l, n);
    assert!((s - fd).norm() < 1e-12);
}

#[test]
fn square_contiguous_sensing_matrix_is_full_rank() {
    let (n, l) = (16, 4);
    let pattern = GroupPattern::from_columns(vec![(0..n).map(|r| r < l).collect()]).unwrap();
    let a = PilotAllocation::nfdcdm(&pattern, &[vec![0]], n as f64).unwrap();
    let s = &a.sensing_matrices(l)[0];
    assert_eq!(s.shape(), (l, l));
    let svd = s.clone().svd(false, false);
    let min = svd.singular_values.min();
    assert!(min > 1e-6, "smallest singular value {min}");
}

#[test]
fn sensing_matrix_is_pilot_times_dft() {
    let (n, l) = (24, 5);
    let pattern = GroupPattern::periodic(n, 3);
    let a = PilotAllocation::nfdcdm(&pattern, &[vec![0, 3], vec![1, 4], vec![2]], n as f64).unwrap();
    for (u, s) in a.sensing_matrices(l).iter().enumerate() {
        let rows = &a.group_rows[a.user_group[u]];
        let fp = build_partial_dft(rows, l, n);
        let d = CMat::from_diagonal(&nalgebra::DVector::from_iterator(rows.len(), rows.iter().map(|&r| a.pilots[u][r])));
        assert!((s - d * fp).norm() < 1e-10);
    }
}

#[test]
fn half_spread_shifts_give_orthogonal_sensing() {
    let (n, l) = (16, 4);
    let a = PilotAllocation::o_cdm(2, n, n as f64).unwrap();
    assert_eq!(a.shifts, vec![0, 8]);
    let s = a.sensing_matrices(l);
    let cross = s[0].adjoint() * &s[1];
    assert!(cross.norm() < 1e-10);
    let gram = s[0].adjoint() * &s[0];
    assert!((gram - CMat::identity(l, l) * C64::from(n as f64)).norm() < 1e-9);
}

#[test]
fn transmit_is_noise_free_at_zero_variance() {
    let (n, l) = (8, 2);
    let ops = DftOperators::with_dims(n, l, 1, 2);
    let a = PilotAllocation::o_cdm(2, n, n as f64).unwrap();
    let x = [CMat::from_element(l, 2, C64::new(0.5, 0.1)), CMat::from_element(l, 2, C64::new(-0.2, 0.3))];
    let h: Vec<CMat> = x.iter().map(|xk| ops.cir_to_frequency(xk).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = a.transmit(&h, 0.0, &mut rng).unwrap();
    assert_eq!(y.len(), 1);
    let s = a.sensing_matrices(l);
    let want = &s[0] * &x[0] * ops.fa() + &s[1] * &x[1] * ops.fa();
    assert!((&y[0] - want).norm() < 1e-10);
    assert!(a.transmit(&h[..1], 0.0, &mut rng).is_err());
}

#[test]
fn orthogonal_multi_symbol_uses_one_symbol_per_eight_users() {
    let a = PilotAllocation::orthogonal_multi_symbol(20, 64, 64.0, 8).unwrap();
    assert_eq!(a.n_symbols, 3);
    assert_eq!(a.groups.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 8, 4]);
    assert_eq!(a.group_symbol, vec![0, 1, 2]);
    assert_abs_diff_eq!(a.pilot_ratio(), 1.0);
    assert!(PilotAllocation::orthogonal_multi_symbol(4, 8, 8.0, 0).is_err());
}

#[test]
fn pilot_ratio_counts_used_subcarriers() {
    let pattern = GroupPattern::from_assignment(&[0, 1, usize::MAX, 0, 1, usize::MAX, 0, 1], 2);
    let a = PilotAllocation::nfdcdm(&pattern, &[vec![0], vec![1]], 8.0).unwrap();
    assert_abs_diff_eq!(a.pilot_ratio(), 0.75);
}

#[test]
fn allocation_errors() {
    let overlapping = GroupPattern::from_columns(vec![vec![true, true], vec![true, false]]).unwrap();
    assert!(matches!(
        PilotAllocation::nfdcdm(&overlapping, &[vec![0], vec![1]], 2.0),
        Err(Error::InfeasiblePattern(_))
    ));
    let empty = GroupPattern::from_columns(vec![vec![true, true], vec![false, false]]).unwrap();
    assert!(matches!(
        PilotAllocation::nfdcdm(&empty, &[vec![0], vec![1]], 2.0),
        Err(Error::EmptyGroup(1))
    ));
    assert!(PilotAllocation::nfdcdm(&GroupPattern::periodic(4, 2), &[vec![0, 1]], 4.0).is_err());
    assert!(PilotAllocation::nfdcdm(&GroupPattern::periodic(4, 2), &[vec![0], vec![0]], 4.0).is_err());
    assert!(PilotAllocation::o_cdm(2, 8, 0.0).is_err());
    assert!(GroupPattern::from_bitstrings(&["10x".to_string()]).is_err());
    assert!(GroupPattern::from_columns(vec![vec![true], vec![true, false]]).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(GroupPattern::random(8, 3, 3, &mut rng).is_err());
}

#[test]
fn allocation_json_roundtrip() {
    for a in all_schemes(6, 24, 24.0) {
        let back = PilotAllocation::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back.scheme, a.scheme);
        assert_eq!(back.groups, a.groups);
        assert_eq!(back.group_rows, a.group_rows);
        assert_eq!(back.shifts, a.shifts);
        for (p, q) in back.pilots.iter().zip(&a.pilots) {
            assert!((p - q).norm() < 1e-12);
        }
    }
}

#[test]
fn allocation_json_rejects_tampering() {
    let a = PilotAllocation::o_cdm(2, 8, 8.0).unwrap();
    let mut f = a.to_file();
    f.shifts = vec![0, 1];
    assert!(f.clone().into_allocation().is_err());
    f.shifts = a.shifts.clone();
    f.format = "nope".into();
    assert!(f.into_allocation().is_err());
}

#[test]
fn pattern_bitstrings_roundtrip() {
    let p = GroupPattern::periodic(10, 3);
    assert_eq!(p.to_bitstrings()[0], "1001001001");
    assert_eq!(GroupPattern::from_bitstrings(&p.to_bitstrings()).unwrap(), p);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn grouping_matches_brute_force(
        pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 2..8),
        g in 1usize..4,
    ) {
        let pos: Vec<[f64; 3]> = pts.iter().map(|&(x, y)| [x, y, 1.5]).collect();
        prop_assume!(g <= pos.len());
        let groups = group_users(&pos, g).unwrap();
        let mut all: Vec<usize> = groups.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..pos.len()).collect::<Vec<_>>());
        let got = intra_distance(&groups, &pos);
        let best = brute_force_best(&pos, g);
        prop_assert!((got - best).abs() <= 1e-9 * best.max(1.0), "got {} best {}", got, best);
    }

    #[test]
    fn shift_codes_have_unit_modulus(n in 1usize..64, tau in 0usize..64) {
        prop_assume!(tau < n);
        prop_assert!(cyclic_shift_code(tau, n).iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn every_scheme_spends_the_full_power(k in 2usize..9, n_mult in 1usize..5, power in 0.5f64..200.0) {
        let n = 8 * n_mult;
        for a in all_schemes(k, n, power) {
            for p in &a.pilots {
                prop_assert!((p.norm_squared() - power).abs() < 1e-9 * power);
            }
        }
    }

    #[test]
    fn constructed_allocations_are_feasible(k in 2usize..9, seed in any::<u64>()) {
        let n = 32;
        let g = 1 + (seed as usize % k.min(4));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pattern = GroupPattern::random(n, g, 2, &mut rng).unwrap();
        prop_assert!(pattern.is_feasible());
        let groups: Vec<Vec<usize>> = (0..g).map(|gi| (0..k).filter(|u| u % g == gi).collect()).collect();
        let a = PilotAllocation::nfdcdm(&pattern, &groups, n as f64).unwrap();
        for r in 0..n {
            let owners = (0..g).filter(|&gi| a.group_rows[gi].contains(&r)).count();
            prop_assert!(owners <= 1);
        }
        for (u, p) in a.pilots.iter().enumerate() {
            let amp = (n as f64 / a.group_rows[a.user_group[u]].len() as f64).sqrt();
            for z in p.iter() {
                prop_assert!(z.norm() < 1e-15 || (z.norm() - amp).abs() < 1e-12);
            }
        }
    }
}
