mod common;

use std::sync::Arc;

use common::{chain, stationary, three_cell_cells, tv, two_cell_cells, vec_mat};
use proptest::prelude::*;
use towerlab::maps::{
    make_affine_scheme, make_counterexample_scheme, AffineMarkovMap, CounterexampleMap, DoublingMap, DynamicalMap,
    Interval, LsvMap, State, SystemRegistry,
};
use towerlab::rng::{Domain, Stream};
use towerlab::scheme::{build_first_return_scheme, estimate_tail, integrability_report, InducingScheme};
use towerlab::tower::{
    build_tower, invariant_density, invariant_density_on, lift_observable, push_density, star_normalize,
    tv_distance, DensitySampler, DiscretizedDensity, Tower, TransferOperator,
};
use towerlab::Error;

fn counterexample_tower() -> Tower {
    build_tower(Arc::new(make_counterexample_scheme([0.5, 0.25, 0.25]).unwrap()), 10).unwrap()
}

fn lsv_scheme(h: usize) -> InducingScheme {
    build_first_return_scheme(Arc::new(LsvMap::new(0.5).unwrap()), Interval::left_open(0.5, 1.0), h, 0.05).unwrap()
}

fn affine_tower(cells: Vec<towerlab::maps::AffineCellSpec>) -> Tower {
    let map = AffineMarkovMap::new(cells).unwrap();
    build_tower(Arc::new(make_affine_scheme(&map).unwrap()), 16).unwrap()
}

#[test]
fn counterexample_columns() {
    let t = counterexample_tower();
    assert_eq!(t.height(), 3);
    assert_eq!(t.level_masses(), &[1.0, 0.5, 0.25]);
    assert!((t.total_mass() - (0.5 + 2.0 * 0.25 + 3.0 * 0.25)).abs() < 1e-15);
    let recomputed: f64 = (0..3)
        .map(|l| t.scheme().cells().iter().filter(|c| c.return_time > l).map(|c| c.measure).sum::<f64>())
        .sum();
    assert_eq!(recomputed, t.total_mass());
}

#[test]
fn height_cap_below_return_time_is_rejected() {
    let s = Arc::new(make_counterexample_scheme([0.5, 0.25, 0.25]).unwrap());
    assert!(matches!(build_tower(s, 2), Err(Error::HeightCapBelowReturnTime { cap: 2, return_time: 3 })));
}

#[test]
fn single_level_tower_is_the_induced_map() {
    let sys = SystemRegistry::builtin().build("doubling", &serde_json::json!({"scheme": "binary"})).unwrap();
    let t = build_tower(Arc::new(sys.scheme(&Default::default()).unwrap()), 1).unwrap();
    assert_eq!(t.height(), 1);
    let p = t.point(State::new(0.3), 0).unwrap();
    let q = t.step(&p).unwrap();
    assert_eq!(q.level, 0);
    assert_eq!(q.x, DoublingMap.step(State::new(0.3)));
}

#[test]
fn climb_then_drop() {
    let t = counterexample_tower();
    let f = CounterexampleMap::new([0.5, 0.25, 0.25]).unwrap();
    let x = State::new(0.8);
    let p = t.point(x, 0).unwrap();
    assert_eq!(t.return_time(p.cell), 3);
    let p1 = t.step(&p).unwrap();
    assert_eq!((p1.x, p1.level), (x, 1));
    let p2 = t.step(&p1).unwrap();
    let p3 = t.step(&p2).unwrap();
    assert_eq!(p3.level, 0);
    assert_eq!(p3.x, f.step(f.step(f.step(x))));
    assert_eq!(t.hat_return_time(&p1), 2);
    assert_eq!(t.hat_return_time(&p), 0);
}

#[test]
fn lsv_projection_of_level_one() {
    let t = build_tower(Arc::new(lsv_scheme(200)), 200).unwrap();
    let p = t.point(State::new(0.75), 1).unwrap();
    assert!((t.project(&p).x - 0.5).abs() < 1e-15);
    assert_eq!(t.project(&t.point(State::new(0.75), 0).unwrap()).x, 0.75);
}

#[test]
fn lsv_total_mass_matches_mean_return_time() {
    let s = lsv_scheme(1000);
    let tail = estimate_tail(&s);
    let rep = integrability_report(&tail, 0.05);
    let t = build_tower(Arc::new(s), 1000).unwrap();
    // Σ_ℓ m{R>ℓ} over retained cells against Σ_n counts(n), which adds the
    // discarded mass once per level
    let gap = (rep.r_mean - t.total_mass()).abs();
    assert!(gap <= tail.discarded_mass * 1001.0 + 1e-9, "gap {gap}");
    assert!(gap <= rep.budget.max(rep.remainder) + tail.discarded_mass * 1001.0);
}

#[test]
fn semiconjugacy_on_lsv() {
    let t = build_tower(Arc::new(lsv_scheme(300)), 300).unwrap();
    let f = LsvMap::new(0.5).unwrap();
    let mut st = Stream::new(11, Domain::Ensemble, 0);
    let mut checked = 0;
    for _ in 0..1000 {
        let p = t.sample_reference(&mut st).unwrap();
        let mut q = p;
        let mut y = t.project(&p);
        for _ in 0..50 {
            match t.step(&q) {
                Ok(next) => q = next,
                Err(Error::EscapedTruncation) => break,
                Err(e) => panic!("{e}"),
            }
            y = f.step(y);
            assert!((t.project(&q).x - y.x).abs() <= 1e-10);
            checked += 1;
        }
    }
    assert!(checked > 40_000);
}

#[test]
fn doubling_density_is_uniform() {
    let s = build_first_return_scheme(Arc::new(DoublingMap), Interval::left_open(0.5, 1.0), 30, 1e-3).unwrap();
    let t = build_tower(Arc::new(s), 30).unwrap();
    let d = invariant_density(&t, 1000, 4).unwrap();
    for v in &d.base {
        assert!((v - 2.0).abs() < 1e-8, "{v}");
    }
}

#[test]
fn counterexample_density_is_the_chain_stationary_vector() {
    let t = counterexample_tower();
    // F|ω1 = f onto ω2∪ω3, F|ω2 = f² onto ω2∪ω3, F|ω3 = f³ onto ω1
    let m = [0.5, 0.25, 0.25];
    let q = |j: usize| m[j] / (m[1] + m[2]);
    let p = vec![vec![0.0, q(1), q(2)], vec![0.0, q(1), q(2)], vec![1.0, 0.0, 0.0]];
    let pi = stationary(&p);
    for res in [1, 3] {
        let d = invariant_density(&t, 10_000, res).unwrap();
        let g = &d.operator.grid;
        for (j, c) in g.cells.iter().enumerate() {
            let mass: f64 = d.base[c.base_offset..c.base_offset + c.bins].iter().map(|v| v * c.width()).sum();
            assert!((mass - pi[j]).abs() < 1e-9, "res {res} cell {j}: {mass} vs {}", pi[j]);
        }
    }
}

#[test]
fn lsv_density_is_bounded_under_refinement() {
    let t = build_tower(Arc::new(lsv_scheme(200)), 200).unwrap();
    let sups: Vec<f64> = [1, 2, 4].iter().map(|&r| invariant_density(&t, 5000, r).unwrap().sup_base()).collect();
    for s in &sups {
        assert!(s.is_finite() && *s > 0.0);
    }
    let (lo, hi) = (sups.iter().cloned().fold(f64::MAX, f64::min), sups.iter().cloned().fold(0.0, f64::max));
    assert!(hi / lo < 1.1, "{sups:?}");
}

#[test]
fn push_preserves_mass() {
    let t = affine_tower(three_cell_cells());
    let op = TransferOperator::new(&t, 2).unwrap();
    let grid = op.grid.clone();
    let mut st = Stream::new(5, Domain::Control, 0);
    let masses: Vec<f64> = (0..grid.tower_bins).map(|_| st.uniform()).collect();
    let total: f64 = masses.iter().sum();
    let d = DiscretizedDensity::from_masses(grid, &masses.iter().map(|m| m / total).collect::<Vec<_>>());
    let mut cur = d;
    for _ in 0..20 {
        let next = push_density(&op, &cur, 1).unwrap();
        assert!((next.norm() - cur.norm()).abs() <= 1e-12);
        cur = next;
    }
}

#[test]
fn invariant_density_is_a_fixed_point() {
    let t = affine_tower(three_cell_cells());
    let d = invariant_density(&t, 10_000, 2).unwrap();
    let op = &d.operator;
    for n in [1, 10, 100] {
        let pushed = push_density(op, &d.tower, n).unwrap();
        assert!(tv_distance(&pushed, &d.tower).unwrap() <= 1e-9);
    }
    let lt = build_tower(Arc::new(lsv_scheme(200)), 200).unwrap();
    for res in [1, 2] {
        let d = invariant_density(&lt, 5000, res).unwrap();
        let eps = tv_distance(&push_density(&d.operator, &d.tower, 100).unwrap(), &d.tower).unwrap();
        assert!(eps <= 100.0 * d.leaked_fraction + 1e-8, "res {res}: {eps}");
    }
}

#[test]
fn constant_observable_normalises_to_one() {
    let t = affine_tower(two_cell_cells());
    let d = invariant_density(&t, 10_000, 3).unwrap();
    let s = star_normalize(&vec![2.5; d.tower.values.len()], &d.tower).unwrap();
    assert!(s.phi_star.iter().all(|v| (v - 1.0).abs() < 1e-12));
    let pushed = push_density(&d.operator, &s.lambda, 7).unwrap();
    assert!(tv_distance(&pushed, &d.tower).unwrap() < 1e-9);
    assert!(matches!(star_normalize(&vec![0.0; d.tower.values.len()], &d.tower), Err(Error::InvalidParameter(_))));
}

#[test]
fn star_normalised_cosine() {
    let t = build_tower(Arc::new(lsv_scheme(200)), 200).unwrap();
    let d = invariant_density(&t, 5000, 2).unwrap();
    let phi = lift_observable(&t, &d.operator.grid, 4, &|x| (2.0 * std::f64::consts::PI * x).cos());
    let s = star_normalize(&phi, &d.tower).unwrap();
    assert!(s.phi_star.iter().all(|&v| (1.0 / 3.0..=3.0).contains(&v)));
    let m = d.tower.masses();
    let integral: f64 = s.phi_star.iter().zip(&m).map(|(a, b)| a * b).sum::<f64>() / m.iter().sum::<f64>();
    assert!((integral - 1.0).abs() < 1e-12);
}

#[test]
fn tv_distance_basics() {
    let t = affine_tower(two_cell_cells());
    let op = TransferOperator::new(&t, 1).unwrap();
    let g = op.grid.clone();
    let a = DiscretizedDensity::lebesgue_on_base(g.clone(), [0]);
    let b = DiscretizedDensity::lebesgue_on_base(g.clone(), [1]);
    let scale = |d: DiscretizedDensity| {
        let n = d.norm();
        DiscretizedDensity { values: d.values.iter().map(|v| v / n).collect(), ..d }
    };
    let (a, b) = (scale(a), scale(b));
    assert_eq!(tv_distance(&a, &a).unwrap(), 0.0);
    assert!((tv_distance(&a, &b).unwrap() - 1.0).abs() < 1e-15);
    let other = TransferOperator::new(&t, 2).unwrap();
    let c = DiscretizedDensity::reference(other.grid.clone());
    assert!(matches!(tv_distance(&a, &c), Err(Error::GridMismatch)));
}

#[test]
fn finite_chain_tv_matches_matrix_powers() {
    for cells in [two_cell_cells(), three_cell_cells()] {
        let ch = chain(&cells);
        let t = affine_tower(cells.clone());
        let op = Arc::new(TransferOperator::new(&t, 1).unwrap());
        let nu = invariant_density_on(op.clone(), 100_000, 1e-15).unwrap();
        let exact_nu = stationary(&ch.tower);
        // λ = Lebesgue on the base, normalised
        let base_len: f64 = cells.iter().map(|c| c.measure).sum();
        let mut lam = vec![0.0; ch.states.len()];
        for (j, c) in cells.iter().enumerate() {
            lam[ch.offset[j]] = c.measure / base_len;
        }
        let lam_grid = DiscretizedDensity::from_masses(op.grid.clone(), &lam);
        let mut exact = lam.clone();
        for n in 0..=50 {
            let pushed = push_density(&op, &lam_grid, n).unwrap();
            let got = tv_distance(&pushed, &nu.tower).unwrap();
            let want = tv(&exact, &exact_nu);
            assert!((got - want).abs() < 1e-10, "n {n}: {got} vs {want}");
            exact = vec_mat(&exact, &ch.tower);
        }
    }
}

#[test]
fn projected_nu_matches_birkhoff_sampling() {
    let t = build_tower(Arc::new(lsv_scheme(300)), 300).unwrap();
    let d = invariant_density(&t, 5000, 4).unwrap();
    let sampler = DensitySampler::new(&d.tower).unwrap();
    let n = 2000;
    let mut st = Stream::new(2, Domain::Ensemble, 0);
    let mut a: Vec<f64> = (0..n).map(|_| t.project(&t.sample_density(&sampler, &mut st).unwrap()).x).collect();
    // long orbit of f, thinned
    let f = LsvMap::new(0.5).unwrap();
    let mut y = State::new(0.3141);
    for _ in 0..10_000 {
        y = f.step(y);
    }
    let mut b = Vec::with_capacity(n);
    while b.len() < n {
        for _ in 0..97 {
            y = f.step(y);
        }
        b.push(y.x);
    }
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let ks = ks_two_sample(&a, &b);
    assert!(ks <= 3.0 / (n as f64).sqrt(), "ks {ks}");
}

fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn semiconjugacy_on_affine_towers(x in 0.0f64..1.0, level in 0u32..2, k in 0usize..50) {
        let t = affine_tower(three_cell_cells());
        prop_assume!(t.point(State::new(x), level).is_ok());
        let p = t.point(State::new(x), level).unwrap();
        let map = t.scheme().map().clone();
        let mut y = t.project(&p);
        for _ in 0..k {
            y = map.step(y);
        }
        let q = t.iterate(&p, k).unwrap();
        prop_assert!((t.project(&q).x - y.x).abs() <= 1e-10);
    }

    #[test]
    fn push_conserves_mass_on_any_density(seed in 0u64..1000) {
        let t = affine_tower(two_cell_cells());
        let op = TransferOperator::new(&t, 3).unwrap();
        let mut st = Stream::new(seed, Domain::Control, 1);
        let m: Vec<f64> = (0..op.grid.tower_bins).map(|_| st.uniform()).collect();
        let d = DiscretizedDensity::from_masses(op.grid.clone(), &m);
        let pushed = push_density(&op, &d, 1).unwrap();
        prop_assert!((pushed.norm() - d.norm()).abs() <= 1e-12 * d.norm().max(1.0));
    }
}
