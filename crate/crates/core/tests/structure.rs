use std::sync::Arc;

use proptest::prelude::*;
use towerlab::maps::{make_counterexample_scheme, DoublingMap, Interval, SchemeOptions, SystemRegistry};
use towerlab::scheme::build_first_return_scheme;
use towerlab::structure::{
    build_graph, check_aperiodic, check_irreducible, classify_mixing, find_coprime_block, tower_return_period,
    TransitionGraph, Verdict,
};

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn adjacency(g: &TransitionGraph) -> Vec<Vec<bool>> {
    (0..g.len()).map(|u| (0..g.len()).map(|v| g.has_edge(u, v)).collect()).collect()
}

fn closure(a: &[Vec<bool>]) -> Vec<Vec<bool>> {
    let n = a.len();
    let mut c = a.to_vec();
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if c[i][k] && c[k][j] {
                    c[i][j] = true;
                }
            }
        }
    }
    c
}

fn mat_mul(a: &[Vec<bool>], b: &[Vec<bool>]) -> Vec<Vec<bool>> {
    let n = a.len();
    (0..n).map(|i| (0..n).map(|j| (0..n).any(|k| a[i][k] && b[k][j])).collect()).collect()
}

/// First power of the adjacency matrix with no zero entry.
fn naive_k0(a: &[Vec<bool>], horizon: usize) -> Option<usize> {
    let mut p = a.to_vec();
    for k in 1..=horizon {
        if p.iter().all(|r| r.iter().all(|&x| x)) {
            return Some(k);
        }
        p = mat_mul(&p, a);
    }
    None
}

/// All subsets by size then lexicographic order.
fn brute_block(g: &TransitionGraph, max_block: usize) -> Option<Vec<usize>> {
    let n = g.len();
    let mut subsets: Vec<Vec<usize>> =
        (0u32..1 << n).map(|m| (0..n).filter(|&i| m >> i & 1 == 1).collect()).collect();
    subsets.retain(|s: &Vec<usize>| s.len() >= 2 && s.len() <= max_block);
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));
    subsets.into_iter().find(|s| {
        let inside = s.iter().all(|&u| s.iter().all(|&v| g.has_edge(u, v)));
        let d = s.iter().fold(0, |a, &u| gcd(a, g.return_times[u] as u64));
        inside && d == 1
    })
}

/// Weighted closed-walk lengths through `start` by depth-first enumeration.
fn walk_lengths(g: &TransitionGraph, start: usize, horizon: usize) -> Vec<usize> {
    let mut out = std::collections::BTreeSet::new();
    let mut stack = vec![(start, 0usize)];
    let mut seen = std::collections::HashSet::new();
    while let Some((u, t)) = stack.pop() {
        if !seen.insert((u, t)) {
            continue;
        }
        let s = t + g.return_times[u] as usize;
        if s > horizon {
            continue;
        }
        for v in 0..g.len() {
            if g.has_edge(u, v) {
                if v == start {
                    out.insert(s);
                }
                stack.push((v, s));
            }
        }
    }
    out.into_iter().collect()
}

fn counterexample_graph() -> TransitionGraph {
    build_graph(&make_counterexample_scheme([0.5, 0.25, 0.25]).unwrap()).unwrap()
}

#[test]
fn counterexample_graph_follows_the_images() {
    let g = counterexample_graph();
    assert_eq!(adjacency(&g), vec![vec![false, true, true], vec![false, true, true], vec![true, false, false]]);
    assert_eq!(g.return_times, vec![1, 2, 3]);
    assert!(!g.truncated);
}

#[test]
fn counterexample_is_certified_non_mixing() {
    let g = counterexample_graph();
    assert!(check_irreducible(&g));
    let a = check_aperiodic(&g, 64).unwrap();
    assert!(a.aperiodic);
    assert_eq!(a.k0, naive_k0(&adjacency(&g), 64));
    let block = find_coprime_block(&g, 3);
    assert!(!block.found);
    assert_eq!(brute_block(&g, 3), None);
    let v = classify_mixing(&g, 64);
    assert_eq!(v.gcd_r, 1);
    assert_eq!(v.tower_period, Some(2));
    assert_eq!(v.verdict, Verdict::NonMixingCertified);
    let sr = tower_return_period(&g, 0, 40).unwrap();
    assert_eq!(sr.period, 2);
    assert_eq!(sr.lengths, walk_lengths(&g, 0, 40));
    assert!(sr.lengths.iter().all(|t| t % 2 == 0));
}

#[test]
fn doubling_first_return_is_mixing() {
    let s = build_first_return_scheme(Arc::new(DoublingMap), Interval::left_open(0.5, 1.0), 40, 1e-3).unwrap();
    let g = build_graph(&s).unwrap();
    assert!((0..g.len()).all(|u| g.edges[u].len() == g.len()));
    let v = classify_mixing(&g, 64);
    assert_eq!(v.k0, Some(1));
    assert_eq!(v.verdict, Verdict::MixingCertified);
    let rs: Vec<u32> = v.coprime_block.block.iter().map(|&u| g.return_times[u]).collect();
    assert_eq!(rs, vec![1, 2]);
    assert!(v.coprime_block.validate(&g));
    assert_eq!(tower_return_period(&g, 0, 30).unwrap().period, 1);
}

#[test]
fn self_loop_graph() {
    let g = TransitionGraph::from_adjacency(&[vec![0]], vec![1]).unwrap();
    assert!(check_irreducible(&g));
    assert_eq!(check_aperiodic(&g, 4).unwrap().k0, Some(1));
    assert!(!find_coprime_block(&g, 4).found);
}

#[test]
fn skew_strip_scheme_is_mixing() {
    let sys = SystemRegistry::builtin()
        .build("skew", &serde_json::json!({"alpha_fn": {"kind": "cosine", "min": 0.55, "max": 0.6}}))
        .unwrap();
    let opts = SchemeOptions { horizon: 200, discard_threshold: 0.05, strips: 16, points_per_strip: 20_000, seed: 3 };
    let g = build_graph(&sys.scheme(&opts).unwrap()).unwrap();
    let v = classify_mixing(&g, 64);
    assert!(v.irreducible && v.aperiodic);
    assert!(v.coprime_block.validate(&g));
    assert_eq!(v.verdict, Verdict::MixingCertified);
}

#[test]
fn even_weights_give_even_period() {
    let g = TransitionGraph::from_adjacency(&[vec![0, 1], vec![0, 1]], vec![2, 4]).unwrap();
    let v = classify_mixing(&g, 32);
    assert_eq!(v.tower_period, Some(2));
    assert_ne!(v.verdict, Verdict::MixingCertified);
}

fn arb_graph() -> impl Strategy<Value = TransitionGraph> {
    (1usize..=8).prop_flat_map(|n| {
        (proptest::collection::vec(proptest::collection::vec(any::<bool>(), n), n), proptest::collection::vec(1u32..=4, n))
            .prop_map(move |(mut rows, rs)| {
                for (u, r) in rows.iter_mut().enumerate() {
                    if !r.iter().any(|&b| b) {
                        r[(u + 1) % n] = true;
                    }
                }
                let adj: Vec<Vec<usize>> =
                    rows.iter().map(|r| (0..n).filter(|&v| r[v]).collect()).collect();
                TransitionGraph::from_adjacency(&adj, rs).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn irreducibility_matches_transitive_closure(g in arb_graph()) {
        let c = closure(&adjacency(&g));
        let strong = c.iter().all(|r| r.iter().all(|&x| x));
        prop_assert_eq!(check_irreducible(&g), strong);
    }

    #[test]
    fn coprime_block_matches_brute_force(g in arb_graph()) {
        let cert = find_coprime_block(&g, 4);
        prop_assert!(cert.validate(&g));
        prop_assert_eq!(cert.found.then(|| cert.block.clone()), brute_block(&g, 4));
    }

    #[test]
    fn primitivity_matches_matrix_powers(g in arb_graph()) {
        prop_assume!(check_irreducible(&g));
        let a = adjacency(&g);
        match check_aperiodic(&g, 80) {
            Ok(ap) if ap.aperiodic => prop_assert_eq!(ap.k0, naive_k0(&a, 80)),
            Ok(ap) => prop_assert_eq!(naive_k0(&a, 80), None, "period {}", ap.period),
            Err(_) => prop_assert_eq!(naive_k0(&a, 80), None),
        }
    }

    #[test]
    fn tower_period_divides_every_return(g in arb_graph()) {
        prop_assume!(check_irreducible(&g));
        let v = classify_mixing(&g, 80);
        let sr = tower_return_period(&g, 0, 120).unwrap();
        let t = v.tower_period.unwrap();
        prop_assert!(sr.lengths.iter().all(|&l| l as u64 % t == 0));
        prop_assert_eq!(sr.lengths.clone(), walk_lengths(&g, 0, 120));
        prop_assert_eq!(sr.period, t);
    }
}
