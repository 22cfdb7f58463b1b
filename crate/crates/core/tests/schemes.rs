use std::sync::Arc;

use towerlab::maps::{
    make_counterexample_scheme, AffineCellSpec, AffineMarkovMap, DoublingMap, DynamicalMap, Interval, LsvMap,
    State, SystemRegistry,
};
use towerlab::rng::{Domain, Stream};
use towerlab::scheme::{
    build_first_return_scheme, estimate_tail, estimate_tail_with, integrability_report, verify_wgm,
    InducingScheme, SchemeDocument, TailOptions,
};
use towerlab::stats::fit::{Family, FitWindow};
use towerlab::Error;

fn base() -> Interval {
    Interval::left_open(0.5, 1.0)
}

fn doubling_fr(h: usize) -> InducingScheme {
    build_first_return_scheme(Arc::new(DoublingMap), base(), h, 1e-3).unwrap()
}

fn doubling_binary() -> InducingScheme {
    SystemRegistry::builtin()
        .build("doubling", &serde_json::json!({"scheme": "binary"}))
        .unwrap()
        .scheme(&Default::default())
        .unwrap()
}

/// Left-branch preimages of 1/2 by Newton's method on z(1 + sqrt(2z)) = t.
fn lsv_preimages(n: usize) -> Vec<f64> {
    let mut z: Vec<f64> = vec![0.5];
    for _ in 1..n {
        let t: f64 = *z.last().unwrap();
        let mut x: f64 = t / 2.0;
        for _ in 0..100 {
            let g = x * (1.0 + (2.0 * x).sqrt()) - t;
            let dg = 1.0 + 1.5 * (2.0 * x).sqrt();
            let nx = x - g / dg;
            if (nx - x).abs() <= 1e-18 * x.max(1e-300) {
                x = nx;
                break;
            }
            x = nx;
        }
        z.push(x);
    }
    z
}

#[test]
fn doubling_first_return_cells_are_binary_intervals() {
    let s = doubling_fr(50);
    assert_eq!(s.len(), 50);
    for (i, c) in s.cells().iter().enumerate() {
        let r = i as u32 + 1;
        assert_eq!(c.return_time, r);
        let lo = 0.5 + 0.5f64.powi(r as i32 + 1);
        let hi = 0.5 + 0.5f64.powi(r as i32);
        assert_eq!(c.bounds.x, [lo, hi]);
        assert_eq!(c.measure, 0.5f64.powi(r as i32) * 0.5);
        assert_eq!(c.image.len(), 50);
    }
    assert_eq!(s.truncation().discarded_mass, 0.5f64.powi(51));
}

#[test]
fn doubling_tail_is_exactly_geometric() {
    let s = doubling_fr(50);
    let t = estimate_tail(&s);
    for n in 0..=50 {
        assert_eq!(t.counts[n], 0.5f64.powi(n as i32) * 0.5, "n={n}");
    }
    let fit = t.fit.clone().unwrap();
    assert_eq!(fit.family, Family::Exponential);
    assert!((fit.rate() - std::f64::consts::LN_2).abs() < 1e-9);
    let rep = integrability_report(&t, 0.5);
    assert!((rep.r_mean - 2.0 * 0.5).abs() < 1e-12);
    assert!(rep.finite);
}

#[test]
fn hat_counts_are_partial_sums() {
    let s = doubling_fr(50);
    let t = estimate_tail(&s);
    for n in 0..50 {
        let direct: f64 = t.counts[n + 1..].iter().sum();
        assert!((t.hat_counts[n] - direct).abs() < 1e-15);
        assert!(t.hat_counts[n] - t.hat_counts[n + 1] >= 0.0);
        assert!((t.hat_counts[n] - t.hat_counts[n + 1] - t.counts[n + 1]).abs() < 1e-15);
    }
}

#[test]
fn lsv_cells_match_preimage_sequence() {
    let h = 10_000;
    let s = build_first_return_scheme(Arc::new(LsvMap::new(0.5).unwrap()), base(), h, 1e-3).unwrap();
    assert_eq!(s.len(), h);
    assert!(s.truncation().discarded_mass <= 1e-3);
    let z = lsv_preimages(h + 1);
    // cell with R = k is ((1 + z_{k-1})/2, (1 + z_{k-2})/2], z_{-1} = 1
    for k in [1usize, 2, 3, 10, 100, 1000, 5000, 10_000] {
        let c = &s.cells()[k - 1];
        assert_eq!(c.return_time as usize, k);
        let upper = if k == 1 { 1.0 } else { z[k - 2] };
        let want = (upper - z[k - 1]) / 2.0;
        // bounds near 1/2 resolve to an ulp of 1/2
        let tol = 1e-9 * want + 4.0 * f64::EPSILON;
        assert!((c.measure - want).abs() <= tol, "k={k}: {} vs {want}", c.measure);
    }
    assert!((s.truncation().discarded_mass - z[h - 1] / 2.0).abs() < 1e-6 * z[h - 1]);
    let fit = estimate_tail_with(&s, TailOptions { window: Some(FitWindow::new(10.0, 1000.0)), family: Some("polynomial") })
        .fit
        .unwrap();
    assert!((1.8..=2.2).contains(&fit.rate()), "a = {}", fit.rate());
}

#[test]
fn horizon_zero_is_rejected() {
    let r = build_first_return_scheme(Arc::new(DoublingMap), base(), 0, 1e-3);
    assert!(matches!(r, Err(Error::HorizonTooSmall(_))));
    let r = build_first_return_scheme(Arc::new(LsvMap::new(0.5).unwrap()), base(), 20, 1e-6);
    assert!(matches!(r, Err(Error::HorizonTooSmall(_))));
}

#[test]
fn induced_map_is_iterated_base_map() {
    let lsv: Arc<dyn DynamicalMap> = Arc::new(LsvMap::new(0.5).unwrap());
    let s = build_first_return_scheme(lsv.clone(), base(), 2000, 1e-2).unwrap();
    let mut rng = Stream::new(3, Domain::Control, 0);
    for _ in 0..1000 {
        let x = s.sample_base(&mut rng);
        let Some((c, fx)) = s.induced(x) else { continue };
        let r = s.cell(c).return_time;
        let mut y = x;
        for j in 1..=r {
            y = lsv.eval(y);
            if j < r {
                assert!(!s.base().contains(y), "returned early at step {j}");
            }
        }
        assert!((y.x - fx.x).abs() <= 1e-12 * y.x.abs().max(1e-300));
        let again = s.induced_eval(x, c);
        assert_eq!(again, fx);
    }
}

#[test]
fn counterexample_table_and_affinity() {
    let s = make_counterexample_scheme([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap();
    assert_eq!(s.return_times(), vec![1, 2, 3]);
    let imgs: Vec<Vec<usize>> = s.cells().iter().map(|c| c.image.iter().collect()).collect();
    assert_eq!(imgs, vec![vec![1, 2], vec![1, 2], vec![0]]);
    let cert = verify_wgm(&s, 4000, 30, 1).unwrap();
    assert!(cert.markov_ok);
    assert!(cert.gibbs_constant <= 1e-10, "{}", cert.gibbs_constant);
    let min_image = s.cells().iter().map(|c| c.image_measure).fold(f64::INFINITY, f64::min);
    assert_eq!(cert.long_branch_delta0, min_image);
    assert!((min_image - 1.0 / 3.0).abs() < 1e-12);
    // f^3 runs omega_3 twice over omega_1
    assert_eq!(cert.non_injective_cells, vec![2]);
    let rep = integrability_report(&estimate_tail(&s), 0.5);
    assert!((rep.r_mean - 2.0).abs() < 1e-12);
}

#[test]
fn doubling_certificate() {
    let s = doubling_binary();
    let cert = verify_wgm(&s, 4000, 40, 2).unwrap();
    assert!(cert.markov_ok && cert.injective_ok);
    assert_eq!(cert.long_branch_delta0, 1.0);
    assert!(cert.gibbs_constant <= 1e-10);
    assert!(cert.expanding_beta > 0.4 && cert.expanding_beta < 0.6, "{}", cert.expanding_beta);
}

#[test]
fn perturbed_image_is_flagged() {
    let map = AffineMarkovMap::new(vec![
        AffineCellSpec { measure: 0.5, return_time: 1, image: [0.0, 1.0] },
        AffineCellSpec { measure: 0.5, return_time: 2, image: [0.0, 0.7] },
    ])
    .unwrap();
    let s = towerlab::maps::make_affine_scheme(&map).unwrap();
    let cert = verify_wgm(&s, 500, 20, 3).unwrap();
    assert!(!cert.markov_ok);
    assert_eq!(cert.offenders.len(), 1);
    assert_eq!(cert.offenders[0].cell, 1);
    assert!((cert.offenders[0].endpoint - 0.7).abs() < 1e-12);
}

/// Position of the first differing binary digit after shifting both by n.
fn binary_separation(x: f64, y: f64) -> usize {
    let (mut a, mut b) = (x, y);
    for n in 0..60 {
        if (a >= 0.5) != (b >= 0.5) {
            return n;
        }
        a = (2.0 * a) % 1.0;
        b = (2.0 * b) % 1.0;
    }
    60
}

#[test]
fn separation_time_matches_binary_expansion() {
    let s = doubling_binary();
    let x = State::new(0.1);
    let y = State::new(0.1 + 2f64.powi(-20));
    let got = s.separation_time(x, y, 100).unwrap();
    let want = binary_separation(0.1, 0.1 + 2f64.powi(-20));
    assert!(got.abs_diff(want) <= 1 && got.abs_diff(19) <= 1, "{got} vs {want}");
    assert_eq!(s.separation_time(State::new(0.2), State::new(0.7), 10).unwrap(), 0);
    assert_eq!(s.separation_time(x, x, 25).unwrap(), 25);
}

#[test]
fn lsv_heavy_tail_flags_remainder() {
    let s = build_first_return_scheme(Arc::new(LsvMap::new(0.9).unwrap()), base(), 10_000, 0.1).unwrap();
    let t = estimate_tail(&s);
    let rep = integrability_report(&t, 0.5);
    assert!(rep.finite, "{rep:?}");
    assert!(rep.near_budget, "{rep:?}");
    assert!(rep.exponent.unwrap() > 1.0 && rep.exponent.unwrap() < 1.3);
}

#[test]
fn affine_document_round_trips_bit_exactly() {
    let s = make_counterexample_scheme([0.2, 0.3, 0.5]).unwrap();
    let text = serde_json::to_string(&s.to_document()).unwrap();
    let doc: SchemeDocument = serde_json::from_str(&text).unwrap();
    let map = SystemRegistry::builtin().map_from_id(&doc.map_id, &doc.params).unwrap();
    let back = InducingScheme::from_document(doc, map).unwrap();
    assert_eq!(serde_json::to_string(&back.to_document()).unwrap(), text);
    assert_eq!(back.content_hash(), s.content_hash());
}
