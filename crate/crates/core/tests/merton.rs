use nexp_core::error::Error;
use nexp_core::merton::*;

fn standard() -> MarketParams {
    MarketParams::new(0.08, 0.02, 0.2, 0.5, 1.0).unwrap()
}

fn spec(intervals: usize) -> HjbGridSpec {
    HjbGridSpec {
        intervals,
        ..HjbGridSpec::default()
    }
}

#[test]
fn classical_fraction_standard_params() {
    let m = classical_merton(&standard()).unwrap();
    assert!((m.fraction - 3.0).abs() < 1e-12);
    for x in [0.1, 1.0, 7.5] {
        assert_eq!(m.value(1.0, x), x.powf(0.5) / 0.5);
    }
}

#[test]
fn invalid_market_rejected() {
    assert!(matches!(
        MarketParams::new(0.02, 0.02, 0.2, 0.5, 1.0),
        Err(Error::InvalidArgument(_))
    ));
    assert!(MarketParams::new(0.08, 0.02, 0.2, 0.0, 1.0).is_err());
    assert!(MarketParams::new(0.08, 0.02, 0.2, 1.0, 1.0).is_err());
    assert!(MarketParams::new(0.08, 0.02, 0.0, 0.5, 1.0).is_err());
}

#[test]
fn terminal_slice_exact() {
    let p = standard();
    let g = solve_hjb(&p, 0.5, &spec(80)).unwrap();
    let n = g.n_time_steps();
    for j in 0..g.n_nodes() {
        assert_eq!(g.value(n, j), p.utility(g.wealth(j)));
    }
}

fn classical_errors(p: &MarketParams, intervals: usize) -> (f64, f64) {
    let g = solve_hjb(p, 0.0, &spec(intervals)).unwrap();
    let m = classical_merton(p).unwrap();
    let (mut ev, mut ep) = (0.0f64, 0.0f64);
    for k in 0..=g.n_time_steps() {
        let t = g.times()[k];
        for j in g.interior() {
            let v = m.value(t, g.wealth(j));
            ev = ev.max(((g.value(k, j) - v) / v).abs());
            ep = ep.max(((g.policy(k, j) - m.fraction) / m.fraction).abs());
        }
    }
    (ev, ep)
}

#[test]
fn theta_zero_matches_classical() {
    let (ev, ep) = classical_errors(&standard(), 200);
    assert!(ev < 5e-3, "value error {ev}");
    assert!(ep < 2e-2, "policy error {ep}");
}

#[test]
fn theta_zero_negative_gamma() {
    let p = MarketParams::new(0.08, 0.02, 0.2, -1.0, 1.0).unwrap();
    let (ev, ep) = classical_errors(&p, 200);
    assert!(ev < 5e-3, "value error {ev}");
    assert!(ep < 2e-2, "policy error {ep}");
}

#[test]
fn refinement_halves_error() {
    let p = standard();
    let (v1, p1) = classical_errors(&p, 50);
    let (v2, p2) = classical_errors(&p, 100);
    let (v3, p3) = classical_errors(&p, 200);
    for (c, f) in [(v1, v2), (v2, v3)] {
        let r = f / c;
        assert!((0.375..=0.625).contains(&r), "value ratio {r}");
    }
    // The policy uses central differences only and converges faster.
    assert!(p2 < 0.5 * p1 && p3 < 0.5 * p2, "{p1} {p2} {p3}");
}

#[test]
fn ambiguity_is_cautious_and_monotone() {
    let p = standard();
    let r = verify_ambiguity_properties(&p, &[0.0, 0.25, 0.5, 1.0], &spec(120)).unwrap();
    assert!(r.caution_holds && r.monotone_holds, "{:?}", r.first_violation);
    for (i, mx) in r.max_fraction.iter().enumerate().skip(1) {
        assert!(*mx < 3.0, "theta {} max {mx}", r.thetas[i]);
    }
}

#[test]
fn classical_only_is_vacuous() {
    let r = verify_ambiguity_properties(&standard(), &[0.0], &spec(80)).unwrap();
    assert!(r.passed());
    assert!((r.max_fraction[0] - 3.0).abs() < 0.06);
}

#[test]
fn wealth_diagnostic_reported() {
    let r = verify_ambiguity_properties(&standard(), &[0.5], &spec(120)).unwrap();
    assert_eq!(r.wealth.len(), 1);
    assert_eq!(r.wealth[0].trend, WealthTrend::Decreasing);
    assert!(r.wealth[0].matches_heuristic);
}

#[test]
fn pointwise_monotone_two_thetas() {
    let p = standard();
    let a = solve_hjb(&p, 0.2, &spec(100)).unwrap();
    let b = solve_hjb(&p, 0.5, &spec(100)).unwrap();
    for k in 0..=a.n_time_steps() {
        for j in a.interior() {
            assert!(a.policy(k, j) > b.policy(k, j));
        }
    }
    let k = a.n_time_steps() - 1;
    for j in a.interior() {
        assert!(a.policy(k, j).is_finite());
        assert!(a.dvv(k, j) - 0.2 * a.dv(k, j).powi(2) < 0.0);
    }
}

#[test]
fn policy_query_clamps_outside() {
    let g = solve_hjb(&standard(), 0.0, &spec(80)).unwrap();
    let s = extract_policy(&g);
    assert!(!s.query(0.5, 1.0).clamped);
    let q = s.query(0.5, 1e9);
    assert!(q.clamped && q.fraction.is_finite());
    assert!(s.query(-1.0, 1.0).clamped);
    assert!((s.amount(0.0, 2.0) - 2.0 * s.fraction(0.0, 2.0)).abs() < 1e-12);
}

#[test]
fn unstable_grid_reports_required_steps() {
    let s = HjbGridSpec {
        n_time_steps: Some(5),
        ..spec(100)
    };
    match solve_hjb(&standard(), 0.5, &s) {
        Err(Error::UnstableGrid { required_steps }) => assert!(required_steps > 5),
        other => panic!("expected UnstableGrid, got {other:?}"),
    }
}

fn synthetic(p: &MarketParams, theta: f64, s: &HjbGridSpec) -> Vec<AllocationObservation> {
    let pts = [(0.0, 0.7), (0.0, 1.0), (0.0, 1.4), (0.5, 0.8), (0.5, 1.2), (0.9, 1.0)];
    model_allocations(p, theta, &pts, s)
        .unwrap()
        .into_iter()
        .zip(pts)
        .map(|(a, (t, x))| AllocationObservation::new(t, x, a).unwrap())
        .collect()
}

#[test]
fn calibration_recovers_theta() {
    let p = standard();
    let s = spec(80);
    for th in [0.1, 0.4, 0.8] {
        let obs = synthetic(&p, th, &s);
        let res = calibrate_theta(&p, &obs, &s, &CalibrationSearch::default()).unwrap();
        assert!(((res.theta - th) / th).abs() < 0.03, "true {th} got {}", res.theta);
        assert!(!res.fell_back);
    }
}

#[test]
fn calibration_classical_boundary() {
    let p = standard();
    let s = spec(80);
    let obs = synthetic(&p, 0.0, &s);
    let search = CalibrationSearch {
        theta_lo: 0.0,
        theta_hi: 1.0,
        tol: 1e-5,
    };
    let res = calibrate_theta(&p, &obs, &s, &search).unwrap();
    assert!(res.theta < 0.02, "{}", res.theta);
}

#[test]
fn calibration_single_observation_between() {
    let p = standard();
    let s = spec(80);
    let lo = model_allocations(&p, 0.2, &[(0.0, 1.0)], &s).unwrap()[0];
    let hi = model_allocations(&p, 0.6, &[(0.0, 1.0)], &s).unwrap()[0];
    let obs = [AllocationObservation::new(0.0, 1.0, 0.5 * (lo + hi)).unwrap()];
    let res = calibrate_theta(&p, &obs, &s, &CalibrationSearch::default()).unwrap();
    assert!(res.theta > 0.2 && res.theta < 0.6, "{}", res.theta);
    let first = res.curve.first().unwrap().1;
    let last = res.curve.last().unwrap().1;
    assert!(res.loss < first && res.loss < last);
}

#[test]
fn observation_csv_roundtrip_and_errors() {
    let obs = vec![
        AllocationObservation::new(0.0, 1.0, 2.5).unwrap(),
        AllocationObservation::new(0.5, 2.0, 4.25).unwrap(),
    ];
    let back = read_observations(observations_to_csv(&obs).as_bytes()).unwrap();
    assert_eq!(back, obs);
    assert!(matches!(
        read_observations("t,x,allocation\n0,abc,1\n".as_bytes()),
        Err(Error::Parse(_))
    ));
    assert!(read_observations("t,x,allocation\n0,-1,1\n".as_bytes()).is_err());
    assert!(AllocationObservation::new(0.0, 0.0, 1.0).is_err());
}

#[test]
fn csv_export_columns() {
    let g = solve_hjb(&standard(), 0.25, &spec(20)).unwrap();
    let csv = g.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,x,V,pi"));
    assert_eq!(lines.count(), (g.n_time_steps() + 1) * g.n_nodes());
}

#[test]
fn pde_and_bsde_agree_on_fixed_strategy() {
    let p = standard();
    let c = bsde_cross_check(&p, 0.5, 1.0, &spec(160), 20_000, 50, 11).unwrap();
    let tol = 0.02 * c.pde.abs();
    assert!((c.bsde - c.pde).abs() < tol, "pde {} bsde {}", c.pde, c.bsde);
    assert!((c.oracle - c.pde).abs() < tol, "pde {} oracle {}", c.pde, c.oracle);
}
