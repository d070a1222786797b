use nexp_core::nets::*;
use nexp_core::rng::Stream;
use proptest::prelude::*;

fn kinds() -> [ArchitectureKind; 5] {
    [
        ArchitectureKind::Free,
        ArchitectureKind::Separable,
        ArchitectureKind::BoundedInteraction,
        ArchitectureKind::MonotoneY,
        ArchitectureKind::IcnnYZ,
    ]
}

fn layout_for(kind: ArchitectureKind, x_dim: usize, z_dim: usize, hidden: &[usize]) -> Layout {
    let l = Layout::new(x_dim, z_dim, hidden);
    match kind {
        ArchitectureKind::Separable => l.aux(&[4]).monotone_aux(true),
        ArchitectureKind::BoundedInteraction => l.aux(&[3]).bound(2.0),
        ArchitectureKind::IcnnYZ => l.activation(Activation::Softplus),
        _ => l,
    }
}

struct Point {
    t: f64,
    x: Vec<f64>,
    y: f64,
    z: Vec<f64>,
}

fn point(rng: &mut Stream, x_dim: usize, z_dim: usize) -> Point {
    Point {
        t: rng.uniform(),
        x: (0..x_dim).map(|_| rng.normal()).collect(),
        y: 2.0 * rng.normal(),
        z: (0..z_dim).map(|_| rng.normal()).collect(),
    }
}

/// Central differences in every argument, as an independent oracle.
fn fd_gradients(net: &DriverNet, p: &Point, h: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let f = |q: &Point, n: &DriverNet| n.eval(q.t, &q.x, q.y, &q.z);
    let mut q = Point {
        t: p.t,
        x: p.x.clone(),
        y: p.y + h,
        z: p.z.clone(),
    };
    let fp = f(&q, net);
    q.y = p.y - h;
    let dy = (fp - f(&q, net)) / (2.0 * h);
    q.y = p.y;
    let mut dz = vec![];
    for i in 0..p.z.len() {
        q.z[i] = p.z[i] + h;
        let fp = f(&q, net);
        q.z[i] = p.z[i] - h;
        dz.push((fp - f(&q, net)) / (2.0 * h));
        q.z[i] = p.z[i];
    }
    let raw = net.raw_params().to_vec();
    let mut dth = vec![];
    for i in 0..raw.len() {
        let mut r = raw.clone();
        r[i] += h;
        let fp = f(p, &net.with_params(&r).unwrap());
        r[i] -= 2.0 * h;
        dth.push((fp - f(p, &net.with_params(&r).unwrap())) / (2.0 * h));
    }
    (dy, dz, dth)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[test]
fn analytic_gradients_match_central_differences_on_random_nets() {
    let mut rng = Stream::new(11, 0);
    for i in 0..100 {
        let kind = kinds()[i % 5];
        let x_dim = 1 + i % 2;
        let z_dim = 1 + (i / 2) % 2;
        let hidden: &[usize] = if i % 3 == 0 { &[5] } else { &[4, 3] };
        let net = build_driver(kind, layout_for(kind, x_dim, z_dim, hidden), i as u64).unwrap();
        let p = point(&mut rng, x_dim, z_dim);
        let g = net.gradients(p.t, &p.x, p.y, &p.z);
        assert_eq!(g.value, net.eval(p.t, &p.x, p.y, &p.z));
        let (dy, dz, dth) = fd_gradients(&net, &p, 1e-5);
        let mut all_a = vec![g.dy];
        all_a.extend(&g.dz);
        all_a.extend(&g.dtheta);
        let mut all_fd = vec![dy];
        all_fd.extend(&dz);
        all_fd.extend(&dth);
        let err = max_abs_diff(&all_a, &all_fd) / max_abs(&all_a).max(1.0);
        assert!(err <= 1e-6, "net {i} ({kind}): relative error {err}");
    }
}

#[test]
fn relu_gradients_match_away_from_kinks() {
    let mut rng = Stream::new(12, 0);
    for i in 0..20 {
        let l = Layout::new(1, 1, &[6, 6]).activation(Activation::Relu);
        let net = build_driver(ArchitectureKind::Free, l, 100 + i).unwrap();
        let p = point(&mut rng, 1, 1);
        let g = net.gradients(p.t, &p.x, p.y, &p.z);
        let (dy, dz, dth) = fd_gradients(&net, &p, 1e-5);
        let scale = max_abs(&g.dtheta).max(1.0);
        assert!((g.dy - dy).abs() <= 1e-3 * scale);
        assert!(max_abs_diff(&g.dz, &dz) <= 1e-3 * scale);
        assert!(max_abs_diff(&g.dtheta, &dth) <= 1e-3 * scale);
    }
}

#[test]
fn zero_network_evaluates_to_zero() {
    let l = Layout::new(2, 1, &[4, 4]);
    let n = build_driver(ArchitectureKind::Free, l.clone(), 0).unwrap().n_params();
    let net = DriverNet::from_raw(ArchitectureKind::Free, l, vec![0.0; n]).unwrap();
    assert_eq!(net.eval(0.3, &[1.0, -2.0], 7.0, &[3.0]), 0.0);
    assert_eq!(net.eval(0.9, &[0.0, 5.0], -1.0, &[-8.0]), 0.0);
}

#[test]
fn hand_set_monotone_net_is_minus_y() {
    // One hidden unit reading (t, x, y, z) with weights (0, 0, -1, 0), identity
    // activation, output weight 1, zero biases.
    let l = Layout::new(1, 1, &[1]).activation(Activation::Identity);
    let eff = [0.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0];
    let net = DriverNet::from_effective(ArchitectureKind::MonotoneY, l, &eff).unwrap();
    let v = eval_driver(&net, 0.5, &[2.0], 0.3, &[1.0]).unwrap();
    assert!((v + 0.3).abs() < 1e-15, "{v}");
}

#[test]
fn evaluation_is_deterministic_and_checked() {
    let net = build_driver(
        ArchitectureKind::IcnnYZ,
        layout_for(ArchitectureKind::IcnnYZ, 1, 2, &[8, 8]),
        3,
    )
    .unwrap();
    let a = eval_driver(&net, 0.1, &[0.2], 0.3, &[0.4, 0.5]).unwrap();
    let b = eval_driver(&net, 0.1, &[0.2], 0.3, &[0.4, 0.5]).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert!(eval_driver(&net, 0.1, &[f64::NAN], 0.3, &[0.4, 0.5]).is_err());
    assert!(eval_driver(&net, 0.1, &[0.2], 0.3, &[0.4]).is_err());
}

#[test]
fn monotone_net_has_non_positive_dy_everywhere_sampled() {
    let net = build_driver(ArchitectureKind::MonotoneY, Layout::new(1, 1, &[8, 8]), 5).unwrap();
    let r = verify_monotone(&net, 10_000, 9);
    assert!(r.pass && r.max_dy <= 0.0, "{r:?}");
    assert_eq!(net.constraint_violations(), 0);
}

#[test]
fn monotone_check_catches_increasing_free_net() {
    let l = Layout::new(1, 1, &[1]).activation(Activation::Identity);
    let eff = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
    let net = DriverNet::from_effective(ArchitectureKind::Free, l, &eff).unwrap();
    let r = verify_monotone(&net, 100, 1);
    assert!(!r.pass);
    assert!(r.max_dy > 0.0);
}

#[test]
fn separable_with_non_increasing_n2_passes_monotone_check() {
    let l = Layout::new(1, 1, &[6]).aux(&[4, 4]).monotone_aux(true);
    for seed in 0..5 {
        let net = build_driver(ArchitectureKind::Separable, l.clone(), seed).unwrap();
        assert!(verify_monotone(&net, 2000, seed).pass);
    }
}

#[test]
fn separable_with_zero_n2_ignores_y() {
    let l = Layout::new(1, 1, &[5]).aux(&[3]);
    let net = build_driver(ArchitectureKind::Separable, l.clone(), 2).unwrap();
    let mut raw = net.raw_params().to_vec();
    let n1 = build_driver(ArchitectureKind::Free, Layout::new(1, 1, &[5]), 0)
        .unwrap()
        .n_params();
    // The N1 block drops y from its inputs, so it has (2 + 1) * 5 + 5 + 5 + 1 params.
    let n1 = n1 - 5;
    for v in &mut raw[n1..] {
        *v = 0.0;
    }
    let net = net.with_params(&raw).unwrap();
    let mut rng = Stream::new(4, 0);
    for _ in 0..200 {
        let p = point(&mut rng, 1, 1);
        let a = net.eval(p.t, &p.x, p.y, &p.z);
        let b = net.eval(p.t, &p.x, 10.0 * rng.normal(), &p.z);
        assert_eq!(a, b);
    }
}

#[test]
fn icnn_is_midpoint_convex_with_zero_tolerance() {
    for seed in 0..4 {
        let l = layout_for(ArchitectureKind::IcnnYZ, 1, 2, &[8, 8]);
        let net = build_driver(ArchitectureKind::IcnnYZ, l, seed).unwrap();
        let r = verify_convexity(&net, 5000, seed, 0.0);
        assert!(r.pass, "{r:?}");
        assert_eq!(net.constraint_violations(), 0);
    }
}

#[test]
fn concave_builtin_fails_and_affine_passes_convexity() {
    let r = verify_convexity(&BuiltinDriver::entropic(1.0), 200, 0, 0.0);
    assert!(!r.pass && r.max_gap > 0.0);
    let r = verify_convexity(&BuiltinDriver::linear(&[0.7]), 200, 0, 0.0);
    assert!(r.pass);
    assert!(r.max_gap.abs() < 1e-12);
    assert!(verify_convexity(&BuiltinDriver::convex_quadratic(2.0), 200, 0, 0.0).pass);
}

#[test]
fn bounded_interaction_factor_respects_bound() {
    let l = Layout::new(1, 1, &[4]).aux(&[5]).bound(0.75);
    let net = build_driver(ArchitectureKind::BoundedInteraction, l.clone(), 8).unwrap();
    // Blow up the raw parameters so tanh saturates.
    let raw: Vec<f64> = net.raw_params().iter().map(|v| 40.0 * v).collect();
    let big = net.with_params(&raw).unwrap();
    let mut rng = Stream::new(5, 0);
    for _ in 0..2000 {
        let p = point(&mut rng, 1, 1);
        for n in [&net, &big] {
            let m = n.interaction_factor(p.t, &p.x, &[10.0 * p.z[0]]).unwrap();
            assert!(m.abs() <= 0.75);
        }
    }
}

#[test]
fn growth_fit_recovers_quadratic_coefficient() {
    let r = estimate_growth_and_lipschitz(&BuiltinDriver::entropic(1.0), 2.0, 2000, 3);
    assert!((r.alpha - 1.0).abs() < 0.05, "{r:?}");
    assert_eq!(r.lipschitz, 0.0);
}

#[test]
fn growth_fit_of_zero_net_is_zero() {
    let l = Layout::new(1, 1, &[3]);
    let n = build_driver(ArchitectureKind::Free, l.clone(), 0).unwrap().n_params();
    let net = DriverNet::from_raw(ArchitectureKind::Free, l, vec![0.0; n]).unwrap();
    let r = estimate_growth_and_lipschitz(&net, 1.0, 500, 3);
    assert!(
        r.k.abs() < 1e-12 && r.alpha.abs() < 1e-12 && r.lipschitz == 0.0,
        "{r:?}"
    );
}

#[test]
fn separable_lipschitz_constant_ignores_z_range() {
    let l = Layout::new(1, 1, &[6]).aux(&[4]);
    let net = build_driver(ArchitectureKind::Separable, l, 21).unwrap();
    let lo = SampleBox {
        z: (-3.0, -1.0),
        ..SampleBox::default()
    };
    let hi = SampleBox {
        z: (1.0, 3.0),
        ..SampleBox::default()
    };
    let a = estimate_growth_and_lipschitz_in(&net, 2.0, 3000, 4, &lo).lipschitz;
    let b = estimate_growth_and_lipschitz_in(&net, 2.0, 3000, 4, &hi).lipschitz;
    assert!(a > 0.0);
    assert!((a - b).abs() <= 0.01 * a, "{a} vs {b}");
}

#[test]
fn layout_mismatches_are_rejected() {
    let bad = [
        (ArchitectureKind::Separable, Layout::new(1, 1, &[4])),
        (ArchitectureKind::Free, Layout::new(1, 1, &[4]).aux(&[2])),
        (ArchitectureKind::BoundedInteraction, Layout::new(1, 1, &[4]).aux(&[2])),
        (ArchitectureKind::MonotoneY, Layout::new(1, 1, &[])),
        (
            ArchitectureKind::MonotoneY,
            Layout::new(1, 1, &[4]).activation(Activation::Relu),
        ),
        (
            ArchitectureKind::IcnnYZ,
            Layout::new(1, 1, &[4]).activation(Activation::Tanh),
        ),
        (ArchitectureKind::Free, Layout::new(1, 0, &[4])),
    ];
    for (k, l) in bad {
        assert!(
            matches!(
                build_driver(k, l.clone(), 0),
                Err(nexp_core::Error::InvalidArchitecture(_))
            ),
            "{k} {l:?}"
        );
    }
}

#[test]
fn text_form_round_trips_bit_exactly() {
    for (i, kind) in kinds().into_iter().enumerate() {
        let net = build_driver(kind, layout_for(kind, 2, 1, &[3, 2]), 40 + i as u64).unwrap();
        let text = net.to_text();
        let back = DriverNet::from_text(&text).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_text(), text);
        let bits: Vec<u64> = back.raw_params().iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u64> = net.raw_params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, orig);
    }
    assert!(DriverNet::from_text("nexp-driver 1\nkind free\n").is_err());
}

#[test]
fn builtin_gradients_are_exact() {
    let g = BuiltinDriver::entropic(2.0).gradients(0.0, &[], 1.0, &[1.5, -0.5]);
    assert_eq!(g.value, -2.5);
    assert_eq!(g.dz, vec![-3.0, 1.0]);
    assert_eq!(g.dtheta, vec![-1.25]);
    let g = BuiltinDriver::linear(&[0.5]).gradients(0.0, &[], 1.0, &[2.0]);
    assert_eq!((g.value, g.dz[0], g.dtheta[0]), (1.0, 0.5, 2.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn constraints_hold_for_any_raw_parameters(
        kind_idx in 0usize..5,
        scale in 0.1f64..50.0,
        seed in 0u64..1000,
    ) {
        let kind = kinds()[kind_idx];
        let net = build_driver(kind, layout_for(kind, 1, 1, &[4, 3]), seed).unwrap();
        let mut rng = Stream::new(seed, 1);
        let raw: Vec<f64> = (0..net.n_params()).map(|_| scale * rng.normal()).collect();
        let moved = net.with_params(&raw).unwrap();
        prop_assert_eq!(moved.constraint_violations(), 0);
        for (i, nonneg) in moved.sign_constraints() {
            let e = moved.effective_params()[i];
            let ok = if nonneg { e >= 0.0 } else { e <= 0.0 };
            prop_assert!(ok);
        }
        if kind == ArchitectureKind::MonotoneY {
            let g = moved.gradients(0.5, &[rng.normal()], 3.0 * rng.normal(), &[rng.normal()]);
            prop_assert!(g.dy <= 0.0);
        }
    }
}
