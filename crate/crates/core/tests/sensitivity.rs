use std::sync::Arc;

use nexp_core::bsde::*;
use nexp_core::nets::*;
use nexp_core::sensitivity::*;
use nexp_core::stochastic::*;
use nexp_core::Error;

fn ensemble(n_paths: usize, n_steps: usize, seed: u64) -> PathEnsemble {
    let g = make_time_grid(1.0, n_steps).unwrap();
    let b = Arc::new(sample_brownian(&g, n_paths, 1, seed).unwrap());
    simulate_forward(&BrownianMotion::new(1), &g, b).unwrap()
}

fn w_t() -> Terminal {
    Terminal::of_state(|x| x[0])
}

fn sens<D: Driver>(ens: &PathEnsemble, xi: &Terminal, f: &D) -> SensitivitySolution {
    let p = BsdeProblem::new(ens, xi, f);
    let s = solve_bsde_lsmc(&p, RegressionBasis::default(), &SolverOptions::default()).unwrap();
    solve_sensitivity_bsde(
        &p,
        &s,
        &SensitivityOptions {
            store_paths: true,
            normalization: true,
        },
    )
    .unwrap()
}

fn fd<D: Driver>(ens: &PathEnsemble, xi: &Terminal, f: &D, coords: &[usize]) -> FdReport {
    fd_gradient_check(
        ens,
        xi,
        f,
        coords,
        1e-4,
        RegressionBasis::default(),
        &SolverOptions::default(),
    )
    .unwrap()
}

#[test]
fn structurally_absent_coordinates_have_zero_sensitivity() {
    // Second hidden unit has a zero output weight, so its parameters are inert.
    let layout = Layout::new(1, 1, &[2]);
    #[rustfmt::skip]
    let eff = [
        0.3, -0.2, 0.5, 0.7,
        0.1, 0.4, -0.6, 0.2,
        0.05, -0.1,
        1.2, 0.0,
        0.3,
    ];
    let net = DriverNet::from_effective(ArchitectureKind::Free, layout, &eff).unwrap();
    let ens = ensemble(5_000, 10, 1);
    let s = sens(&ens, &w_t(), &net);
    for j in [4, 5, 6, 7, 9] {
        assert_eq!(s.grad_y0()[j], 0.0, "coord {j}");
    }
    assert!(s.grad_y0()[12].abs() > 0.0);
    // Terminal slice is zero.
    for i in 0..net.n_params() {
        assert!(s.path_sensitivity(10, i).unwrap().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn constant_source_integrates_to_c_t() {
    let ens = ensemble(5_000, 10, 2);
    for c in [0.7, 1.4] {
        let f = BuiltinDriver::constant(0.3, c);
        let s = sens(&ens, &w_t(), &f);
        assert!((s.grad_y0()[0] - c).abs() < 1e-12, "{}", s.grad_y0()[0]);
    }
    let a = sens(&ens, &w_t(), &BuiltinDriver::constant(0.3, 0.7)).grad_y0()[0];
    let b = sens(&ens, &w_t(), &BuiltinDriver::constant(0.3, 1.4)).grad_y0()[0];
    assert_eq!(2.0 * a, b);
}

#[test]
fn zero_driver_gives_zero_on_both_sides() {
    let ens = ensemble(2_000, 10, 3);
    let f = BuiltinDriver::linear(&[0.0]);
    let r = fd(&ens, &w_t(), &f, &[0]);
    // Zero driver written as a one-parameter linear driver at b = 0: the
    // sensitivity is E[Z] ~ 1, not zero; the truly parameter-free driver has
    // no coordinates to check.
    assert!(r.max_relative_error < 1e-3, "{r:?}");
    let z = BuiltinDriver::zero();
    let r = fd(&ens, &w_t(), &z, &[]);
    assert_eq!(r.max_relative_error, 0.0);
}

#[test]
fn entropic_parameter_sensitivity() {
    let ens = ensemble(50_000, 20, 4);
    let f = BuiltinDriver::entropic(1.0);
    let r = fd(&ens, &w_t(), &f, &[0]);
    assert!((r.sensitivity[0] + 0.5).abs() < 0.005, "{r:?}");
    assert!((r.finite_difference[0] + 0.5).abs() < 0.005, "{r:?}");
    assert!(r.max_relative_error < 1e-3, "{r:?}");
}

#[test]
fn smooth_nets_match_finite_differences() {
    let ens = ensemble(3_000, 10, 5);
    let xi = Terminal::of_state(|x| x[0].sin() + 0.3 * x[0]);
    let cases = [
        build_driver(ArchitectureKind::Free, Layout::new(1, 1, &[6, 6]), 11).unwrap(),
        build_driver(
            ArchitectureKind::MonotoneY,
            Layout::new(1, 1, &[6]).activation(Activation::Softplus),
            12,
        )
        .unwrap(),
        build_driver(
            ArchitectureKind::IcnnYZ,
            Layout::new(1, 1, &[6, 6]).activation(Activation::Softplus),
            13,
        )
        .unwrap(),
        build_driver(
            ArchitectureKind::BoundedInteraction,
            Layout::new(1, 1, &[6]).aux(&[4]).bound(2.0),
            14,
        )
        .unwrap(),
    ];
    for net in cases {
        let n = net.n_params();
        let coords: Vec<usize> = (0..6).map(|i| (i * 7919 + 3) % n).collect();
        let r = fd(&ens, &xi, &net, &coords);
        assert!(r.max_relative_error < 1e-3, "{:?}: {r:?}", net.kind());
    }
}

#[test]
fn separable_net_random_coordinates() {
    let ens = ensemble(3_000, 10, 6);
    let net = build_driver(ArchitectureKind::Separable, Layout::new(1, 1, &[8]).aux(&[4]), 21).unwrap();
    let mut s = nexp_core::rng::Stream::new(99, 0);
    let coords: Vec<usize> = (0..5).map(|_| (s.uniform() * net.n_params() as f64) as usize).collect();
    let r = fd(&ens, &w_t(), &net, &coords);
    assert!(r.max_relative_error < 1e-3, "{r:?}");
}

#[test]
fn truncated_and_clipped_solves_still_match() {
    let ens = ensemble(5_000, 20, 7);
    let net = build_driver(ArchitectureKind::Free, Layout::new(1, 1, &[6]), 31).unwrap();
    let xi = Terminal::of_state(|x| 2.0 * x[0]);
    let opts = SolverOptions {
        truncation: Some(1.0),
        z_clip: ZClip::Iqr(0.5),
        ..Default::default()
    };
    let coords: Vec<usize> = (0..net.n_params()).step_by(3).collect();
    let r = fd_gradient_check(&ens, &xi, &net, &coords, 1e-5, RegressionBasis::default(), &opts).unwrap();
    assert!(r.max_relative_error < 1e-3, "{r:?}");
}

#[test]
fn fd_check_rejects_bad_step() {
    let ens = ensemble(100, 2, 8);
    let f = BuiltinDriver::entropic(1.0);
    assert!(fd_gradient_check(
        &ens,
        &w_t(),
        &f,
        &[0],
        0.0,
        RegressionBasis::default(),
        &SolverOptions::default()
    )
    .is_err());
}

fn terminals() -> Vec<Terminal> {
    (1..=10).map(|i| Terminal::brownian(&[0.2 * i as f64], 0.0)).collect()
}

#[test]
fn self_consistent_data_has_zero_loss() {
    let ens = ensemble(5_000, 10, 9);
    let net = build_driver(ArchitectureKind::Free, Layout::new(1, 1, &[4]), 41).unwrap();
    let ds = Dataset::new(
        terminals()
            .into_iter()
            .enumerate()
            .map(|(i, t)| Record::new(i.to_string(), t, 0.0))
            .collect(),
    )
    .unwrap()
    .relabel_with(&ens, &net, RegressionBasis::default(), &SolverOptions::default())
    .unwrap();
    let r = loss_and_gradient(
        &ds,
        &ens,
        &net,
        Regularization::default(),
        RegressionBasis::default(),
        &SolverOptions::default(),
    )
    .unwrap();
    assert_eq!(r.loss, 0.0);
    assert!(r.gradient.iter().all(|g| *g == 0.0));
}

#[test]
fn single_record_gradient_is_chain_rule() {
    let ens = ensemble(5_000, 10, 10);
    let net = build_driver(ArchitectureKind::Free, Layout::new(1, 1, &[4]), 42).unwrap();
    let ds = Dataset::new(vec![Record::new("a", w_t(), 0.4)]).unwrap();
    let b = RegressionBasis::default();
    let o = SolverOptions::default();
    let r = loss_and_gradient(&ds, &ens, &net, Regularization::default(), b, &o).unwrap();
    let fdr = fd(&ens, &w_t(), &net, &(0..net.n_params()).collect::<Vec<_>>());
    for (j, g) in r.gradient.iter().enumerate() {
        let expect = 2.0 * (r.y0[0] - 0.4) * fdr.finite_difference[j];
        assert!(
            (g - expect).abs() <= 1e-3 * g.abs().max(expect.abs()).max(1e-8),
            "{j}: {g} {expect}"
        );
    }
}

#[test]
fn regularizer_gradients_match_finite_differences() {
    let ens = ensemble(3_000, 10, 11);
    let net = build_driver(ArchitectureKind::Free, Layout::new(1, 1, &[4]), 43).unwrap();
    let ds = Dataset::new(vec![
        Record::new("a", w_t(), 0.4),
        Record::new("b", Terminal::brownian(&[2.0], 1.0), -0.2),
    ])
    .unwrap();
    let reg = Regularization {
        lambda_reg: 0.1,
        lambda_norm: 0.5,
    };
    let b = RegressionBasis::default();
    let o = SolverOptions::default();
    let r = loss_and_gradient(&ds, &ens, &net, reg, b, &o).unwrap();
    assert!(r.norm_term > 0.0 && r.reg_term > 0.0);
    let theta = net.params().to_vec();
    for j in [0, 3, 7, net.n_params() - 1] {
        let at = |d: f64| {
            let mut t = theta.clone();
            t[j] += d;
            loss_and_gradient(&ds, &ens, &net.with_params(&t).unwrap(), reg, b, &o)
                .unwrap()
                .loss
        };
        let fdv = (at(1e-5) - at(-1e-5)) / 2e-5;
        let g = r.gradient[j];
        assert!(
            (g - fdv).abs() <= 1e-3 * g.abs().max(fdv.abs()).max(1e-8),
            "{j}: {g} {fdv}"
        );
    }
}

#[test]
fn normalization_vanishes_for_drivers_zero_at_zero() {
    let ens = ensemble(3_000, 10, 12);
    let ds = Dataset::new(vec![Record::new("a", w_t(), -0.5)]).unwrap();
    let reg = Regularization {
        lambda_reg: 0.0,
        lambda_norm: 3.0,
    };
    let r = loss_and_gradient(
        &ds,
        &ens,
        &BuiltinDriver::entropic(1.0),
        reg,
        RegressionBasis::default(),
        &SolverOptions::default(),
    )
    .unwrap();
    assert_eq!(r.norm_term, 0.0);
}

#[test]
fn record_errors_carry_the_index() {
    let ens = ensemble(1_000, 5, 13);
    let bad = Terminal::of_state(|x| if x[0] > 0.0 { f64::NAN } else { 0.0 });
    let ds = Dataset::new(vec![Record::new("a", w_t(), 0.0), Record::new("b", bad, 0.0)]).unwrap();
    match loss_and_gradient(
        &ds,
        &ens,
        &BuiltinDriver::entropic(1.0),
        Regularization::default(),
        RegressionBasis::default(),
        &SolverOptions::default(),
    ) {
        Err(Error::Record { record: 1, .. }) => {}
        other => panic!("{other:?}"),
    }
    assert!(Dataset::new(vec![]).is_err());
    assert!(Dataset::new(vec![Record::new("a", w_t(), f64::INFINITY)]).is_err());
}

fn entropic_dataset(n: usize) -> Dataset {
    // Closed form: -(1/theta) log E exp(-theta c W_T) = -theta c^2 T / 2.
    let recs = (1..=n)
        .map(|i| {
            let c = 2.0 * i as f64 / n as f64;
            Record::new(format!("c{i}"), Terminal::brownian(&[c], 0.0), -1.5 * c * c / 2.0)
        })
        .collect();
    Dataset::new(recs).unwrap()
}

#[test]
fn synthetic_recovery_of_entropic_parameter() {
    let ens = ensemble(5_000, 20, 14);
    let cfg = TrainConfig {
        learning_rate: LearningRate::Constant(0.3),
        max_iters: 25,
        tol: Some(1e-12),
        regularization: Regularization::default(),
    };
    let (state, fitted) = train(
        &entropic_dataset(10),
        &ens,
        &BuiltinDriver::entropic(0.3),
        &cfg,
        RegressionBasis::default(),
        &SolverOptions::default(),
    )
    .unwrap();
    assert!((fitted.params()[0] - 1.5).abs() < 0.05 * 1.5, "{:?}", state.theta);
    assert!(
        state.loss_history.windows(2).all(|w| w[1] <= w[0]),
        "{:?}",
        state.loss_history
    );
    let csv = state.to_csv();
    assert!(csv.starts_with("iter,loss,grad_norm,theta_norm,"));
    assert_eq!(csv.lines().count(), state.log.len() + 1);
}

#[test]
fn frozen_optimizer_and_reproducibility() {
    let ens = ensemble(2_000, 10, 15);
    let b = RegressionBasis::default();
    let o = SolverOptions::default();
    let cfg = TrainConfig {
        learning_rate: LearningRate::Constant(0.0),
        max_iters: 3,
        tol: None,
        regularization: Regularization::default(),
    };
    let (s, _) = train(&entropic_dataset(3), &ens, &BuiltinDriver::entropic(0.3), &cfg, b, &o).unwrap();
    assert_eq!(s.theta, vec![0.3]);
    assert_eq!(s.loss_history.len(), 4);
    assert!(s.loss_history.iter().all(|l| *l == s.loss_history[0]));

    let net = build_driver(ArchitectureKind::Free, Layout::new(1, 1, &[4]), 44).unwrap();
    let cfg = TrainConfig {
        learning_rate: LearningRate::InverseTime { eta0: 0.05, decay: 0.1 },
        max_iters: 3,
        ..cfg
    };
    let (a, _) = train(&entropic_dataset(3), &ens, &net, &cfg, b, &o).unwrap();
    let (c, _) = train(&entropic_dataset(3), &ens, &net, &cfg, b, &o).unwrap();
    assert_eq!(a.theta, c.theta);
}

#[test]
fn constraints_survive_training() {
    let ens = ensemble(2_000, 10, 16);
    let b = RegressionBasis::default();
    let o = SolverOptions::default();
    let cfg = TrainConfig {
        learning_rate: LearningRate::Constant(0.05),
        max_iters: 4,
        tol: None,
        regularization: Regularization {
            lambda_reg: 1e-3,
            lambda_norm: 0.1,
        },
    };
    let mono = build_driver(ArchitectureKind::MonotoneY, Layout::new(1, 1, &[6]), 51).unwrap();
    let mut steps = 0;
    train_observed(&entropic_dataset(3), &ens, &mono, &cfg, b, &o, |_, net| {
        assert!(verify_monotone(net, 2_000, 7).pass);
        steps += 1;
    })
    .unwrap();
    assert_eq!(steps, 4);
    let icnn = build_driver(
        ArchitectureKind::IcnnYZ,
        Layout::new(1, 1, &[6, 6]).activation(Activation::Softplus),
        52,
    )
    .unwrap();
    train_observed(&entropic_dataset(3), &ens, &icnn, &cfg, b, &o, |_, net| {
        assert_eq!(verify_convexity(net, 2_000, 8, 0.0).n_violations, 0);
    })
    .unwrap();
}

#[test]
fn exploding_step_reports_training_diverged() {
    let ens = ensemble(1_000, 5, 17);
    let cfg = TrainConfig {
        learning_rate: LearningRate::Constant(1e308),
        max_iters: 5,
        tol: None,
        regularization: Regularization::default(),
    };
    match train(
        &entropic_dataset(3),
        &ens,
        &BuiltinDriver::entropic(0.3),
        &cfg,
        RegressionBasis::default(),
        &SolverOptions::default(),
    ) {
        Err(Error::TrainingDiverged { iteration }) => assert!(iteration <= 1),
        other => panic!("{:?}", other.map(|s| s.0.theta)),
    }
}

#[test]
fn dataset_csv_ingestion() {
    let text = "record_id,terminal_kind,terminal_params,observed_value\n\
                a,linear,0.5,0.1\n\
                b,linear,1,2,0.3\n\
                c,call,0.0,0.4\n\
                d,abs,1.0,0.8\n";
    let ds = Dataset::from_csv(text.as_bytes()).unwrap();
    assert_eq!(ds.len(), 4);
    assert_eq!(ds.records()[1].observed, 0.3);
    let ens = ensemble(10, 2, 18);
    let x = ens.state(3, 2)[0];
    assert_eq!(ds.records()[1].terminal.value(&ens, 3), x + 2.0);
    assert_eq!(ds.records()[2].terminal.value(&ens, 3), x.max(0.0));
    assert!(Dataset::from_csv("id,k,o\na,cubic,1,2\n".as_bytes()).is_err());
    assert!(Dataset::from_csv("id,k,o\na,abs,x,2\n".as_bytes()).is_err());
    assert!(Dataset::from_csv("id,k,o\n".as_bytes()).is_err());
}
