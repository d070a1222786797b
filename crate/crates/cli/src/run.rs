use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use nexp_core::bsde::*;
use nexp_core::meanfield::{
    builtin_fluctuation, builtin_model, clt_experiment, lln_experiment, solve_fluctuation_system, solve_mckean_vlasov,
    ExperimentOptions, FixedPointOptions, FluctuationOptions, InitialLaw, LINEAR_GAUSSIAN_CLT, LINEAR_MEAN_FIELD,
};
use nexp_core::merton::{
    calibrate_theta, classical_merton, read_observations, solve_hjb, verify_ambiguity_properties, CalibrationSearch,
    HjbGridSpec, MarketParams, WealthTrend,
};
use nexp_core::nets::*;
use nexp_core::rng::derive_seed;
use nexp_core::sensitivity::{train, Dataset, LearningRate, Regularization, TrainConfig};
use nexp_core::stochastic::*;

use crate::config::*;
use crate::report::RunReport;
use crate::CliError;

const DEFAULT_OUT: &str = "nexp-out";

type Res<T> = Result<T, CliError>;

/// Attaches a context string to core errors.
trait Ctx<T> {
    fn ctx(self, context: &str) -> Res<T>;
}

impl<T> Ctx<T> for nexp_core::Result<T> {
    fn ctx(self, context: &str) -> Res<T> {
        self.map_err(|e| CliError::core(context, e))
    }
}

struct Run<'a> {
    seed: u64,
    out: PathBuf,
    base: &'a Path,
    report: RunReport,
}

impl Run<'_> {
    fn write(&mut self, name: &str, contents: &str) -> Res<()> {
        let path = self.out.join(name);
        std::fs::write(&path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.report.artifacts.push(path.to_string_lossy().into_owned());
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

/// Runs one experiment, writing CSV artifacts and `report.json` into the
/// output directory.
pub fn run_experiment(loaded: &LoadedConfig) -> Res<RunReport> {
    let cfg = &loaded.config;
    let out = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let mut run = Run {
        seed: cfg.seed,
        out,
        base: &loaded.base_dir,
        report: RunReport::new(cfg.experiment.kind(), loaded.echo.clone(), loaded.hash.clone()),
    };
    let start = Instant::now();
    match &cfg.experiment {
        Experiment::Solve(s) => solve(&mut run, s)?,
        Experiment::OracleSuite(s) => oracle_suite(&mut run, s)?,
        Experiment::VerifyAxioms(s) => verify(&mut run, s)?,
        Experiment::Train(s) => train_run(&mut run, s)?,
        Experiment::MeanfieldLln(s) => lln(&mut run, s)?,
        Experiment::MeanfieldClt(s) => clt(&mut run, s)?,
        Experiment::Fbsde(s) => fbsde(&mut run, s)?,
        Experiment::Merton(s) => merton(&mut run, s)?,
        Experiment::Calibrate(s) => calibrate(&mut run, s)?,
    }
    run.report.timing("total", start.elapsed().as_secs_f64());
    // Listed before writing so the file names itself.
    let path = run.out.join("report.json");
    run.report.artifacts.push(path.to_string_lossy().into_owned());
    std::fs::write(&path, run.report.to_json()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(run.report)
}

pub fn build_driver(spec: &DriverSpec, seed: u64, base: &Path) -> Res<AnyDriver> {
    Ok(match spec {
        DriverSpec::Zero => BuiltinDriver::zero().into(),
        DriverSpec::Linear { b } => BuiltinDriver::linear(b).into(),
        DriverSpec::Entropic { theta } => BuiltinDriver::entropic(*theta).into(),
        DriverSpec::ConvexQuadratic { theta } => BuiltinDriver::convex_quadratic(*theta).into(),
        DriverSpec::Constant { theta, c } => BuiltinDriver::constant(*theta, *c).into(),
        DriverSpec::Net {
            architecture,
            x_dim,
            z_dim,
            hidden,
            activation,
            aux,
            bound,
            monotone_aux,
            init_seed,
        } => {
            let kind = ArchitectureKind::from_str(architecture)
                .map_err(|e| CliError::config("driver.architecture", e.to_string()))?;
            let mut layout = Layout::new(*x_dim, *z_dim, hidden).monotone_aux(*monotone_aux);
            if let Some(a) = activation {
                let act = Activation::from_str(a).map_err(|e| CliError::config("driver.activation", e.to_string()))?;
                layout = layout.activation(act);
            }
            if let Some(w) = aux {
                layout = layout.aux(w);
            }
            if let Some(m) = bound {
                layout = layout.bound(*m);
            }
            let s = init_seed.unwrap_or_else(|| derive_seed(seed, "net-init"));
            build_driver_net(kind, layout, s)?.into()
        }
        DriverSpec::NetFile { path } => {
            let p = if path.is_absolute() {
                path.clone()
            } else {
                base.join(path)
            };
            let text = std::fs::read_to_string(&p)
                .map_err(|e| CliError::config("driver.path", format!("cannot read {}: {e}", p.display())))?;
            DriverNet::from_text(&text)
                .map_err(|e| CliError::config("driver.path", e.to_string()))?
                .into()
        }
    })
}

fn build_driver_net(kind: ArchitectureKind, layout: Layout, seed: u64) -> Res<DriverNet> {
    nexp_core::nets::build_driver(kind, layout, seed).map_err(|e| CliError::config("driver", e.to_string()))
}

fn terminal(spec: &TerminalSpec, field: &str) -> Res<Terminal> {
    if spec.kind == "brownian" {
        let (a, shift) = match spec.params.as_slice() {
            [a] => (*a, 0.0),
            [a, s] => (*a, *s),
            _ => return Err(CliError::config(field, "terminal `brownian` takes [a] or [a, shift]")),
        };
        return Ok(Terminal::brownian(&[a], shift));
    }
    Terminal::from_kind(&spec.kind, &spec.params).map_err(|e| CliError::config(field, e.to_string()))
}

fn solver(spec: &SolverSpec) -> (RegressionBasis, SolverOptions) {
    (
        RegressionBasis::new(spec.basis_degree),
        SolverOptions {
            inner_picard_iters: spec.inner_picard_iters,
            z_clip: spec.z_clip_iqr.map_or(ZClip::None, ZClip::Iqr),
            truncation: spec.truncation,
        },
    )
}

fn time_grid(g: &GridSpec) -> Res<TimeGrid> {
    TimeGrid::new(g.horizon, g.steps).map_err(|e| CliError::config("grid", e.to_string()))
}

fn ensemble(forward: &ForwardSpec, grid: &TimeGrid, paths: usize, seed: u64) -> Res<PathEnsemble> {
    let (model, dim): (Box<dyn ForwardModel>, usize) = match *forward {
        ForwardSpec::Brownian { dim } => (Box::new(BrownianMotion::new(dim)), dim),
        ForwardSpec::Gbm { mu, sigma, x0 } => (Box::new(GeometricBrownian::new(mu, sigma, x0)), 1),
        ForwardSpec::ScalarLinear { a, b, s, x0 } => (Box::new(ScalarLinearSde::new(a, b, s, x0)), 1),
    };
    let bundle = Arc::new(sample_brownian(grid, paths, dim, derive_seed(seed, "brownian")).ctx("sampling")?);
    simulate_forward(model.as_ref(), grid, bundle).ctx("forward simulation")
}

fn solve(run: &mut Run, s: &SolveSpec) -> Res<()> {
    let driver = build_driver(&s.driver, run.seed, run.base)?;
    let xi = terminal(&s.terminal, "terminal")?;
    let grid = time_grid(&s.grid)?;
    let ens = ensemble(&s.forward, &grid, s.paths, run.seed)?;
    let (basis, opts) = solver(&s.solver);
    let sol = solve_bsde_lsmc(&BsdeProblem::new(&ens, &xi, &driver), basis, &opts).ctx("BSDE solve")?;
    run.report.metric("y0", sol.y0());
    for (i, z) in sol.z0().iter().enumerate() {
        run.report.metric(&format!("z0[{i}]"), *z);
    }
    run.report.metric("mc_std_error", sol.mc_std_error());
    run.report.metric("max_abs_y", sol.max_abs_y());
    if let Some(e) = &s.expect_y0 {
        run.report.check_close("y0", sol.y0(), e.value, e.tol);
    }
    run.write("solution.csv", &sol.to_csv())
}

fn oracle_suite(run: &mut Run, s: &OracleSuiteSpec) -> Res<()> {
    let grid = TimeGrid::new(1.0, s.steps).map_err(|e| CliError::config("steps", e.to_string()))?;
    let ens = ensemble(&ForwardSpec::default(), &grid, s.paths, run.seed)?;
    let xi = Terminal::brownian(&[1.0], 0.0);
    let (basis, opts) = solver(&SolverSpec::default());
    let th = s.entropic_theta;
    let cases: [(&str, AnyDriver, f64, f64); 3] = [
        ("zero-driver", BuiltinDriver::zero().into(), 0.0, s.zero_tol),
        (
            "linear-driver",
            BuiltinDriver::linear(&[s.linear_b]).into(),
            s.linear_b,
            s.rel_tol * s.linear_b.abs(),
        ),
        (
            "entropic-driver",
            BuiltinDriver::entropic(th).into(),
            -th / 2.0,
            s.rel_tol * (th / 2.0).abs(),
        ),
    ];
    let wt: Vec<f64> = xi.values(&ens);
    let mut csv = String::from("driver,y0,closed_form,sample_oracle,tolerance\n");
    for (name, driver, exact, tol) in cases {
        let sol = solve_bsde_lsmc(&BsdeProblem::new(&ens, &xi, &driver), basis, &opts).ctx(name)?;
        let sample = match name {
            "zero-driver" => closed_form_oracle(&OracleKind::Zero, &wt, None, 1.0),
            "linear-driver" => {
                let w: Vec<Vec<f64>> = wt.iter().map(|v| vec![*v]).collect();
                closed_form_oracle(&OracleKind::Linear { b: vec![s.linear_b] }, &wt, Some(&w), 1.0)
            }
            _ => closed_form_oracle(&OracleKind::Entropic { theta: th }, &wt, None, 1.0),
        }
        .ctx("oracle")?;
        run.report.check_close(&format!("{name}-y0"), sol.y0(), exact, tol);
        run.report.metric(&format!("{name}-sample-oracle"), sample);
        csv.push_str(&format!("{name},{},{exact},{sample},{tol}\n", sol.y0()));
    }
    run.write("oracle_suite.csv", &csv)
}

fn verify(run: &mut Run, s: &VerifySpec) -> Res<()> {
    let driver = build_driver(&s.driver, run.seed, run.base)?;
    let grid = time_grid(&s.grid)?;
    let ens = ensemble(&ForwardSpec::default(), &grid, s.paths, run.seed)?;
    let (basis, opts) = solver(&s.solver);
    let default_xi = |kind: &str, params: Vec<f64>| TerminalSpec {
        kind: kind.into(),
        params,
    };
    let wt = Terminal::brownian(&[1.0], 0.0);
    let problem = BsdeProblem::new(&ens, &wt, &driver);
    let mut csv = String::from("check,passed,measured,tolerance\n");
    for check in &s.checks {
        let (name, passed, measured, tol, detail) = match check {
            AxiomCheck::Comparison => {
                let x1 = terminal(s.xi_1.as_ref().unwrap_or(&default_xi("abs", vec![1.0])), "xi_1")?;
                let x2 = terminal(s.xi_2.as_ref().unwrap_or(&default_xi("linear", vec![1.0])), "xi_2")?;
                let r = check_comparison(&problem, &x1, &x2, basis, &opts).ctx("comparison")?;
                run.report
                    .metric("comparison-violation-count", r.violation_count as f64);
                (
                    "comparison",
                    r.pass,
                    r.y0_gap,
                    r.tol,
                    "Y0 gap >= -tol and no pathwise violation",
                )
            }
            AxiomCheck::Convexity | AxiomCheck::Jensen => {
                let x1 = terminal(s.xi_1.as_ref().unwrap_or(&default_xi("linear", vec![1.0])), "xi_1")?;
                let x2 = terminal(s.xi_2.as_ref().unwrap_or(&default_xi("linear", vec![-1.0])), "xi_2")?;
                let r = check_convexity_and_jensen(&problem, &x1, &x2, s.lambda, &C2Fn::square(), basis, &opts)
                    .ctx("convexity")?;
                if *check == AxiomCheck::Convexity {
                    (
                        "convexity",
                        r.delta_cvx >= -r.tol,
                        r.delta_cvx,
                        r.tol,
                        "convexity gap >= -3 x noise",
                    )
                } else {
                    (
                        "jensen",
                        r.delta_jen >= -r.tol,
                        r.delta_jen,
                        r.tol,
                        "Jensen gap >= -3 x noise",
                    )
                }
            }
            AxiomCheck::Consistency => {
                let k = ((s.split_fraction * grid.n_steps() as f64).round() as usize).clamp(1, grid.n_steps() - 1);
                let r = check_dynamic_consistency(&problem, grid.time(k), basis, &opts).ctx("consistency")?;
                let tol = (3.0 * r.noise).max(0.02 * r.y0_direct.abs());
                (
                    "consistency",
                    r.gap <= tol,
                    r.gap,
                    tol,
                    "|direct - nested| <= max(3 x noise, 2%)",
                )
            }
            AxiomCheck::Dual => {
                if s.dual_controls.is_empty() {
                    return Err(CliError::config(
                        "dual_controls",
                        "the dual check needs at least one control",
                    ));
                }
                let controls: Vec<Vec<f64>> = s.dual_controls.iter().map(|u| vec![*u]).collect();
                let x1 = match &s.xi_1 {
                    Some(t) => terminal(t, "xi_1")?,
                    None => wt.clone(),
                };
                let d = dual_lower_bound(&ens, &x1, &driver, &controls, &ConjugateGrid::default()).ctx("dual bound")?;
                let sol = solve_bsde_lsmc(&problem.with_terminal(&x1), basis, &opts).ctx("dual reference solve")?;
                let tol = 3.0 * sol.mc_std_error();
                run.report.metric("dual-best", d.best);
                run.report.metric("dual-y0", sol.y0());
                (
                    "dual-bound",
                    d.best <= sol.y0() + tol,
                    d.best - sol.y0(),
                    tol,
                    "best bound - Y0 <= 3 x std error",
                )
            }
        };
        run.report.check(name, passed, measured, tol, detail);
        csv.push_str(&format!("{name},{passed},{measured},{tol}\n"));
    }
    run.write("axioms.csv", &csv)
}

fn train_run(run: &mut Run, s: &TrainSpec) -> Res<()> {
    let path = run.resolve(&s.dataset);
    let file = std::fs::File::open(&path)
        .map_err(|e| CliError::config("dataset", format!("cannot open {}: {e}", path.display())))?;
    let data = Dataset::from_csv(file).map_err(|e| CliError::config("dataset", e.to_string()))?;
    let driver = build_driver(&s.driver, run.seed, run.base)?;
    let grid = time_grid(&s.grid)?;
    let ens = ensemble(&ForwardSpec::default(), &grid, s.paths, run.seed)?;
    let (basis, opts) = solver(&s.solver);
    let cfg = TrainConfig {
        learning_rate: if s.decay == 0.0 {
            LearningRate::Constant(s.learning_rate)
        } else {
            LearningRate::InverseTime {
                eta0: s.learning_rate,
                decay: s.decay,
            }
        },
        max_iters: s.max_iters,
        tol: s.tol,
        regularization: Regularization {
            lambda_reg: s.lambda_reg,
            lambda_norm: s.lambda_norm,
        },
    };
    let (state, fitted) = train(&data, &ens, &driver, &cfg, basis, &opts).ctx("training")?;
    run.report.metric("iterations", state.iteration as f64);
    run.report
        .metric("final_loss", *state.loss_history.last().unwrap_or(&f64::NAN));
    for (i, p) in fitted.params().iter().enumerate() {
        run.report.metric(&format!("theta[{i}]"), *p);
    }
    if let Some(expect) = &s.expect_params {
        if expect.len() != fitted.n_params() {
            return Err(CliError::config(
                "expect_params",
                format!(
                    "driver has {} parameters, got {} expectations",
                    fitted.n_params(),
                    expect.len()
                ),
            ));
        }
        for (i, (e, p)) in expect.iter().zip(fitted.params()).enumerate() {
            run.report.check_close(&format!("theta[{i}]"), *p, e.value, e.tol);
        }
    }
    run.write("training_log.csv", &state.to_csv())?;
    match &fitted {
        AnyDriver::Net(n) => run.write("fitted_net.txt", &n.to_text()),
        AnyDriver::Builtin(_) => {
            let s: Vec<String> = fitted.params().iter().map(|v| v.to_string()).collect();
            run.write("fitted_params.csv", &format!("theta\n{}\n", s.join("\n")))
        }
    }
}

fn experiment_options(trials: usize, cloud: usize) -> ExperimentOptions {
    ExperimentOptions {
        n_trials: trials,
        cloud_size: cloud,
        ..Default::default()
    }
}

fn lln(run: &mut Run, s: &LlnSpec) -> Res<()> {
    let model = builtin_model(&s.model).map_err(|e| CliError::config("model", e.to_string()))?;
    let grid = time_grid(&s.grid)?;
    let t = lln_experiment(
        &model,
        &s.n_list,
        &grid,
        run.seed,
        RegressionBasis::new(s.basis_degree),
        &experiment_options(s.trials, s.cloud_size),
    )
    .ctx("LLN experiment")?;
    let errs: Vec<f64> = t.summary.iter().map(|r| r.error).collect();
    for (r, e) in t.summary.iter().zip(&errs) {
        run.report.metric(&format!("error[N={}]", r.n), *e);
    }
    if errs.iter().all(|e| *e == 0.0) {
        run.report.check(
            "no-interaction-exact",
            true,
            0.0,
            0.0,
            "coupled errors are exactly zero",
        );
    } else {
        let worst = errs.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max);
        run.report.check(
            "errors-decreasing",
            worst < 1.0,
            worst,
            1.0,
            "largest ratio of consecutive errors < 1",
        );
    }
    if let Some(slope) = t.slope {
        run.report.metric("slope", slope);
        if let Some(e) = &s.expect_slope {
            run.report.check_close("slope", slope, e.value, e.tol);
        }
    }
    run.write("lln_trials.csv", &t.to_csv())?;
    run.write("lln_summary.csv", &t.summary_csv())
}

fn clt(run: &mut Run, s: &CltSpec) -> Res<()> {
    let model = builtin_model(&s.model).map_err(|e| CliError::config("model", e.to_string()))?;
    let grid = time_grid(&s.grid)?;
    let basis = RegressionBasis::new(s.basis_degree);
    let u0 = InitialLaw::Normal {
        mean: 0.0,
        var: s.u0_variance,
    };
    let opts = experiment_options(s.trials, s.cloud_size);
    let t = clt_experiment(&model, &s.n_list, &grid, run.seed, basis, u0, &opts).ctx("CLT experiment")?;
    let last = t.summary.last().expect("validated n_list");
    run.report.metric("var_u_last", last.var_u);
    run.report.metric("var_v_last", last.var_v);
    run.write("clt_trials.csv", &t.to_csv())?;
    run.write("clt_summary.csv", &t.summary_csv())?;
    let linear = match s.model.as_str() {
        "linear-gaussian-clt" => Some(LINEAR_GAUSSIAN_CLT),
        "linear-mean-field" => Some(LINEAR_MEAN_FIELD),
        _ => None,
    };
    if let (Some(p), Some(tol)) = (linear, s.variance_rel_tol) {
        let limit = (2.0 * p.c * grid.horizon()).exp() * s.u0_variance;
        let rel = (last.var_u - limit).abs() / limit;
        run.report
            .check("var-u-vs-limit", rel <= tol, rel, tol, format!("relative to {limit}"));
    }
    if s.fluctuation_paths > 0 {
        let coeffs = builtin_fluctuation(&s.model).map_err(|e| CliError::config("model", e.to_string()))?;
        let mf = solve_mckean_vlasov(
            &model,
            s.cloud_size,
            &grid,
            derive_seed(run.seed, "fluctuation-mf"),
            basis,
            &SolverOptions::default(),
            &FixedPointOptions::default(),
        )
        .ctx("McKean-Vlasov solve")?;
        let f = solve_fluctuation_system(
            &coeffs,
            &mf,
            u0,
            s.fluctuation_paths,
            derive_seed(run.seed, "fluctuation"),
            basis,
            &FluctuationOptions::default(),
        )
        .ctx("fluctuation solve")?;
        run.report.metric("fluctuation_var_v", f.var_v_terminal());
        let rel = (f.var_v_terminal() - last.var_v).abs() / last.var_v;
        run.report.check(
            "routes-agree",
            rel <= 0.15,
            rel,
            0.15,
            "fluctuation solve vs empirical Var(V_T)",
        );
        run.write("fluctuation.csv", &f.to_csv())?;
    }
    Ok(())
}

fn fbsde(run: &mut Run, s: &FbsdeSpec) -> Res<()> {
    let driver = build_driver(&s.driver, run.seed, run.base)?;
    let xi = terminal(&s.terminal, "terminal")?;
    let grid = time_grid(&s.grid)?;
    let model = ScalarLinearSde::new(s.a, s.b, s.s, s.x0).with_coupling(s.coupling_y, s.coupling_z);
    let bundle = Arc::new(sample_brownian(&grid, s.paths, 1, derive_seed(run.seed, "brownian")).ctx("sampling")?);
    let (basis, opts) = solver(&s.solver);
    let po = PicardOptions {
        max_iters: s.max_iters,
        tol: s.tol,
    };
    let r = solve_fbsde_picard(&model, &grid, bundle, &xi, &driver, basis, &opts, &po).ctx("Picard iteration")?;
    run.report.metric("y0", r.solution.y0());
    run.report.metric("iterations", r.iterations as f64);
    let last = r.residuals.last().copied().unwrap_or(0.0);
    run.report
        .check("picard-converged", r.converged, last, s.tol, "final residual <= tol");
    let mut csv = String::from("sweep,residual\n");
    for (i, v) in r.residuals.iter().enumerate() {
        csv.push_str(&format!("{},{v}\n", i + 2));
    }
    run.write("picard_residuals.csv", &csv)?;
    run.write("solution.csv", &r.solution.to_csv())
}

fn market(m: &MarketSpec) -> Res<MarketParams> {
    MarketParams::new(m.mu, m.r, m.sigma, m.gamma, m.horizon).map_err(|e| CliError::config("market", e.to_string()))
}

fn hjb_spec(h: &HjbSpec) -> HjbGridSpec {
    HjbGridSpec {
        intervals: h.intervals,
        n_time_steps: h.time_steps,
        l_range: h.l_range,
        x0: h.x0,
    }
}

fn merton(run: &mut Run, s: &MertonSpec) -> Res<()> {
    let p = market(&s.market)?;
    let spec = hjb_spec(&s.hjb);
    let classical = classical_merton(&p).ctx("classical Merton")?;
    run.report.metric("classical_fraction", classical.fraction);
    for &th in &s.thetas {
        let g = solve_hjb(&p, th, &spec).ctx(&format!("HJB solve at theta {th}"))?;
        if th == 0.0 {
            let (mut ev, mut ep) = (0.0f64, 0.0f64);
            for k in 0..=g.n_time_steps() {
                for j in g.interior() {
                    let v = classical.value(g.times()[k], g.wealth(j));
                    ev = ev.max(((g.value(k, j) - v) / v).abs());
                    ep = ep.max(((g.policy(k, j) - classical.fraction) / classical.fraction).abs());
                }
            }
            run.report.check(
                "classical-value",
                ev <= s.value_rel_tol,
                ev,
                s.value_rel_tol,
                "max relative error",
            );
            run.report.check(
                "classical-policy",
                ep <= s.policy_rel_tol,
                ep,
                s.policy_rel_tol,
                "max relative error",
            );
        }
        run.write(&format!("policy_theta_{th}.csv"), &g.to_csv())?;
    }
    let sorted = s.thetas.windows(2).all(|w| w[1] > w[0]) && s.thetas[0] >= 0.0;
    if sorted && s.thetas.iter().any(|t| *t > 0.0) {
        let r = verify_ambiguity_properties(&p, &s.thetas, &spec).ctx("ambiguity properties")?;
        let margin = r
            .max_fraction
            .iter()
            .zip(&r.thetas)
            .filter(|(_, t)| **t > 0.0)
            .map(|(m, _)| m - r.classical_fraction)
            .fold(f64::NEG_INFINITY, f64::max);
        run.report.check(
            "caution",
            r.caution_holds,
            margin,
            0.0,
            "max pi - classical < 0 at interior nodes",
        );
        if s.thetas.len() > 1 {
            run.report.check(
                "theta-monotone",
                r.monotone_holds,
                if r.monotone_holds { 0.0 } else { 1.0 },
                0.0,
                "pointwise strict decrease across consecutive theta",
            );
        }
        for w in &r.wealth {
            let v = match w.trend {
                WealthTrend::Decreasing => -1.0,
                WealthTrend::Increasing => 1.0,
                WealthTrend::Flat => 0.0,
                WealthTrend::Mixed => f64::NAN,
            };
            run.report.metric(&format!("wealth_trend[theta={}]", w.theta), v);
        }
    }
    Ok(())
}

fn calibrate(run: &mut Run, s: &CalibrateSpec) -> Res<()> {
    let p = market(&s.market)?;
    let path = run.resolve(&s.observations);
    let file = std::fs::File::open(&path)
        .map_err(|e| CliError::config("observations", format!("cannot open {}: {e}", path.display())))?;
    let obs = read_observations(file).map_err(|e| CliError::config("observations", e.to_string()))?;
    let search = CalibrationSearch {
        theta_lo: s.theta_lo,
        theta_hi: s.theta_hi,
        tol: s.tol,
    };
    let r = calibrate_theta(&p, &obs, &hjb_spec(&s.hjb), &search).ctx("calibration")?;
    run.report.metric("theta", r.theta);
    run.report.metric("loss", r.loss);
    run.report
        .metric("fell_back_to_scan", if r.fell_back { 1.0 } else { 0.0 });
    if let Some(e) = &s.expect_theta {
        run.report.check_close("theta", r.theta, e.value, e.tol);
    }
    run.write("loss_curve.csv", &r.curve_csv())
}
