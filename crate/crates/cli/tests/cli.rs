use std::path::{Path, PathBuf};
use std::process::Command;

use nexp_cli::{
    emit_report, load_config, parse_config, run_experiment, CliError, LoadedConfig, Overrides, ReportFormat, RunReport,
};
use serde_json::json;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn parse(v: serde_json::Value, out: &Path) -> LoadedConfig {
    let overrides = Overrides {
        seed: None,
        output_dir: Some(out.to_path_buf()),
    };
    parse_config(&v.to_string(), &overrides, &configs_dir()).expect("config parses")
}

fn nexp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nexp"))
}

fn check<'a>(r: &'a RunReport, name: &str) -> &'a nexp_cli::report::Check {
    r.checks
        .iter()
        .find(|c| c.name == name)
        .unwrap_or_else(|| panic!("no check `{name}` in {:?}", r.checks))
}

#[test]
fn oracle_suite_with_defaults_passes_all_three_checks() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_experiment(&parse(json!({"kind": "oracle-suite", "seed": 1}), dir.path())).unwrap();
    let names: Vec<&str> = r.checks.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names, ["zero-driver-y0", "linear-driver-y0", "entropic-driver-y0"]);
    assert!(r.passed(), "{}", r.to_text());
    assert!(dir.path().join("oracle_suite.csv").exists());
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn merton_theta_zero_asserts_classical_recovery() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "kind": "merton",
        "seed": 0,
        "market": {"mu": 0.08, "r": 0.02, "sigma": 0.2, "gamma": 0.5},
        "thetas": [0.0],
        "hjb": {"intervals": 120}
    });
    let r = run_experiment(&parse(cfg, dir.path())).unwrap();
    assert!(check(&r, "classical-value").passed);
    assert!(check(&r, "classical-policy").passed);
    let frac = r.metrics.iter().find(|m| m.name == "classical_fraction").unwrap();
    assert!((frac.value.unwrap() - 3.0).abs() < 1e-12);
    let csv = std::fs::read_to_string(dir.path().join("policy_theta_0.csv")).unwrap();
    assert!(csv.starts_with("t,x,V,pi"));
}

#[test]
fn missing_seed_is_a_config_error_naming_seed() {
    let text = r#"{"kind": "oracle-suite"}"#;
    match parse_config(text, &Overrides::default(), Path::new(".")) {
        Err(e @ CliError::Config { .. }) => {
            assert!(e.to_string().contains("seed"), "{e}");
            assert_eq!(e.exit_code(), 2);
        }
        other => panic!("expected a config error, got {other:?}"),
    }
    // A command-line seed fills the gap.
    let o = Overrides {
        seed: Some(5),
        output_dir: None,
    };
    assert_eq!(parse_config(text, &o, Path::new(".")).unwrap().config.seed, 5);
}

#[test]
fn config_errors_carry_the_field_path() {
    let cases = [
        (json!({"seed": 1}), "kind"),
        (json!({"seed": 1, "kind": "nonsense"}), "kind"),
        (
            json!({"seed": 1, "kind": "solve", "driver": {"type": "zero"},
                   "terminal": {"type": "linear", "params": [1.0]}, "grid": {"steps": 10}}),
            "paths",
        ),
        (
            json!({"seed": 1, "kind": "solve", "driver": {"type": "entropic", "theta": "x"},
                   "terminal": {"type": "linear"}, "grid": {"steps": 10}, "paths": 10}),
            "driver",
        ),
        (
            json!({"seed": 1, "kind": "solve", "driver": {"type": "zero"},
                   "terminal": {"type": "linear", "params": [1.0]}, "grid": {"steps": 0}, "paths": 10}),
            "steps",
        ),
        (
            json!({"seed": 1, "kind": "merton", "market": {"mu": 0.08, "r": 0.02, "sigma": 0.2, "gamma": 0.5},
                "thetas": []}),
            "thetas",
        ),
    ];
    for (cfg, field) in cases {
        let e = parse_config(&cfg.to_string(), &Overrides::default(), Path::new(".")).unwrap_err();
        assert!(matches!(e, CliError::Config { .. }), "{e:?}");
        assert!(e.to_string().contains(field), "`{e}` should name `{field}`");
    }
}

#[test]
fn core_errors_are_wrapped_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "kind": "solve", "seed": 1,
        "driver": {"type": "zero"},
        "terminal": {"type": "call", "params": [1.0, 2.0]},
        "grid": {"steps": 5}, "paths": 100
    });
    let e = run_experiment(&parse(cfg, dir.path())).unwrap_err();
    assert!(e.to_string().contains("terminal"), "{e}");
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn every_shipped_config_parses() {
    let mut n = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            load_config(&path, &Overrides::default()).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 9);
}

fn sample_report() -> RunReport {
    let echo = json!({"kind": "solve", "seed": 3});
    let hash = nexp_cli::config::config_hash(&echo);
    let mut r = RunReport::new("solve", echo, hash);
    r.check_close("y0", -0.49, -0.5, 0.02);
    r.check("tiny", true, 1e-300, 0.0, "edge value");
    r.metric("nan-metric", f64::NAN);
    r.metric("z0[0]", 0.1 + 0.2);
    r.timing("total", 1.5);
    r.artifacts.push("out/solution.csv".into());
    r
}

#[test]
fn json_report_round_trips_field_for_field() {
    let r = sample_report();
    let back = RunReport::from_json(&emit_report(&r, ReportFormat::Json)).unwrap();
    assert_eq!(back, r);
    // Stable keys: emitting twice gives the same document.
    assert_eq!(
        emit_report(&back, ReportFormat::Json),
        emit_report(&r, ReportFormat::Json)
    );
}

#[test]
fn empty_report_keeps_its_header() {
    let echo = json!({"kind": "merton", "seed": 0});
    let r = RunReport::new("merton", echo.clone(), nexp_cli::config::config_hash(&echo));
    let text = emit_report(&r, ReportFormat::Text);
    assert!(text.starts_with("nexp run report\nkind:        merton\n"));
    assert!(text.contains("checks:      0 (0 failed)"));
    assert!(!text.contains("PASS") && !text.contains("FAIL"));
    assert!(r.passed());
}

#[test]
fn one_failed_check_gives_one_fail_line() {
    let mut r = sample_report();
    r.check_close("off-target", 1.0, 0.0, 0.1);
    let text = emit_report(&r, ReportFormat::Text);
    assert_eq!(text.lines().filter(|l| l.contains("FAIL")).count(), 1);
    assert!(text.contains("exit status 1"));
    assert!(!r.passed());
}

#[test]
fn config_hash_matches_the_echo() {
    let mut r = sample_report();
    assert!(r.hash_matches());
    r.config["seed"] = json!(4);
    assert!(!r.hash_matches());
}

fn small_solve(out: &Path) -> LoadedConfig {
    parse(
        json!({
            "kind": "solve", "seed": 42,
            "driver": {"type": "net", "architecture": "monotone_y", "hidden": [6], "activation": "tanh"},
            "terminal": {"type": "abs", "params": [1.0]},
            "grid": {"steps": 8}, "paths": 2000
        }),
        out,
    )
}

#[test]
fn identical_configs_give_bitwise_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_experiment(&small_solve(dir.path())).unwrap();
    let csv_a = std::fs::read(dir.path().join("solution.csv")).unwrap();
    let b = run_experiment(&small_solve(dir.path())).unwrap();
    let csv_b = std::fs::read(dir.path().join("solution.csv")).unwrap();
    assert_eq!(a.without_timings(), b.without_timings());
    assert_eq!(csv_a, csv_b);
    let y0 = |r: &RunReport| r.metrics.iter().find(|m| m.name == "y0").unwrap().value.unwrap();
    assert_eq!(y0(&a).to_bits(), y0(&b).to_bits());
    assert!(a.hash_matches());

    let other = parse(
        json!({
            "kind": "solve", "seed": 43,
            "driver": {"type": "net", "architecture": "monotone_y", "hidden": [6], "activation": "tanh"},
            "terminal": {"type": "abs", "params": [1.0]},
            "grid": {"steps": 8}, "paths": 2000
        }),
        dir.path(),
    );
    let c = run_experiment(&other).unwrap();
    assert_ne!(c.config_hash, a.config_hash);
    assert_ne!(y0(&c), y0(&a));
}

#[test]
fn calibrate_config_recovers_its_theta() {
    let dir = tempfile::tempdir().unwrap();
    let o = Overrides {
        seed: None,
        output_dir: Some(dir.path().to_path_buf()),
    };
    let loaded = load_config(&configs_dir().join("calibrate.json"), &o).unwrap();
    let r = run_experiment(&loaded).unwrap();
    assert!(check(&r, "theta").passed, "{}", r.to_text());
    let curve = std::fs::read_to_string(dir.path().join("loss_curve.csv")).unwrap();
    assert!(curve.starts_with("theta,loss\n"));
}

fn write_config(dir: &Path, name: &str, v: serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, v.to_string()).unwrap();
    p
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let market = json!({"mu": 0.08, "r": 0.02, "sigma": 0.2, "gamma": 0.5});

    let ok = write_config(
        dir.path(),
        "ok.json",
        json!({"kind": "merton", "seed": 1, "market": market, "thetas": [0.0, 0.5], "hjb": {"intervals": 60}}),
    );
    let run = nexp()
        .args(["merton", "--config"])
        .arg(&ok)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(stdout.contains("PASS caution"));
    assert!(stdout.contains("exit status 0"));

    // `report` re-emits the saved report and re-verifies its hash.
    let saved = out.join("report.json");
    let rep = nexp()
        .arg("report")
        .arg(&saved)
        .args(["--format", "json"])
        .output()
        .unwrap();
    assert_eq!(rep.status.code(), Some(0));
    let back = RunReport::from_json(&String::from_utf8(rep.stdout).unwrap()).unwrap();
    assert!(check(&back, "config-hash").passed);

    let failing = write_config(
        dir.path(),
        "fail.json",
        json!({"kind": "solve", "seed": 1, "driver": {"type": "zero"},
               "terminal": {"type": "linear", "params": [1.0, 1.0]},
               "grid": {"steps": 4}, "paths": 1000, "expect_y0": {"value": 0.0, "tol": 0.1}}),
    );
    let run = nexp()
        .args(["solve", "--config"])
        .arg(&failing)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(1));
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert_eq!(stdout.lines().filter(|l| l.contains("FAIL")).count(), 1);

    let no_seed = write_config(dir.path(), "noseed.json", json!({"kind": "oracle-suite"}));
    let run = nexp().args(["solve", "--config"]).arg(&no_seed).output().unwrap();
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("seed"));

    // Wrong subcommand for the kind.
    let run = nexp().args(["verify", "--config"]).arg(&ok).output().unwrap();
    assert_eq!(run.status.code(), Some(2));

    let diverging = write_config(
        dir.path(),
        "diverge.json",
        json!({"kind": "fbsde", "seed": 1, "a": 0.0, "b": 0.0, "s": 1.0, "x0": 0.0,
               "coupling_y": 0.1, "coupling_z": 0.0,
               "driver": {"type": "zero"}, "terminal": {"type": "linear", "params": [1.0]},
               "grid": {"horizon": 50.0, "steps": 50}, "paths": 2000}),
    );
    let run = nexp()
        .args(["fbsde", "--threads", "1", "--config"])
        .arg(&diverging)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(3), "{}", String::from_utf8_lossy(&run.stderr));
}

#[test]
fn seed_override_changes_the_echo_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    let base = parse(json!({"kind": "oracle-suite", "seed": 1}), dir.path());
    let o = Overrides {
        seed: Some(2),
        output_dir: Some(dir.path().to_path_buf()),
    };
    let over = parse_config(r#"{"kind": "oracle-suite", "seed": 1}"#, &o, Path::new(".")).unwrap();
    assert_eq!(over.echo["seed"], json!(2));
    assert_ne!(over.hash, base.hash);
    // Defaults are filled into the echo.
    assert_eq!(over.echo["paths"], json!(100000));
}
