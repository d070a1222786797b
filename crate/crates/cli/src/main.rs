use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nexp_cli::{emit_report, load_config, run_experiment, CliError, Overrides, ReportFormat, RunReport};

#[derive(Parser)]
#[command(name = "nexp", version, about = "Neural expectation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one BSDE, or run the closed-form oracle suite.
    Solve(RunArgs),
    /// Check comparison, convexity, Jensen, consistency or the dual bound.
    Verify(RunArgs),
    /// Fit driver parameters to a dataset of observed values.
    Train(RunArgs),
    /// Propagation-of-chaos and fluctuation experiments.
    Meanfield(RunArgs),
    /// Coupled forward-backward system by Picard iteration.
    Fbsde(RunArgs),
    /// Merton problem under ambiguity: policies and their properties.
    Merton(RunArgs),
    /// Fit the ambiguity parameter to observed allocations.
    Calibrate(RunArgs),
    /// Print a saved report and verify its config hash.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    format: ReportFormat,
}

#[derive(Args)]
struct ReportArgs {
    /// A `report.json` written by a previous run.
    path: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    format: ReportFormat,
}

/// Kinds each subcommand accepts.
fn accepted(cmd: &Command) -> &'static [&'static str] {
    match cmd {
        Command::Solve(_) => &["solve", "oracle-suite"],
        Command::Verify(_) => &["verify-axioms"],
        Command::Train(_) => &["train"],
        Command::Meanfield(_) => &["meanfield-lln", "meanfield-clt"],
        Command::Fbsde(_) => &["fbsde"],
        Command::Merton(_) => &["merton"],
        Command::Calibrate(_) => &["calibrate"],
        Command::Report(_) => &[],
    }
}

fn run(cli: Cli) -> Result<(RunReport, ReportFormat), CliError> {
    let args = match &cli.command {
        Command::Report(r) => {
            let text =
                std::fs::read_to_string(&r.path).map_err(|e| CliError::Io(format!("{}: {e}", r.path.display())))?;
            let mut report = RunReport::from_json(&text).map_err(|e| CliError::config("report", e.to_string()))?;
            let ok = report.hash_matches();
            report.check(
                "config-hash",
                ok,
                if ok { 0.0 } else { 1.0 },
                0.0,
                "stored hash matches the stored config",
            );
            return Ok((report, r.format));
        }
        Command::Solve(a)
        | Command::Verify(a)
        | Command::Train(a)
        | Command::Meanfield(a)
        | Command::Fbsde(a)
        | Command::Merton(a)
        | Command::Calibrate(a) => a,
    };
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config("threads", e.to_string()))?;
    }
    let overrides = Overrides {
        seed: args.seed,
        output_dir: args.out.clone(),
    };
    let loaded = load_config(&args.config, &overrides)?;
    let kind = loaded.config.experiment.kind();
    let ok = accepted(&cli.command);
    if !ok.contains(&kind) {
        return Err(CliError::config(
            "kind",
            format!(
                "`{kind}` is not handled by this subcommand (expected one of {})",
                ok.join(", ")
            ),
        ));
    }
    log::info!("running {kind} with config hash {}", loaded.hash);
    Ok((run_experiment(&loaded)?, args.format))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok((report, format)) => {
            print!("{}", emit_report(&report, format));
            if report.passed() {
                ExitCode::from(nexp_cli::EXIT_OK as u8)
            } else {
                ExitCode::from(nexp_cli::EXIT_ASSERTION as u8)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
