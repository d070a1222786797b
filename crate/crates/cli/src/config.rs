#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

/// One experiment run: a seed, an optional output directory and the
/// kind-specific problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(flatten)]
    pub experiment: Experiment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Experiment {
    Solve(SolveSpec),
    VerifyAxioms(VerifySpec),
    OracleSuite(OracleSuiteSpec),
    Train(TrainSpec),
    MeanfieldLln(LlnSpec),
    MeanfieldClt(CltSpec),
    Fbsde(FbsdeSpec),
    Merton(MertonSpec),
    Calibrate(CalibrateSpec),
}

/// Every accepted `kind`.
pub const KINDS: [&str; 9] = [
    "solve",
    "verify-axioms",
    "oracle-suite",
    "train",
    "meanfield-lln",
    "meanfield-clt",
    "fbsde",
    "merton",
    "calibrate",
];

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::Solve(_) => "solve",
            Experiment::VerifyAxioms(_) => "verify-axioms",
            Experiment::OracleSuite(_) => "oracle-suite",
            Experiment::Train(_) => "train",
            Experiment::MeanfieldLln(_) => "meanfield-lln",
            Experiment::MeanfieldClt(_) => "meanfield-clt",
            Experiment::Fbsde(_) => "fbsde",
            Experiment::Merton(_) => "merton",
            Experiment::Calibrate(_) => "calibrate",
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default = "one")]
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriverSpec {
    Zero,
    Linear {
        b: Vec<f64>,
    },
    Entropic {
        theta: f64,
    },
    ConvexQuadratic {
        theta: f64,
    },
    Constant {
        theta: f64,
        c: f64,
    },
    /// A freshly initialized network.
    Net {
        architecture: String,
        #[serde(default = "one_usize")]
        x_dim: usize,
        #[serde(default = "one_usize")]
        z_dim: usize,
        hidden: Vec<usize>,
        #[serde(default)]
        activation: Option<String>,
        #[serde(default)]
        aux: Option<Vec<usize>>,
        #[serde(default)]
        bound: Option<f64>,
        #[serde(default)]
        monotone_aux: bool,
        /// Defaults to a seed derived from the run seed.
        #[serde(default)]
        init_seed: Option<u64>,
    },
    /// A network saved in the text format of `DriverNet::to_text`.
    NetFile {
        path: PathBuf,
    },
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ForwardSpec {
    Brownian {
        #[serde(default = "one_usize")]
        dim: usize,
    },
    Gbm {
        mu: f64,
        sigma: f64,
        x0: f64,
    },
    ScalarLinear {
        a: f64,
        b: f64,
        s: f64,
        x0: f64,
    },
}

impl Default for ForwardSpec {
    fn default() -> Self {
        ForwardSpec::Brownian { dim: 1 }
    }
}

/// A named payoff of `X_T` (see `Terminal::from_kind`), or `a . W_T + shift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalSpec {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_degree")]
    pub basis_degree: u32,
    /// IQR multiple for Z clipping; `null` turns clipping off.
    #[serde(default = "default_clip")]
    pub z_clip_iqr: Option<f64>,
    #[serde(default)]
    pub truncation: Option<f64>,
    #[serde(default = "default_inner")]
    pub inner_picard_iters: usize,
}

fn default_degree() -> u32 {
    3
}

fn default_clip() -> Option<f64> {
    Some(10.0)
}

fn default_inner() -> usize {
    2
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            basis_degree: default_degree(),
            z_clip_iqr: default_clip(),
            truncation: None,
            inner_picard_iters: default_inner(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub value: f64,
    /// Absolute tolerance.
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSpec {
    pub driver: DriverSpec,
    #[serde(default)]
    pub forward: ForwardSpec,
    pub terminal: TerminalSpec,
    pub grid: GridSpec,
    pub paths: usize,
    #[serde(default)]
    pub solver: SolverSpec,
    /// Optional assertion on `Y_0`.
    #[serde(default)]
    pub expect_y0: Option<Expectation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSuiteSpec {
    #[serde(default = "default_oracle_paths")]
    pub paths: usize,
    #[serde(default = "default_oracle_steps")]
    pub steps: usize,
    #[serde(default = "default_linear_b")]
    pub linear_b: f64,
    #[serde(default = "one")]
    pub entropic_theta: f64,
    /// Relative tolerance for the linear and entropic cases.
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    /// Absolute tolerance for the zero driver.
    #[serde(default = "default_zero_tol")]
    pub zero_tol: f64,
}

fn default_oracle_paths() -> usize {
    100_000
}
fn default_oracle_steps() -> usize {
    50
}
fn default_linear_b() -> f64 {
    0.3
}
fn default_rel_tol() -> f64 {
    0.02
}
fn default_zero_tol() -> f64 {
    0.02
}

impl Default for OracleSuiteSpec {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AxiomCheck {
    Comparison,
    Convexity,
    Jensen,
    Consistency,
    Dual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    pub driver: DriverSpec,
    pub grid: GridSpec,
    pub paths: usize,
    pub checks: Vec<AxiomCheck>,
    #[serde(default)]
    pub solver: SolverSpec,
    /// `xi_1 >= xi_2` for comparison; `xi_1`, `xi_2` for convexity.
    #[serde(default)]
    pub xi_1: Option<TerminalSpec>,
    #[serde(default)]
    pub xi_2: Option<TerminalSpec>,
    #[serde(default = "half")]
    pub lambda: f64,
    #[serde(default = "half")]
    pub split_fraction: f64,
    /// Constant controls for the dual bound (scalar `z` only).
    #[serde(default)]
    pub dual_controls: Vec<f64>,
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    /// CSV in the `Dataset::from_csv` format, relative to the config file.
    pub dataset: PathBuf,
    pub driver: DriverSpec,
    pub grid: GridSpec,
    pub paths: usize,
    pub learning_rate: f64,
    /// Inverse-time decay `eta_k = eta / (1 + decay k)`; 0 keeps it constant.
    #[serde(default)]
    pub decay: f64,
    pub max_iters: usize,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub lambda_reg: f64,
    #[serde(default)]
    pub lambda_norm: f64,
    #[serde(default)]
    pub solver: SolverSpec,
    /// Optional assertion on the fitted parameter vector.
    #[serde(default)]
    pub expect_params: Option<Vec<Expectation>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlnSpec {
    pub model: String,
    pub n_list: Vec<usize>,
    pub grid: GridSpec,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_cloud")]
    pub cloud_size: usize,
    #[serde(default = "one_u32")]
    pub basis_degree: u32,
    /// Asserted slope window `[target - tol, target + tol]`.
    #[serde(default)]
    pub expect_slope: Option<Expectation>,
}

fn default_trials() -> usize {
    20
}
fn default_cloud() -> usize {
    8192
}
fn one_u32() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CltSpec {
    pub model: String,
    pub n_list: Vec<usize>,
    pub grid: GridSpec,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_cloud")]
    pub cloud_size: usize,
    #[serde(default = "one_u32")]
    pub basis_degree: u32,
    #[serde(default = "default_u0_var")]
    pub u0_variance: f64,
    /// Paths for the fluctuation-system solve; 0 skips it.
    #[serde(default)]
    pub fluctuation_paths: usize,
    /// Relative tolerance on `Var(U_T)` against the analytic limit, for
    /// models that have one.
    #[serde(default)]
    pub variance_rel_tol: Option<f64>,
}

fn default_u0_var() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FbsdeSpec {
    pub a: f64,
    #[serde(default)]
    pub b: f64,
    pub s: f64,
    #[serde(default)]
    pub x0: f64,
    pub coupling_y: f64,
    #[serde(default)]
    pub coupling_z: f64,
    pub driver: DriverSpec,
    pub terminal: TerminalSpec,
    pub grid: GridSpec,
    pub paths: usize,
    #[serde(default = "default_picard")]
    pub max_iters: usize,
    #[serde(default = "default_picard_tol")]
    pub tol: f64,
    #[serde(default)]
    pub solver: SolverSpec,
}

fn default_picard() -> usize {
    20
}
fn default_picard_tol() -> f64 {
    1e-10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSpec {
    pub mu: f64,
    pub r: f64,
    pub sigma: f64,
    pub gamma: f64,
    #[serde(default = "one")]
    pub horizon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HjbSpec {
    #[serde(default = "default_intervals")]
    pub intervals: usize,
    #[serde(default)]
    pub time_steps: Option<usize>,
    #[serde(default)]
    pub l_range: Option<(f64, f64)>,
    #[serde(default = "one")]
    pub x0: f64,
}

fn default_intervals() -> usize {
    200
}

impl Default for HjbSpec {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MertonSpec {
    pub market: MarketSpec,
    pub thetas: Vec<f64>,
    #[serde(default)]
    pub hjb: HjbSpec,
    #[serde(default = "default_value_tol")]
    pub value_rel_tol: f64,
    #[serde(default = "default_policy_tol")]
    pub policy_rel_tol: f64,
}

fn default_value_tol() -> f64 {
    0.005
}
fn default_policy_tol() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateSpec {
    pub market: MarketSpec,
    /// CSV with columns `t,x,allocation`, relative to the config file.
    pub observations: PathBuf,
    #[serde(default)]
    pub hjb: HjbSpec,
    #[serde(default)]
    pub theta_lo: f64,
    #[serde(default = "two")]
    pub theta_hi: f64,
    #[serde(default = "default_search_tol")]
    pub tol: f64,
    #[serde(default)]
    pub expect_theta: Option<Expectation>,
}

fn two() -> f64 {
    2.0
}
fn default_search_tol() -> f64 {
    1e-5
}

/// Command-line overrides applied before validation.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

/// A parsed config together with its canonical JSON and hash.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// Canonical (sorted-key) JSON of the effective config.
    pub echo: Value,
    pub hash: String,
    /// Directory that relative data paths are resolved against.
    pub base_dir: PathBuf,
}

/// SHA-256 of the compact, sorted-key serialization.
pub fn config_hash(echo: &Value) -> String {
    let text = serde_json::to_string(echo).expect("JSON values always serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn at_path<T: DeserializeOwned>(value: Value) -> Result<T, CliError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        CliError::config(if path == "." { "" } else { &path }, e.into_inner().to_string())
    })
}

/// Splits off the common fields and deserializes the kind's spec on its
/// own: going through the tagged enum would buffer the input and lose the
/// field path of any error.
fn typed(mut value: Value) -> Result<ExperimentConfig, CliError> {
    let obj = value.as_object_mut().expect("checked by the caller");
    let seed = serde_json::from_value::<u64>(obj.remove("seed").unwrap_or(Value::Null))
        .map_err(|e| CliError::config("seed", e.to_string()))?;
    let output_dir = match obj.remove("output_dir") {
        Some(v) => serde_json::from_value(v).map_err(|e| CliError::config("output_dir", e.to_string()))?,
        None => None,
    };
    let kind = obj
        .remove("kind")
        .and_then(|k| k.as_str().map(str::to_owned))
        .unwrap_or_default();
    let experiment = match kind.as_str() {
        "solve" => Experiment::Solve(at_path(value)?),
        "verify-axioms" => Experiment::VerifyAxioms(at_path(value)?),
        "oracle-suite" => Experiment::OracleSuite(at_path(value)?),
        "train" => Experiment::Train(at_path(value)?),
        "meanfield-lln" => Experiment::MeanfieldLln(at_path(value)?),
        "meanfield-clt" => Experiment::MeanfieldClt(at_path(value)?),
        "fbsde" => Experiment::Fbsde(at_path(value)?),
        "merton" => Experiment::Merton(at_path(value)?),
        "calibrate" => Experiment::Calibrate(at_path(value)?),
        other => return Err(CliError::config("kind", format!("unknown experiment kind `{other}`"))),
    };
    Ok(ExperimentConfig {
        seed,
        output_dir,
        experiment,
    })
}

pub fn parse_config(text: &str, overrides: &Overrides, base_dir: &Path) -> Result<LoadedConfig, CliError> {
    let mut value: Value =
        serde_json::from_str(text).map_err(|e| CliError::config("", format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CliError::config("", "config must be a JSON object"))?;
    if let Some(seed) = overrides.seed {
        obj.insert("seed".into(), seed.into());
    }
    if let Some(dir) = &overrides.output_dir {
        obj.insert("output_dir".into(), dir.to_string_lossy().into_owned().into());
    }
    if !obj.contains_key("seed") {
        return Err(CliError::config(
            "seed",
            "missing field `seed` (every run needs an explicit seed)",
        ));
    }
    match obj.get("kind") {
        None => return Err(CliError::config("kind", "missing field `kind`")),
        Some(Value::String(k)) if KINDS.contains(&k.as_str()) => {}
        Some(k) => {
            return Err(CliError::config(
                "kind",
                format!("unknown experiment kind {k} (expected one of {})", KINDS.join(", ")),
            ))
        }
    }
    let config = typed(value)?;
    validate(&config)?;
    // Re-serialize so defaults are echoed and the hash covers them.
    let echo = serde_json::to_value(&config).expect("config serializes");
    let hash = config_hash(&echo);
    Ok(LoadedConfig {
        config,
        echo,
        hash,
        base_dir: base_dir.to_path_buf(),
    })
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<LoadedConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config("", format!("cannot read {}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&text, overrides, &base)
}

fn positive(field: &str, v: usize) -> Result<(), CliError> {
    if v == 0 {
        Err(CliError::config(field, "must be positive"))
    } else {
        Ok(())
    }
}

fn check_grid(prefix: &str, g: &GridSpec) -> Result<(), CliError> {
    positive(&format!("{prefix}grid.steps"), g.steps)?;
    if !(g.horizon > 0.0 && g.horizon.is_finite()) {
        return Err(CliError::config(&format!("{prefix}grid.horizon"), "must be positive"));
    }
    Ok(())
}

fn validate(c: &ExperimentConfig) -> Result<(), CliError> {
    match &c.experiment {
        Experiment::Solve(s) => {
            check_grid("", &s.grid)?;
            positive("paths", s.paths)
        }
        Experiment::VerifyAxioms(s) => {
            check_grid("", &s.grid)?;
            positive("paths", s.paths)?;
            if s.checks.is_empty() {
                return Err(CliError::config("checks", "list at least one axiom check"));
            }
            Ok(())
        }
        Experiment::OracleSuite(s) => {
            positive("paths", s.paths)?;
            positive("steps", s.steps)
        }
        Experiment::Train(s) => {
            check_grid("", &s.grid)?;
            positive("paths", s.paths)
        }
        Experiment::MeanfieldLln(s) => {
            check_grid("", &s.grid)?;
            positive("trials", s.trials)
        }
        Experiment::MeanfieldClt(s) => {
            check_grid("", &s.grid)?;
            positive("trials", s.trials)
        }
        Experiment::Fbsde(s) => {
            check_grid("", &s.grid)?;
            positive("paths", s.paths)
        }
        Experiment::Merton(s) => {
            if s.thetas.is_empty() {
                return Err(CliError::config("thetas", "list at least one theta"));
            }
            Ok(())
        }
        Experiment::Calibrate(_) => Ok(()),
    }
}
