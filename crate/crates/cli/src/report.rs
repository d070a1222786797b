use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::config_hash;

/// One asserted quantity. Non-finite measurements are stored as `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub measured: Option<f64>,
    pub tolerance: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub kind: String,
    pub config_hash: String,
    pub config: Value,
    pub checks: Vec<Check>,
    pub metrics: Vec<Metric>,
    pub artifacts: Vec<String>,
    pub timings: Vec<Timing>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl RunReport {
    pub fn new(kind: &str, config: Value, config_hash: String) -> Self {
        RunReport {
            kind: kind.to_string(),
            config_hash,
            config,
            checks: vec![],
            metrics: vec![],
            artifacts: vec![],
            timings: vec![],
        }
    }

    /// Records `measured` against `tolerance`; the caller decides `passed`.
    pub fn check(&mut self, name: &str, passed: bool, measured: f64, tolerance: f64, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            measured: finite(measured),
            tolerance: finite(tolerance),
            detail: detail.into(),
        });
    }

    /// `|measured - target| <= tol`.
    pub fn check_close(&mut self, name: &str, measured: f64, target: f64, tol: f64) {
        let passed = (measured - target).abs() <= tol;
        self.check(name, passed, measured, tol, format!("|x - {target}| <= tol"));
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.push(Metric {
            name: name.to_string(),
            value: finite(value),
        });
    }

    pub fn timing(&mut self, stage: &str, seconds: f64) {
        self.timings.push(Timing {
            stage: stage.to_string(),
            seconds,
        });
    }

    pub fn n_failed(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }

    pub fn passed(&self) -> bool {
        self.n_failed() == 0
    }

    /// Whether the stored hash matches a rehash of the echoed config.
    pub fn hash_matches(&self) -> bool {
        config_hash(&self.config) == self.config_hash
    }

    /// The report without wall-clock timings, for reproducibility checks.
    pub fn without_timings(&self) -> RunReport {
        RunReport {
            timings: vec![],
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let num = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.6e}"));
        let _ = writeln!(s, "nexp run report");
        let _ = writeln!(s, "kind:        {}", self.kind);
        let _ = writeln!(s, "config hash: {}", self.config_hash);
        let _ = writeln!(s, "checks:      {} ({} failed)", self.checks.len(), self.n_failed());
        for c in &self.checks {
            let _ = writeln!(
                s,
                "  {} {:<32} measured={:<14} tol={:<14} {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                num(c.measured),
                num(c.tolerance),
                c.detail
            );
        }
        if !self.metrics.is_empty() {
            let _ = writeln!(s, "metrics:");
            for m in &self.metrics {
                let _ = writeln!(s, "  {:<34} {}", m.name, num(m.value));
            }
        }
        if !self.artifacts.is_empty() {
            let _ = writeln!(s, "artifacts:");
            for a in &self.artifacts {
                let _ = writeln!(s, "  {a}");
            }
        }
        if !self.timings.is_empty() {
            let _ = writeln!(s, "timings:");
            for t in &self.timings {
                let _ = writeln!(s, "  {:<34} {:.3}s", t.stage, t.seconds);
            }
        }
        if self.passed() {
            let _ = writeln!(s, "result: all checks passed, exit status 0");
        } else {
            let _ = writeln!(s, "result: {} check(s) failed, exit status 1", self.n_failed());
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Text,
    Json,
}

pub fn emit_report(report: &RunReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => report.to_text(),
        ReportFormat::Json => report.to_json(),
    }
}
