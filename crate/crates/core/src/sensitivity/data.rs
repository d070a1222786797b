use std::io::Read;

use crate::bsde::{solve_bsde_lsmc, BsdeProblem, RegressionBasis, SolverOptions, Terminal};
use crate::error::{Error, Result};
use crate::nets::Driver;
use crate::stochastic::PathEnsemble;

use super::solve::{solve_sensitivity_bsde, SensitivityOptions};

/// One observation: a terminal functional and the value observed for it at time 0.
#[derive(Debug, Clone)]
pub struct Record {
    pub id: String,
    pub terminal: Terminal,
    pub observed: f64,
    pub time: f64,
}

impl Record {
    pub fn new(id: impl Into<String>, terminal: Terminal, observed: f64) -> Self {
        Record {
            id: id.into(),
            terminal,
            observed,
            time: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<Record>,
}

impl Dataset {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("dataset has no records".into()));
        }
        for r in &records {
            if !r.observed.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "record {} has a non-finite observation",
                    r.id
                )));
            }
            // Only time-0 observations are learnable with a deterministic initial state.
            if r.time != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "record {} has evaluation time {}; only 0 is supported",
                    r.id, r.time
                )));
            }
        }
        Ok(Dataset { records })
    }

    /// Reads `record_id,terminal_kind,terminal_params...,observed_value` rows
    /// (header required, parameter count varies by kind).
    ///
    /// Terminal kinds act on the first state coordinate `x` at maturity:
    /// `linear a [b]` is `a x + b`, `abs a` is `a |x|`, `square a` is `a x^2`,
    /// `call k` is `max(x - k, 0)`, `put k` is `max(k - x, 0)` and
    /// `digital k` is `1{x > k}`.
    pub fn from_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .flexible(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let mut records = vec![];
        for (line, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| Error::Parse(format!("dataset row {}: {e}", line + 2)))?;
            if row.len() < 3 {
                return Err(Error::Parse(format!(
                    "dataset row {}: expected at least 3 columns",
                    line + 2
                )));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("dataset row {}: `{s}` is not a number", line + 2)))
            };
            let params: Vec<f64> = row.iter().skip(2).take(row.len() - 3).map(num).collect::<Result<_>>()?;
            let observed = num(&row[row.len() - 1])?;
            let terminal = Terminal::from_kind(&row[1], &params)
                .map_err(|e| Error::Parse(format!("dataset row {}: {e}", line + 2)))?;
            records.push(Record::new(&row[0], terminal, observed));
        }
        Dataset::new(records)
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Replaces every observation with the solver's `Y_0` under `driver`.
    pub fn relabel_with<D: Driver>(
        &self,
        ensemble: &PathEnsemble,
        driver: &D,
        basis: RegressionBasis,
        opts: &SolverOptions,
    ) -> Result<Self> {
        let records = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let s = solve_bsde_lsmc(&BsdeProblem::new(ensemble, &r.terminal, driver), basis, opts)
                    .map_err(|e| with_record(i, e))?;
                Ok(Record {
                    observed: s.y0(),
                    ..r.clone()
                })
            })
            .collect::<Result<_>>()?;
        Dataset::new(records)
    }
}

pub(crate) fn with_record(record: usize, e: Error) -> Error {
    Error::Record {
        record,
        source: Box::new(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Regularization {
    /// Weight of `||theta||^2` on the raw parameters.
    pub lambda_reg: f64,
    /// Weight of the normalization penalty `f(t, X, Y~, 0)^2`.
    pub lambda_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub data_term: f64,
    pub reg_term: f64,
    pub norm_term: f64,
    pub gradient: Vec<f64>,
    /// Fitted `Y_0` per record.
    pub y0: Vec<f64>,
}

/// Squared-error loss over the dataset plus both regularizers, with its
/// gradient from the sensitivity solves.
pub fn loss_and_gradient<D: Driver>(
    dataset: &Dataset,
    ensemble: &PathEnsemble,
    driver: &D,
    reg: Regularization,
    basis: RegressionBasis,
    opts: &SolverOptions,
) -> Result<LossReport> {
    let m = dataset.len() as f64;
    let theta = driver.params();
    let mut gradient = vec![0.0; theta.len()];
    let mut data_term = 0.0;
    let mut penalty = 0.0;
    let mut y0 = vec![];
    let sopts = SensitivityOptions {
        store_paths: false,
        normalization: reg.lambda_norm != 0.0,
    };
    for (i, r) in dataset.records().iter().enumerate() {
        let problem = BsdeProblem::new(ensemble, &r.terminal, driver);
        let primary = solve_bsde_lsmc(&problem, basis, opts).map_err(|e| with_record(i, e))?;
        let sens = solve_sensitivity_bsde(&problem, &primary, &sopts).map_err(|e| with_record(i, e))?;
        let resid = primary.y0() - r.observed;
        data_term += resid * resid / m;
        for (g, s) in gradient.iter_mut().zip(sens.grad_y0()) {
            *g += 2.0 * resid * s / m;
        }
        if sopts.normalization {
            penalty += sens.normalization_penalty() / m;
            for (g, s) in gradient.iter_mut().zip(sens.normalization_gradient()) {
                *g += reg.lambda_norm * s / m;
            }
        }
        y0.push(primary.y0());
    }
    let reg_term = reg.lambda_reg * theta.iter().map(|v| v * v).sum::<f64>();
    for (g, t) in gradient.iter_mut().zip(theta) {
        *g += 2.0 * reg.lambda_reg * t;
    }
    let norm_term = reg.lambda_norm * penalty;
    Ok(LossReport {
        loss: data_term + reg_term + norm_term,
        data_term,
        reg_term,
        norm_term,
        gradient,
        y0,
    })
}
