use std::fmt::Write as _;

use crate::bsde::{RegressionBasis, SolverOptions};
use crate::error::{Error, Result};
use crate::nets::Driver;
use crate::stochastic::PathEnsemble;

use super::data::{loss_and_gradient, Dataset, Regularization};

/// Step size `eta_k` as a function of the iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LearningRate {
    Constant(f64),
    /// `eta0 / (1 + decay k)`
    InverseTime {
        eta0: f64,
        decay: f64,
    },
    /// `eta0 gamma^k`
    Exponential {
        eta0: f64,
        gamma: f64,
    },
}

impl LearningRate {
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            LearningRate::Constant(e) => e,
            LearningRate::InverseTime { eta0, decay } => eta0 / (1.0 + decay * k as f64),
            LearningRate::Exponential { eta0, gamma } => eta0 * gamma.powi(k as i32),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LearningRate::Constant(e) => e >= 0.0 && e.is_finite(),
            LearningRate::InverseTime { eta0, decay } => eta0 >= 0.0 && eta0.is_finite() && decay >= 0.0,
            LearningRate::Exponential { eta0, gamma } => eta0 >= 0.0 && eta0.is_finite() && gamma > 0.0 && gamma <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid learning rate schedule {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: LearningRate,
    pub max_iters: usize,
    /// Stop once `|loss_k - loss_{k-1}| < tol`.
    pub tol: Option<f64>,
    pub regularization: Regularization,
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub theta_norm: f64,
    pub data_term: f64,
    pub reg_term: f64,
    pub norm_term: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub theta: Vec<f64>,
    /// Number of gradient steps taken.
    pub iteration: usize,
    pub learning_rate: LearningRate,
    pub regularization: Regularization,
    pub loss_history: Vec<f64>,
    pub log: Vec<TrainLogRow>,
    /// Seed of the Brownian bundle used throughout.
    pub seed: u64,
    pub converged: bool,
}

impl TrainState {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,loss,grad_norm,theta_norm,data_term,reg_term,norm_term\n");
        for r in &self.log {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.iter, r.loss, r.grad_norm, r.theta_norm, r.data_term, r.reg_term, r.norm_term
            );
        }
        s
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Plain gradient descent on the dataset loss, on a fixed ensemble.
pub fn train<D: Driver + Clone>(
    dataset: &Dataset,
    ensemble: &PathEnsemble,
    driver: &D,
    config: &TrainConfig,
    basis: RegressionBasis,
    opts: &SolverOptions,
) -> Result<(TrainState, D)> {
    train_observed(dataset, ensemble, driver, config, basis, opts, |_, _| {})
}

/// [`train`] with a callback after every parameter update.
pub fn train_observed<D: Driver + Clone>(
    dataset: &Dataset,
    ensemble: &PathEnsemble,
    driver: &D,
    config: &TrainConfig,
    basis: RegressionBasis,
    opts: &SolverOptions,
    mut observe: impl FnMut(&TrainState, &D),
) -> Result<(TrainState, D)> {
    config.learning_rate.validate()?;
    let mut current = driver.clone();
    let mut state = TrainState {
        theta: driver.params().to_vec(),
        iteration: 0,
        learning_rate: config.learning_rate,
        regularization: config.regularization,
        loss_history: vec![],
        log: vec![],
        seed: ensemble.bundle().seed(),
        converged: false,
    };
    for k in 0..=config.max_iters {
        let rep = loss_and_gradient(dataset, ensemble, &current, config.regularization, basis, opts)?;
        if !rep.loss.is_finite() || rep.gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged { iteration: k });
        }
        state.log.push(TrainLogRow {
            iter: k,
            loss: rep.loss,
            grad_norm: norm(&rep.gradient),
            theta_norm: norm(&state.theta),
            data_term: rep.data_term,
            reg_term: rep.reg_term,
            norm_term: rep.norm_term,
        });
        let prev = state.loss_history.last().copied();
        state.loss_history.push(rep.loss);
        if let (Some(tol), Some(prev)) = (config.tol, prev) {
            if (rep.loss - prev).abs() < tol {
                state.converged = true;
                break;
            }
        }
        if k == config.max_iters {
            break;
        }
        let eta = config.learning_rate.at(k);
        let next: Vec<f64> = state
            .theta
            .iter()
            .zip(&rep.gradient)
            .map(|(t, g)| t - eta * g)
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingDiverged { iteration: k });
        }
        current = current.with_params(&next)?;
        state.theta = next;
        state.iteration = k + 1;
        observe(&state, &current);
    }
    Ok((state, current))
}
