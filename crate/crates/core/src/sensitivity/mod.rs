//! Parameter sensitivities of the solver output, the learning loss and a
//! gradient-descent trainer.

mod data;
mod solve;
mod train;

pub use data::{loss_and_gradient, Dataset, LossReport, Record, Regularization};
pub use solve::{fd_gradient_check, solve_sensitivity_bsde, FdReport, SensitivityOptions, SensitivitySolution};
pub use train::{train, train_observed, LearningRate, TrainConfig, TrainLogRow, TrainState};
