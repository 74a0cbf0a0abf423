//! Reverse-mode autodiff, losses and the training loop.

mod adam;
mod gradcheck;
mod loss;
pub mod tape;
mod train;

pub use adam::{Adam, ADAM_EPS, BETA1, BETA2};
pub use gradcheck::{grad_check, grad_check_report, GradCheckReport, GRAD_CHECK_FLOOR};
pub use loss::{
    matching_loss, matching_loss_on, similarity_loss, similarity_loss_on, target_similarity, total_loss,
    LossReport, DEFAULT_ALPHA, LOG_EPS,
};
pub use tape::{Gradients, Tape, Var};
pub use train::{
    batch_gradient, dataset_loss, loss_grad_check, prepare_dataset, sample_gradient, train, train_epoch, write_loss_curve,
    EpochLoss, TrainConfig, TrainState, TrainingSample,
};

use thiserror::Error;

use crate::matcher::MatcherError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("the ground-truth matrix has no matches")]
    EmptyGroundTruth,
    #[error("ground-truth cell {cell:?} is outside the {shape:?} soft matrix")]
    CellOutOfRange { cell: (usize, usize), shape: (usize, usize) },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("loss became non-finite in epoch {epoch}")]
    DivergenceDetected { epoch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Matcher(#[from] MatcherError),
}

#[cfg(test)]
mod tests;
