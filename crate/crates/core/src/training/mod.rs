//! Joint masked-token and label objective, AdamW, and the training loop with
//! optional counterfactual injection.

mod adamw;
mod loss;
mod trainer;

pub use adamw::{adamw_step, adamw_step_slice, AdamState, AdamWConfig};
pub use loss::{compute_losses, loss_and_grad, LossBreakdown};
pub use trainer::{
    batch_gradient, counterfactual_selection, epoch_batches, history_csv, mask_seed, plan_batches, prepare_batch,
    run_training, train_from, Divergence, EpochRecord, LrSchedule, PreparedSample, TrainConfig, TrainResult,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no masked signal positions but alpha1 > 0")]
    EmptyMask,
    #[error("non-finite gradient in {tensor}[{index}] = {value}")]
    NonFiniteGradient { tensor: String, index: usize, value: f64 },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error(transparent)]
    Counterfactual(#[from] crate::interpret::InterpretError),
}

pub type Result<T> = std::result::Result<T, TrainingError>;
