//! A small frame-wise encoder, an optional attention decoder, and a plain SGD
//! loop for training every objective in [`crate::ctc`] on synthetic data.

mod model;
mod task;
mod train;

pub use model::{
    batch_loss, forward_backward_step, numerical_gradient, Linear, ModelSpec, StepResult, ToyDecoder, ToyEncoder,
    ToyModel, SOS_EOS,
};
pub use task::{SyntheticTask, TaskConfig, Utterance, BLANK_SYMBOL, SYNTHETIC_PHONES};
pub use train::{evaluate, train, Checkpoint, EvalMetrics, TraceRecord, TrainConfig, TrainOutcome};

use thiserror::Error;

use crate::ctc::CtcError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error("non-finite gradient: {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged {
        step: usize,
        loss: f64,
        /// Trace up to and including the failing step.
        trace: Vec<TraceRecord>,
    },
}
