//! Multi-action-head DPO: SFT warm-up, per-objective DPO losses routed to their
//! own heads, and the combined weighted loss on the shared backbone.

mod batch;
mod loss;
mod pair;
mod sft;
mod train;

pub use batch::{epoch_batches, route_batch, MiniBatch};
pub use loss::{combined_loss, combined_loss_var, dpo_pair_loss, dpo_pair_loss_var, CombinedTerms, PairLoss, PolicyHead};
pub use pair::{encode_pairs, EncodedPair, PreferencePair, Routed};
pub use sft::{encode_sft, sft_loss, token_accuracy, train_sft, SftConfig, SftExample, SftReport};
pub use train::{
    combined_gradients, evaluate_preferences, train_mahdpo, train_mahdpo_encoded, train_step, BatchGradients, PreferenceEval,
    StepMetrics, TrainConfig, TrainLogRow, TrainReport,
};

use thiserror::Error;

use crate::numcore::NumError;
use crate::policy::ModelError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("every objective group of the batch is empty")]
    EmptyBatch,
    #[error("objective id {id} out of range for {heads} heads")]
    Objective { id: usize, heads: usize },
    #[error("bad training data: {0}")]
    Data(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("non-finite gradient in {param} at optimizer step {step}; update skipped")]
    NonFiniteGradient { param: String, step: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
