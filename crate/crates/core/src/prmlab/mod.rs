//! Step-level supervision and reward models: hindsight-relabeled value
//! targets, majority-vote and direct-judge labels, and Bradley-Terry scoring.

mod labels;
mod reward;
mod rollout;
mod trajectory;

pub use labels::{
    blended_reward, direct_judge_label, hindsight_targets, majority_indicator, majority_vote_label, rollout_outcome,
    rollout_stream, Judge, LabelMode, LabeledRecord, PrmLabelConfig, RolloutOutcome, ValueTarget,
};
pub use reward::{
    tag_prompt, train_bt_reward, train_classifier_prm, train_value_prm, unified_dataset, PrefixExample, PrmReport,
    PrmTrainConfig, RewardKind, RewardModel, RewardScorer, ScoredPair,
};
pub use rollout::{PolicyRollout, RolloutPolicy};
pub use trajectory::{split_token_steps, ArithmeticOracle, StepTrajectory, TaskOracle};

use thiserror::Error;

use crate::decode::DecodeError;
use crate::numcore::NumError;
use crate::policy::ModelError;
use crate::synthtasks::TaskError;

#[derive(Debug, Error)]
pub enum PrmError {
    #[error("labeling config: {0}")]
    Config(String),
    #[error("trajectory: {0}")]
    Trajectory(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("classifier dataset contains a single class")]
    SingleClass,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Num(#[from] NumError),
}
