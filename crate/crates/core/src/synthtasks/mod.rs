//! Synthetic environments: a verifiable arithmetic-chain task, a programmatic
//! style judge, and preference-pair construction.

mod arithmetic;
mod oracle;
mod pairs;
pub mod records;
mod style;
mod verify;

pub use arithmetic::{gen_problems, gen_problems_with, ArithmeticProblem, GenConfig, Operator, ANSWER_PREFIX};
pub use oracle::OracleScorer;
pub use pairs::{build_accuracy_pairs, build_style_pairs, extremes, sft_corpus, ACCURACY_OBJECTIVE, STYLE_OBJECTIVE};
pub use records::{read_jsonl, write_jsonl, ProblemRecord, RolloutRecord};
pub use style::{StyleJudgeSpec, DEFAULT_MARKER};
pub use verify::{parse_equation, parse_prompt, split_steps, step_reward, verify, Equation, Verification};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid problem: {0}")]
    Problem(String),
    #[error("parse: {0}")]
    Parse(String),
    #[error("task config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
